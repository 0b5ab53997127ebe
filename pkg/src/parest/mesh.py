"""Conforming simplicial meshes on intervals and rectangles.

Meshes are generated programmatically (structured only) and are immutable
after construction.  Each cell carries its affine map from the reference
simplex, so basis evaluation and quadrature happen in reference
coordinates throughout the toolkit.
"""

import numpy as np


class SimplicialMesh:
    """Conforming partition of an interval (dim=1) or rectangle (dim=2).

    Attributes
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    vertices : (nv, dim) float array
    cells : (nc, dim+1) int array
        Vertex indices per cell.
    faces : (nf, dim) int array
        Codimension-one sub-simplices with sorted vertex indices
        (vertices in 1D, edges in 2D).
    boundary_face_flags, boundary_vertex_flags : bool arrays
    cell_diameters, inscribed_diameters : float arrays
        h_K and the diameter of the largest inscribed ball of K.
    """

    def __init__(self, dim, vertices, cells):
        self.dim = int(dim)
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, self.dim)
        self.cells = np.asarray(cells, dtype=int).reshape(-1, self.dim + 1)
        self.n_vertices = self.vertices.shape[0]
        self.n_cells = self.cells.shape[0]
        self._build_faces()
        self._build_geometry()
        self.vertices.setflags(write=False)
        self.cells.setflags(write=False)

    def _build_faces(self):
        d = self.dim
        face_map = {}
        # faces of the reference simplex, as local vertex index tuples
        if d == 1:
            local_faces = [(0,), (1,)]
        else:
            local_faces = [(0, 1), (1, 2), (0, 2)]
        cell_faces = np.empty((self.n_cells, d + 1), dtype=int)
        incidence = []
        for k, cell in enumerate(self.cells):
            for i, lf in enumerate(local_faces):
                key = tuple(sorted(cell[list(lf)]))
                idx = face_map.get(key)
                if idx is None:
                    idx = len(face_map)
                    face_map[key] = idx
                    incidence.append([])
                incidence[idx].append(k)
                cell_faces[k, i] = idx
        self.faces = np.array(sorted(face_map, key=face_map.get), dtype=int).reshape(
            len(face_map), d)
        self.cell_faces = cell_faces
        self.face_cells = incidence
        counts = np.array([len(c) for c in incidence])
        if counts.max() > 2:
            raise ValueError("mesh is not conforming: face shared by >2 cells")
        self.boundary_face_flags = counts == 1
        self.boundary_vertex_flags = np.zeros(self.n_vertices, dtype=bool)
        for f, on_bdry in zip(self.faces, self.boundary_face_flags):
            if on_bdry:
                self.boundary_vertex_flags[f] = True

    def _build_geometry(self):
        v = self.vertices[self.cells]  # (nc, dim+1, dim)
        # affine map x = b + J xi, columns of J span the cell
        self.cell_origins = v[:, 0, :]
        self.cell_jacobians = np.transpose(v[:, 1:, :] - v[:, :1, :], (0, 2, 1))
        if self.dim == 1:
            det = self.cell_jacobians[:, 0, 0]
        else:
            J = self.cell_jacobians
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        if np.any(det <= 0):
            raise ValueError("cells must be positively oriented and nondegenerate")
        self.cell_detjac = det
        self.cell_invjac = np.linalg.inv(self.cell_jacobians)
        self.cell_volumes = det / (1.0 if self.dim == 1 else 2.0)
        if self.dim == 1:
            h = np.abs(v[:, 1, 0] - v[:, 0, 0])
            rho = h.copy()
        else:
            e01 = np.linalg.norm(v[:, 1] - v[:, 0], axis=1)
            e12 = np.linalg.norm(v[:, 2] - v[:, 1], axis=1)
            e02 = np.linalg.norm(v[:, 2] - v[:, 0], axis=1)
            h = np.maximum(np.maximum(e01, e12), e02)
            perimeter = e01 + e12 + e02
            rho = 4.0 * self.cell_volumes / perimeter  # 2 * inradius
        self.cell_diameters = h
        self.inscribed_diameters = rho

    @property
    def shape_regularity(self):
        """theta = max_K h_K / rho_K."""
        return float(np.max(self.cell_diameters / self.inscribed_diameters))

    def map_to_physical(self, cell, ref_points):
        """Map reference points (n, dim) into physical cell coordinates."""
        return self.cell_origins[cell] + ref_points @ self.cell_jacobians[cell].T

    def locate(self, points, tol=1e-12):
        """Find, for each physical point, a containing cell and its
        reference coordinates.

        Structured meshes get an O(1)-per-point index computation; the
        general fallback is a linear scan."""
        points = np.atleast_2d(points)
        guess = self._structured_guess(points)
        cells = np.empty(len(points), dtype=int)
        refs = np.empty((len(points), self.dim))
        for i, x in enumerate(points):
            if guess is not None:
                k = guess[i]
                xi = self.cell_invjac[k] @ (x - self.cell_origins[k])
                if np.all(xi >= -tol) and xi.sum() <= 1.0 + tol:
                    cells[i] = k
                    refs[i] = xi
                    continue
            found = False
            for k in range(self.n_cells):
                xi = self.cell_invjac[k] @ (x - self.cell_origins[k])
                if np.all(xi >= -tol) and xi.sum() <= 1.0 + tol:
                    cells[i] = k
                    refs[i] = xi
                    found = True
                    break
            if not found:
                raise ValueError(f"point {x} lies outside the mesh")
        return cells, refs

    def _structured_guess(self, points):
        """Vectorized candidate cell indices from the lattice structure
        of a built mesh, or None when unstructured."""
        structure = getattr(self, "structure", None)
        if structure is None:
            return None
        if structure[0] == "interval":
            _, n, (a, b) = structure
            idx = np.floor((points[:, 0] - a) / (b - a) * n).astype(int)
            return np.clip(idx, 0, n - 1)
        _, nx, ny, (x0, x1, y0, y1) = structure
        fx = (points[:, 0] - x0) / (x1 - x0) * nx
        fy = (points[:, 1] - y0) / (y1 - y0) * ny
        i = np.clip(np.floor(fx).astype(int), 0, nx - 1)
        j = np.clip(np.floor(fy).astype(int), 0, ny - 1)
        # lower triangle (diagonal from the lower-left corner) when the
        # local coordinates satisfy fy - j <= fx - i
        lower = (fy - j) <= (fx - i)
        return 2 * (i * ny + j) + np.where(lower, 0, 1)


class VertexPatch:
    """Cells sharing a vertex; support of the associated hat function."""

    def __init__(self, mesh, vertex, cells):
        self.vertex = int(vertex)
        self.cells = tuple(int(c) for c in cells)
        self.is_interior = not bool(mesh.boundary_vertex_flags[vertex])
        pts = mesh.vertices[np.unique(mesh.cells[list(cells)])]
        diffs = pts[:, None, :] - pts[None, :, :]
        self.patch_diameter = float(np.sqrt((diffs ** 2).sum(-1)).max())
        self.volume = float(mesh.cell_volumes[list(cells)].sum())


def vertex_patches(mesh):
    """One patch per mesh vertex, in ascending vertex order."""
    incident = [[] for _ in range(mesh.n_vertices)]
    for k, cell in enumerate(mesh.cells):
        for a in cell:
            incident[a].append(k)
    return [VertexPatch(mesh, a, cs) for a, cs in enumerate(incident)]


def build_interval_mesh(n_cells, endpoints=(0.0, 1.0)):
    """Uniform mesh of `n_cells` cells on the interval `endpoints`."""
    if n_cells < 1:
        raise ValueError("n_cells must be positive")
    a, b = endpoints
    if not b > a:
        raise ValueError("endpoints must be strictly increasing")
    vertices = np.linspace(a, b, n_cells + 1).reshape(-1, 1)
    cells = np.column_stack([np.arange(n_cells), np.arange(1, n_cells + 1)])
    mesh = SimplicialMesh(1, vertices, cells)
    mesh.structure = ("interval", int(n_cells), (float(a), float(b)))
    return mesh


def build_structured_triangle_mesh(nx, ny, rectangle=(0.0, 1.0, 0.0, 1.0)):
    """nx-by-ny grid of quads on the rectangle, each cut into two
    triangles along the same diagonal direction, so that uniform
    refinement produces nested meshes."""
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be positive")
    x0, x1, y0, y1 = rectangle
    if not (x1 > x0 and y1 > y0):
        raise ValueError("rectangle must have positive extents")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    def vid(i, j):
        return i * (ny + 1) + j

    cells = []
    for i in range(nx):
        for j in range(ny):
            v00 = vid(i, j)
            v10 = vid(i + 1, j)
            v01 = vid(i, j + 1)
            v11 = vid(i + 1, j + 1)
            # diagonal from (i, j) to (i+1, j+1)
            cells.append((v00, v10, v11))
            cells.append((v00, v11, v01))
    mesh = SimplicialMesh(2, vertices, cells)
    mesh.structure = ("rectangle", int(nx), int(ny),
                      tuple(float(c) for c in rectangle))
    return mesh


def refine_mesh(mesh, factor=2):
    """Uniformly refined (nested) copy of a structured mesh."""
    if factor < 1 or int(factor) != factor:
        raise ValueError("refinement factor must be a positive integer")
    structure = getattr(mesh, "structure", None)
    if structure is None:
        raise ValueError("mesh carries no structured-refinement data")
    if structure[0] == "interval":
        _, n, endpoints = structure
        return build_interval_mesh(factor * n, endpoints)
    _, nx, ny, rectangle = structure
    return build_structured_triangle_mesh(factor * nx, factor * ny, rectangle)
