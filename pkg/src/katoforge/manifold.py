"""Discrete geometry of meshed submanifolds of R^n.

Meshes are simplicial: polylines (intrinsic dimension 1) or triangle
surfaces (intrinsic dimension 2) embedded in an ambient R^n.  All inner
products are weighted by lumped vertex measures or Riemannian cell
measures, so the divergence below is the exact negative adjoint of the
gradient and the Laplacian is symmetric positive semidefinite.

Conventions:
  * per-cell quantities live in an orthonormal tangent frame, hence the
    frame push-forward preserves lengths exactly;
  * vertex measure = sum of incident cell measures / (m+1);
  * the Laplacian uses the geometer's sign, Delta = -div grad >= 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .metric_space import InputError


class MeshFormatError(ValueError):
    """Malformed mesh file."""


@dataclass
class DiscreteOperator:
    """Sparse operator between measure-weighted coefficient spaces.

    ``domain_weights`` and ``codomain_weights`` are the diagonal measures
    defining the L2 inner products; adjoints are always taken with respect
    to these, never the raw Euclidean pairing.
    """

    matrix: sp.spmatrix
    domain_space: str
    codomain_space: str
    domain_weights: np.ndarray
    codomain_weights: np.ndarray

    def apply(self, u: np.ndarray) -> np.ndarray:
        return self.matrix @ u

    def adjoint_matrix(self) -> sp.spmatrix:
        """Matrix of the weighted adjoint: M_dom^-1 A^H M_cod."""
        d_inv = sp.diags(1.0 / self.domain_weights)
        c = sp.diags(self.codomain_weights)
        return (d_inv @ self.matrix.conj().T @ c).tocsr()

    def adjoint(self) -> "DiscreteOperator":
        return DiscreteOperator(
            matrix=self.adjoint_matrix(),
            domain_space=self.codomain_space,
            codomain_space=self.domain_space,
            domain_weights=self.codomain_weights,
            codomain_weights=self.domain_weights,
        )

    def inner_domain(self, u, v) -> complex:
        return complex(np.vdot(v, self.domain_weights * u))

    def inner_codomain(self, u, v) -> complex:
        return complex(np.vdot(v, self.codomain_weights * u))


@dataclass
class EmbeddedMesh:
    """Simplicial mesh in R^n with induced metric and lumped measures."""

    vertices: np.ndarray          # (V, n) embedding coordinates
    cells: np.ndarray             # (C, m+1) vertex indices
    cell_metric: np.ndarray = field(init=False)    # (C, m, m) Gram matrices
    cell_measure: np.ndarray = field(init=False)   # (C,) Riemannian volumes
    vertex_measure: np.ndarray = field(init=False)  # (V,)
    tangent_frames: np.ndarray = field(init=False)  # (C, n, m) orthonormal columns
    frame_coords: np.ndarray = field(init=False)    # (C, m, m) upper triangular R
    boundary_vertex: np.ndarray = field(init=False)  # (V,) bool
    closed: bool = field(init=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.cells = np.asarray(self.cells, dtype=int)
        if self.vertices.ndim != 2:
            raise InputError("vertices must be a (V, n) array")
        if self.cells.ndim != 2 or self.cells.shape[1] not in (2, 3):
            raise InputError("cells must be (C, 2) edges or (C, 3) triangles")
        if self.cells.min(initial=0) < 0 or self.cells.max(initial=-1) >= len(self.vertices):
            raise InputError("cell indices out of vertex range")
        self._build_geometry()

    # -- construction ---------------------------------------------------

    def _build_geometry(self):
        V, n = self.vertices.shape
        C, k = self.cells.shape
        m = k - 1
        if m > n:
            raise InputError("intrinsic dimension exceeds ambient dimension")
        edges = self.vertices[self.cells[:, 1:]] - self.vertices[self.cells[:, :1]]
        # edges: (C, m, n); E_K has the m spanning vectors as rows
        E = np.swapaxes(edges, 1, 2)  # (C, n, m)
        gram = np.einsum("cni,cnj->cij", E, E)
        det = np.linalg.det(gram)
        if np.any(det <= 0):
            bad = int(np.argmax(det <= 0))
            raise InputError(f"degenerate cell {bad}: zero Riemannian volume")
        fact = 1.0 if m == 1 else 2.0
        measure = np.sqrt(det) / fact
        # orthonormal frames by thin QR with positive diagonal
        frames = np.empty((C, n, m))
        rmats = np.empty((C, m, m))
        for c in range(C):
            q, r = np.linalg.qr(E[c])
            sign = np.sign(np.diag(r))
            sign[sign == 0] = 1.0
            frames[c] = q * sign
            rmats[c] = sign[:, None] * r
        vmass = np.zeros(V)
        np.add.at(vmass, self.cells.ravel(), np.repeat(measure / k, k))
        if np.any(vmass <= 0):
            raise InputError("isolated vertex: zero lumped measure")
        self.cell_metric = gram
        self.cell_measure = measure
        self.vertex_measure = vmass
        self.tangent_frames = frames
        self.frame_coords = rmats
        self.boundary_vertex = self._find_boundary()
        self.closed = not bool(self.boundary_vertex.any())

    def _find_boundary(self) -> np.ndarray:
        V = self.n_vertices
        flags = np.zeros(V, dtype=bool)
        if self.intrinsic_dim == 1:
            deg = np.zeros(V, dtype=int)
            np.add.at(deg, self.cells.ravel(), 1)
            flags[deg < 2] = True
        else:
            # boundary edge = facet shared by exactly one triangle
            from collections import Counter
            count = Counter()
            for tri in self.cells:
                for a, b in ((0, 1), (1, 2), (2, 0)):
                    count[tuple(sorted((tri[a], tri[b])))] += 1
            for (i, j), c in count.items():
                if c == 1:
                    flags[i] = flags[j] = True
        return flags

    # -- basic queries ---------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def intrinsic_dim(self) -> int:
        return self.cells.shape[1] - 1

    @property
    def total_measure(self) -> float:
        return float(self.cell_measure.sum())

    def edge_list(self) -> np.ndarray:
        """Unique undirected edges as an (E, 2) index array."""
        if self.intrinsic_dim == 1:
            pairs = self.cells
        else:
            pairs = np.vstack([self.cells[:, [0, 1]], self.cells[:, [1, 2]],
                               self.cells[:, [2, 0]]])
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0)

    def vertex_rings(self) -> list[set]:
        rings = [set() for _ in range(self.n_vertices)]
        for i, j in self.edge_list():
            rings[i].add(int(j))
            rings[j].add(int(i))
        return rings

    def cell_to_vertex_average(self) -> sp.csr_matrix:
        """T: vertex fields -> cell fields, the vertex mean over each cell.

        Its weighted adjoint T* pushes cell data back to vertices and maps
        constants to constants because the vertex measure is lumped.
        """
        C, k = self.cells.shape
        rows = np.repeat(np.arange(C), k)
        cols = self.cells.ravel()
        vals = np.full(C * k, 1.0 / k)
        return sp.csr_matrix((vals, (rows, cols)), shape=(C, self.n_vertices))


# -- mesh generators ------------------------------------------------------


def generate_mesh(shape: str, **params) -> EmbeddedMesh:
    """Factory for the standard test geometries.

    Shapes: ``circle(r, n_pts)``, ``sphere(r, refinement)``,
    ``torus(R, r, n, m)``, ``flat_patch(w, h, n, m)``,
    ``helix(r, pitch, turns, n_pts)``.
    """
    makers = {
        "circle": _make_circle,
        "sphere": _make_sphere,
        "torus": _make_torus,
        "flat_patch": _make_flat_patch,
        "helix": _make_helix,
    }
    if shape not in makers:
        raise InputError(f"unknown shape '{shape}'; choose from {sorted(makers)}")
    return makers[shape](**params)


def _make_circle(r: float = 1.0, n_pts: int = 128) -> EmbeddedMesh:
    if r <= 0 or n_pts < 3:
        raise InputError("circle needs r > 0 and n_pts >= 3")
    theta = 2.0 * np.pi * np.arange(n_pts) / n_pts
    verts = np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    cells = np.column_stack([np.arange(n_pts), (np.arange(n_pts) + 1) % n_pts])
    return EmbeddedMesh(verts, cells)


def _make_helix(r: float = 1.0, pitch: float = 0.5, turns: float = 2.0,
                n_pts: int = 128) -> EmbeddedMesh:
    if r <= 0 or pitch <= 0 or turns <= 0 or n_pts < 2:
        raise InputError("helix needs positive r, pitch, turns and n_pts >= 2")
    theta = 2.0 * np.pi * turns * np.arange(n_pts) / (n_pts - 1)
    verts = np.column_stack([r * np.cos(theta), r * np.sin(theta),
                             pitch * theta / (2.0 * np.pi)])
    cells = np.column_stack([np.arange(n_pts - 1), np.arange(1, n_pts)])
    return EmbeddedMesh(verts, cells)


def _make_flat_patch(w: float = 1.0, h: float = 1.0, n: int = 2, m: int = 2) -> EmbeddedMesh:
    if w <= 0 or h <= 0 or n < 2 or m < 2:
        raise InputError("flat_patch needs positive sizes and >= 2 points per side")
    xs = np.linspace(0.0, w, n)
    ys = np.linspace(0.0, h, m)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(n * m)])
    cells = []
    for i in range(n - 1):
        for j in range(m - 1):
            a = i * m + j
            b = (i + 1) * m + j
            cells.append([a, b, b + 1])
            cells.append([a, b + 1, a + 1])
    return EmbeddedMesh(verts, np.array(cells))


def _make_torus(R: float = 2.0, r: float = 0.5, n: int = 24, m: int = 12) -> EmbeddedMesh:
    if R <= r or r <= 0 or n < 3 or m < 3:
        raise InputError("torus needs R > r > 0 and n, m >= 3")
    us = 2.0 * np.pi * np.arange(n) / n
    vs = 2.0 * np.pi * np.arange(m) / m
    verts = np.empty((n * m, 3))
    for i, u in enumerate(us):
        for j, v in enumerate(vs):
            verts[i * m + j] = [(R + r * np.cos(v)) * np.cos(u),
                                (R + r * np.cos(v)) * np.sin(u),
                                r * np.sin(v)]
    cells = []
    for i in range(n):
        for j in range(m):
            a = i * m + j
            b = ((i + 1) % n) * m + j
            c = ((i + 1) % n) * m + (j + 1) % m
            d = i * m + (j + 1) % m
            cells.append([a, b, c])
            cells.append([a, c, d])
    return EmbeddedMesh(verts, np.array(cells))


def _make_sphere(r: float = 1.0, refinement: int = 2) -> EmbeddedMesh:
    """Icosphere: subdivided icosahedron projected to the radius-r sphere."""
    if r <= 0 or refinement < 0:
        raise InputError("sphere needs r > 0 and refinement >= 0")
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    for _ in range(refinement):
        verts, faces = _subdivide_sphere(verts, faces)
    return EmbeddedMesh(r * verts, faces)


def _subdivide_sphere(verts, faces):
    cache = {}
    verts = list(verts)

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            p = verts[i] + verts[j]
            verts.append(p / np.linalg.norm(p))
            cache[key] = len(verts) - 1
        return cache[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return np.array(verts), np.array(new_faces)


# -- OFF file I/O ----------------------------------------------------------


def save_mesh(mesh: EmbeddedMesh, path: str) -> None:
    """Write an ASCII OFF file (vertex lines carry ambient_dim coordinates)."""
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_cells} 0\n")
        for v in mesh.vertices:
            fh.write(" ".join(f"{x:.17g}" for x in v) + "\n")
        for cell in mesh.cells:
            fh.write(f"{len(cell)} " + " ".join(str(i) for i in cell) + "\n")


def load_mesh(path: str, ambient_dim: int = 3) -> EmbeddedMesh:
    """Parse an ASCII OFF file with ambient_dim coordinates per vertex line."""
    with open(path) as fh:
        lines = fh.readlines()
    body = [(k + 1, ln.strip()) for k, ln in enumerate(lines)
            if ln.strip() and not ln.strip().startswith("#")]
    if not body or body[0][1] != "OFF":
        raise MeshFormatError(f"{path}: line 1: missing OFF header")
    if len(body) < 2:
        raise MeshFormatError(f"{path}: missing counts line")
    lineno, counts = body[1]
    parts = counts.split()
    if len(parts) < 2:
        raise MeshFormatError(f"{path}: line {lineno}: counts line needs at least "
                              "vertex and face counts")
    try:
        nv, nf = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise MeshFormatError(f"{path}: line {lineno}: bad counts: {exc}") from None
    rows = body[2:]
    if len(rows) < nv + nf:
        raise MeshFormatError(f"{path}: expected {nv} vertex and {nf} face lines, "
                              f"found {len(rows)}")
    verts = np.empty((nv, ambient_dim))
    for i in range(nv):
        lineno, ln = rows[i]
        cols = ln.split()
        if len(cols) < ambient_dim:
            raise MeshFormatError(f"{path}: line {lineno}: expected {ambient_dim} "
                                  f"coordinates, found {len(cols)}")
        try:
            verts[i] = [float(c) for c in cols[:ambient_dim]]
        except ValueError as exc:
            raise MeshFormatError(f"{path}: line {lineno}: bad coordinate: {exc}") from None
    cells = []
    size = None
    for i in range(nf):
        lineno, ln = rows[nv + i]
        cols = ln.split()
        try:
            k = int(cols[0])
            idx = [int(c) for c in cols[1:1 + k]]
        except (ValueError, IndexError) as exc:
            raise MeshFormatError(f"{path}: line {lineno}: bad face line: {exc}") from None
        if len(idx) != k:
            raise MeshFormatError(f"{path}: line {lineno}: face promises {k} indices")
        if k not in (2, 3):
            raise MeshFormatError(f"{path}: line {lineno}: only segments and "
                                  f"triangles are supported, got {k}-gon")
        if size is None:
            size = k
        elif k != size:
            raise MeshFormatError(f"{path}: line {lineno}: mixed cell sizes")
        if min(idx) < 0 or max(idx) >= nv:
            raise MeshFormatError(f"{path}: line {lineno}: vertex index out of range")
        cells.append(idx)
    return EmbeddedMesh(verts, np.array(cells))


# -- first-order operators -------------------------------------------------


def gradient_operator(mesh: EmbeddedMesh) -> DiscreteOperator:
    """Per-cell constant gradient of vertex fields, in tangent frame coordinates.

    Exact on functions that restrict linearly to each cell; output has m
    components per cell, stacked cell-major.
    """
    C = mesh.n_cells
    m = mesh.intrinsic_dim
    k = m + 1
    rows, cols, vals = [], [], []
    for c in range(C):
        # grad u in frame coords: R^-T applied to edge differences
        rinv_t = np.linalg.inv(mesh.frame_coords[c]).T
        # columns: coefficient of u at cell vertex j for each frame component
        coeff = np.zeros((m, k))
        coeff[:, 1:] = rinv_t
        coeff[:, 0] = -rinv_t.sum(axis=1)
        for a in range(m):
            for j in range(k):
                rows.append(c * m + a)
                cols.append(mesh.cells[c, j])
                vals.append(coeff[a, j])
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(C * m, mesh.n_vertices))
    return DiscreteOperator(
        matrix=mat,
        domain_space="vertex-scalars",
        codomain_space="cell-tangent-fields",
        domain_weights=mesh.vertex_measure,
        codomain_weights=np.repeat(mesh.cell_measure, m),
    )


def divergence_operator(mesh: EmbeddedMesh, grad: DiscreteOperator | None = None) -> DiscreteOperator:
    """div = -(weighted adjoint of grad), acting on cell tangent fields."""
    if grad is None:
        grad = gradient_operator(mesh)
    adj = grad.adjoint()
    adj.matrix = (-adj.matrix).tocsr()
    return adj


def laplacian(mesh: EmbeddedMesh, grad: DiscreteOperator | None = None) -> DiscreteOperator:
    """Delta = -div grad: symmetric PSD in the vertex-measure inner product."""
    if grad is None:
        grad = gradient_operator(mesh)
    div = divergence_operator(mesh, grad)
    return DiscreteOperator(
        matrix=(-div.matrix @ grad.matrix).tocsr(),
        domain_space="vertex-scalars",
        codomain_space="vertex-scalars",
        domain_weights=mesh.vertex_measure,
        codomain_weights=mesh.vertex_measure,
    )


def laplacian_eigs(mesh: EmbeddedMesh, k: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Lowest k eigenpairs of the Laplacian in the measure inner product.

    Solves the generalized symmetric problem K v = w M v with the stiffness
    K = G^T M_c G, which is Delta in the lumped-measure pairing.
    """
    from scipy.linalg import eigh
    grad = gradient_operator(mesh)
    K = (grad.matrix.T @ sp.diags(grad.codomain_weights) @ grad.matrix).toarray()
    K = 0.5 * (K + K.T)
    w, v = eigh(K, np.diag(mesh.vertex_measure))
    return w[:k], v[:, :k]


# -- curvature -------------------------------------------------------------


@dataclass
class GeometryTensors:
    """Second fundamental form and mean curvature sampled at vertices.

    ``h`` holds, per vertex, an (m, m, n) array of ambient normal vectors;
    entries at flagged vertices (boundary or deficient stencil) are zero and
    excluded from the suprema.
    """

    h: np.ndarray            # (V, m, m, n)
    h_norm: np.ndarray       # (V,)
    h_sup: float
    mean_curvature: np.ndarray  # (V, n)
    H_sup: float
    excluded: np.ndarray     # (V,) bool
    tangent_residual: float  # max relative tangential leakage of h entries


def _vertex_frame(mesh: EmbeddedMesh, vid: int, rings) -> np.ndarray:
    """Orthonormal tangent frame at a vertex: principal directions of the
    measure-weighted average of incident cell projectors."""
    m = mesh.intrinsic_dim
    proj = np.zeros((mesh.ambient_dim, mesh.ambient_dim))
    for c in np.flatnonzero((mesh.cells == vid).any(axis=1)):
        F = mesh.tangent_frames[c]
        proj += mesh.cell_measure[c] * (F @ F.T)
    w, vecs = np.linalg.eigh(proj)
    return vecs[:, ::-1][:, :m]


def second_fundamental_form(mesh: EmbeddedMesh, use_two_ring: bool = True) -> GeometryTensors:
    """Per-vertex quadratic fit of the embedding over the neighbour stencil.

    Fits offsets p_j - p_i against tangent coordinates with linear plus
    quadratic terms; the quadratic coefficients, projected onto the normal
    space, are the mixed second-order normal derivatives of the embedding.
    Vertices whose stencil cannot determine the quadratic are flagged and
    excluded from the suprema, as are boundary vertices.
    """
    if mesh.intrinsic_dim not in (1, 2):
        raise InputError("curvature fit supports intrinsic dimension 1 or 2 only")
    V, n = mesh.vertices.shape
    m = mesh.intrinsic_dim
    n_quad = m * (m + 1) // 2
    n_cols = m + n_quad
    rings = mesh.vertex_rings()
    h = np.zeros((V, m, m, n))
    h_norm = np.zeros(V)
    mean_c = np.zeros((V, n))
    excluded = np.zeros(V, dtype=bool)
    tang_resid = 0.0
    for i in range(V):
        if mesh.boundary_vertex[i]:
            excluded[i] = True
            continue
        nbrs = set(rings[i])
        if use_two_ring and len(nbrs) < n_cols:
            for j in list(nbrs):
                nbrs |= rings[j]
            nbrs.discard(i)
        nbrs = sorted(nbrs)
        if len(nbrs) < n_cols:
            excluded[i] = True
            continue
        F = _vertex_frame(mesh, i, rings)
        offsets = mesh.vertices[nbrs] - mesh.vertices[i]
        xi = offsets @ F  # (k, m) tangent coordinates
        cols = [xi[:, a] for a in range(m)]
        quad_idx = []
        for a in range(m):
            for b in range(a, m):
                cols.append(0.5 * xi[:, a] * xi[:, b] * (1.0 if a == b else 2.0))
                quad_idx.append((a, b))
        design = np.column_stack(cols)
        sol, _, rank, _ = np.linalg.lstsq(design, offsets, rcond=None)
        if rank < n_cols:
            excluded[i] = True
            continue
        normal_proj = np.eye(n) - F @ F.T
        hv = np.zeros((m, m, n))
        for (a, b), row in zip(quad_idx, sol[m:]):
            raw = row
            nrm = normal_proj @ raw
            if np.linalg.norm(raw) > 1e-12:
                tang_resid = max(tang_resid,
                                 np.linalg.norm(raw - nrm) / np.linalg.norm(raw))
            hv[a, b] = nrm
            hv[b, a] = nrm
        h[i] = hv
        # orthonormal vertex frame: metric contractions reduce to plain sums
        h_norm[i] = np.sqrt(np.einsum("abn,abn->", hv, hv))
        mean_c[i] = np.einsum("aan->n", hv)
    valid = ~excluded
    return GeometryTensors(
        h=h,
        h_norm=h_norm,
        h_sup=float(h_norm[valid].max()) if valid.any() else 0.0,
        mean_curvature=mean_c,
        H_sup=float(np.linalg.norm(mean_c[valid], axis=1).max()) if valid.any() else 0.0,
        excluded=excluded,
        tangent_residual=float(tang_resid),
    )


def mean_curvature_from_laplacian(mesh: EmbeddedMesh) -> np.ndarray:
    """Mean curvature vector as the Laplacian applied to each embedding coordinate.

    Agrees with trace(h) on smooth shapes and feeds the integrated gradient
    bound for compactly supported fields.
    """
    lap = laplacian(mesh)
    return np.column_stack([lap.apply(mesh.vertices[:, a])
                            for a in range(mesh.ambient_dim)])


# -- norms and Poincare ------------------------------------------------------


def sobolev_norm(mesh: EmbeddedMesh, u: np.ndarray,
                 grad: DiscreteOperator | None = None) -> float:
    """sqrt(||u||^2 + ||grad u||^2) in the weighted norms."""
    if grad is None:
        grad = gradient_operator(mesh)
    u = np.asarray(u, dtype=complex)
    gu = grad.apply(u)
    val = np.vdot(u, mesh.vertex_measure * u).real
    val += np.vdot(gu, grad.codomain_weights * gu).real
    return float(np.sqrt(val))


def check_local_poincare(mesh: EmbeddedMesh, space, trial_count: int = 60,
                         seed: int = 0, n_modes: int = 8) -> dict:
    """Empirical constant of || 1_B (u - u_B) ||^2 <= c r^2 (||1_B u||^2 + ||1_B grad u||^2).

    Balls are geodesic with radius r <= 1; trials are random combinations of
    low Laplacian eigenvectors; the gradient term is restricted to cells
    fully inside the ball.  Balls with fewer than two vertices are skipped.
    """
    rng = np.random.default_rng(seed)
    grad = gradient_operator(mesh)
    _, modes = laplacian_eigs(mesh, k=min(n_modes, mesh.n_vertices - 1))
    mu = mesh.vertex_measure
    cw = mesh.cell_measure
    m = mesh.intrinsic_dim
    worst = 0.0
    samples = []
    interior = ~mesh.boundary_vertex
    candidates = np.flatnonzero(interior)
    if candidates.size == 0:
        candidates = np.arange(mesh.n_vertices)
    for _ in range(trial_count):
        x = int(rng.choice(candidates))
        r = float(rng.uniform(0.2, 1.0))
        inside = space.distance[x] < r
        if inside.sum() < 2:
            continue
        coeff = rng.standard_normal(modes.shape[1])
        u = modes @ coeff
        ub = float(np.dot(mu[inside], u[inside]) / mu[inside].sum())
        lhs = float(np.dot(mu[inside], (u[inside] - ub) ** 2))
        cells_in = inside[mesh.cells].all(axis=1)
        gu = grad.apply(u).reshape(-1, m)
        grad_term = float(np.dot(cw[cells_in], (gu[cells_in] ** 2).sum(axis=1)))
        rhs = r * r * (float(np.dot(mu[inside], u[inside] ** 2)) + grad_term)
        if rhs <= 0:
            continue
        c = lhs / rhs
        samples.append({"center": x, "radius": r, "constant": c})
        worst = max(worst, c)
    return {"constant": worst, "samples": samples, "trial_count": trial_count}
