"""Finite metric measure spaces: balls, volume growth and doubling diagnostics.

A :class:`PointCloudSpace` is the discrete stand-in for a metric measure
space: point masses plus a symmetric distance matrix.  The fitting routines
search explicit constant grids so that repeated runs with the same seed
produce identical profiles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path


class InputError(ValueError):
    """Invalid argument to a katoforge operation."""


@dataclass(frozen=True)
class PointCloudSpace:
    """Finite metric measure space given by point masses and a distance matrix.

    Parameters
    ----------
    masses : (n,) positive point masses.
    distance : (n, n) symmetric matrix with zero diagonal, or a callable
        ``d(i, j)`` that is materialised once at construction.
    """

    masses: np.ndarray
    distance: np.ndarray
    point_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        masses = np.asarray(self.masses, dtype=float)
        if masses.ndim != 1 or masses.size == 0:
            raise InputError("masses must be a nonempty 1-d array")
        if np.any(masses <= 0):
            raise InputError("every point mass must be positive")
        n = masses.size
        dist = self.distance
        if callable(dist):
            dist = np.array([[dist(i, j) for j in range(n)] for i in range(n)], dtype=float)
        else:
            dist = np.asarray(dist, dtype=float)
        if dist.shape != (n, n):
            raise InputError(f"distance matrix must be ({n}, {n}), got {dist.shape}")
        if np.any(np.diag(dist) != 0.0):
            raise InputError("distance matrix must have zero diagonal")
        if not np.allclose(dist, dist.T, rtol=0, atol=1e-12):
            raise InputError("distance matrix must be symmetric")
        if np.any(dist < 0):
            raise InputError("distances must be nonnegative")
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "distance", dist)
        ids = self.point_ids
        if ids is None:
            ids = np.arange(n)
        else:
            ids = np.asarray(ids, dtype=int)
            if ids.shape != (n,):
                raise InputError("point_ids must match the number of masses")
        object.__setattr__(self, "point_ids", ids)

    @property
    def n_points(self) -> int:
        return self.masses.size

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    @property
    def diameter(self) -> float:
        return float(self.distance.max())

    def check_triangle_inequality(self, sample_count: int = 200, seed: int = 0,
                                  tol: float = 1e-10) -> bool:
        """Spot-check d(x,y) <= d(x,z) + d(z,y) on random triples."""
        rng = np.random.default_rng(seed)
        n = self.n_points
        idx = rng.integers(0, n, size=(sample_count, 3))
        d = self.distance
        lhs = d[idx[:, 0], idx[:, 1]]
        rhs = d[idx[:, 0], idx[:, 2]] + d[idx[:, 2], idx[:, 1]]
        return bool(np.all(lhs <= rhs + tol))


@dataclass(frozen=True)
class GrowthProfile:
    """Fitted constants (c, kappa, lam) of the volume growth inequality

        V(x, alpha*r) <= c * alpha**kappa * exp(lam*alpha*r) * V(x, r)

    for alpha >= 1.  ``worst_ratio`` is the largest sampled left/right ratio
    at the fitted constants (<= 1 when ``passes``).
    """

    c: float
    kappa: float
    lam: float
    passes: bool
    worst_ratio: float

    def bound(self, alpha: np.ndarray, r: np.ndarray) -> np.ndarray:
        return self.c * alpha ** self.kappa * np.exp(self.lam * alpha * r)


@dataclass(frozen=True)
class DoublingProfile:
    """Measured doubling constant A_b on radii r <= b: V(x,2r) <= A_b V(x,r)."""

    b: float
    A_b: float
    passes: bool


def ball_measure(space: PointCloudSpace, x: int, r: float) -> float:
    """Mass of the open ball B(x, r) = {y : d(x,y) < r}.

    Open balls throughout: points at distance exactly r are excluded.
    """
    if not 0 <= x < space.n_points:
        raise InputError(f"unknown point id {x}")
    if r <= 0:
        return 0.0
    inside = space.distance[x] < r
    return float(space.masses[inside].sum())


def resolution_scale(space: PointCloudSpace) -> float:
    """Twice the median nearest-neighbour distance: the scale below which
    ball masses are dominated by single-point granularity."""
    d = space.distance.copy()
    np.fill_diagonal(d, np.inf)
    nn = d.min(axis=1)
    nn = nn[np.isfinite(nn)]
    if nn.size == 0:
        return 0.0
    return 2.0 * float(np.median(nn))


def _growth_samples(space: PointCloudSpace, sample_count: int, seed: int):
    """Random (x, r, alpha) triples with alpha >= 1 and alpha*r below the diameter.

    Radii start at the resolution floor so the fitted exponents reflect the
    geometry rather than mass quantisation at sub-mesh scales.
    """
    rng = np.random.default_rng(seed)
    n = space.n_points
    diam = space.diameter
    r_floor = resolution_scale(space)
    # grown balls capped at half the diameter: beyond that V saturates at the
    # total mass and the ratios stop scaling
    r_cap = 0.5 * diam
    if diam == 0.0 or r_floor == 0.0 or r_cap <= r_floor:
        return np.zeros(0, int), np.zeros(0), np.zeros(0)
    alpha_max = min(16.0, r_cap / r_floor)
    if alpha_max <= 1.0:
        return np.zeros(0, int), np.zeros(0), np.zeros(0)
    xs = rng.integers(0, n, size=sample_count)
    alphas = np.exp(rng.uniform(0.0, np.log(alpha_max), size=sample_count))
    r_hi = r_cap / alphas
    rs = np.exp(rng.uniform(np.log(r_floor), np.log(np.maximum(r_hi, r_floor * 1.0001))))
    return xs, rs, alphas


# Search grids for (c, kappa, lam).  Geometric in c and lam, linear in kappa.
_C_GRID = np.geomspace(1.0, 64.0, 25)
_KAPPA_GRID = np.arange(0.0, 4.0 + 1e-9, 0.125)
_LAMBDA_GRID = np.concatenate(([0.0], np.geomspace(0.05, 3.2, 13)))


def fit_growth_profile(space: PointCloudSpace, sample_count: int = 2000,
                       seed: int = 0) -> GrowthProfile:
    """Fit canonical constants satisfying volume growth on sampled triples.

    Two stages.  First the exponents are estimated by least squares on
    log V(x, alpha r)/V(x, r) against (log alpha, alpha r) and snapped to the
    declared grids, with the exponential rate clipped to zero when it is
    statistically negligible; an envelope search cannot identify the natural
    exponent because the multiplicative constant can always absorb polynomial
    growth over a bounded alpha range.  Then c is the smallest grid constant
    making the inequality hold on every sample at those exponents.
    Deterministic given the seed.
    """
    if space.n_points == 1:
        return GrowthProfile(c=1.0, kappa=0.0, lam=0.0, passes=True, worst_ratio=1.0)
    xs, rs, alphas = _growth_samples(space, sample_count, seed)
    if xs.size == 0:
        return GrowthProfile(c=1.0, kappa=0.0, lam=0.0, passes=True, worst_ratio=1.0)
    v_r = np.array([ball_measure(space, x, r) for x, r in zip(xs, rs)])
    v_ar = np.array([ball_measure(space, x, a * r) for x, a, r in zip(xs, alphas, rs)])
    ratio = v_ar / v_r  # V(x,r) > 0 always: the ball contains x

    log_ratio = np.log(ratio)
    log_alpha = np.log(alphas)
    ar = alphas * rs
    design = np.column_stack([np.ones_like(ar), log_alpha, ar])
    coef, *_ = np.linalg.lstsq(design, log_ratio, rcond=None)
    kappa_hat = max(0.0, float(coef[1]))
    lam_hat = max(0.0, float(coef[2]))
    if lam_hat < 0.025:
        lam_hat = 0.0
    kappa = float(_KAPPA_GRID[np.argmin(np.abs(_KAPPA_GRID - kappa_hat))])
    lam = float(_LAMBDA_GRID[np.searchsorted(_LAMBDA_GRID, lam_hat - 1e-12)]) \
        if lam_hat > 0 else 0.0

    need = ratio / (alphas ** kappa * np.exp(lam * ar))
    c_needed = float(need.max(initial=1.0))
    ok = _C_GRID >= c_needed - 1e-12
    c = float(_C_GRID[np.argmax(ok)]) if ok.any() else c_needed
    worst = float(np.max(ratio / (c * alphas ** kappa * np.exp(lam * ar))))
    return GrowthProfile(c=c, kappa=kappa, lam=lam, passes=worst <= 1.0 + 1e-12,
                         worst_ratio=worst)


def fit_doubling_profile(space: PointCloudSpace, b: float, sample_count: int = 2000,
                         seed: int = 0) -> DoublingProfile:
    """Measure A_b = max V(x,2r)/V(x,r) over sampled x and r in (0, b].

    Radii are sampled away from the resolution floor b/20 so the measured
    constant reflects geometry rather than single-point granularity.
    """
    if b <= 0:
        raise InputError("b must be positive")
    if space.n_points == 1:
        return DoublingProfile(b=b, A_b=1.0, passes=True)
    rng = np.random.default_rng(seed)
    xs = rng.integers(0, space.n_points, size=sample_count)
    rs = rng.uniform(b / 20.0, b, size=sample_count)
    worst = 1.0
    for x, r in zip(xs, rs):
        v1 = ball_measure(space, int(x), r)
        v2 = ball_measure(space, int(x), 2.0 * r)
        worst = max(worst, v2 / v1)
    return DoublingProfile(b=b, A_b=float(worst), passes=np.isfinite(worst))


def graph_geodesics(mesh) -> PointCloudSpace:
    """Shortest-path metric over mesh edges, weighted by ambient edge length.

    Masses are the lumped vertex measures of the mesh.  Raises on a
    disconnected mesh since every downstream estimate assumes connectivity.
    """
    verts = mesh.vertices
    nv = verts.shape[0]
    rows, cols, vals = [], [], []
    for edge in mesh.edge_list():
        i, j = int(edge[0]), int(edge[1])
        w = float(np.linalg.norm(verts[i] - verts[j]))
        rows.append(i)
        cols.append(j)
        vals.append(w)
    graph = sp.csr_matrix((vals, (rows, cols)), shape=(nv, nv))
    dist = shortest_path(graph, method="D", directed=False)
    if np.any(np.isinf(dist)):
        raise InputError("mesh is disconnected: geodesic distances are infinite")
    dist = 0.5 * (dist + dist.T)  # exact symmetry against roundoff
    return PointCloudSpace(masses=mesh.vertex_measure.copy(), distance=dist)
