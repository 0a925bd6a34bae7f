"""Contact point extraction from tracked object points.

Tracks arrive precomputed (pre-contact position, contact-frame position,
visibility). Points that fall inside the fingertip triangle in the contact
frame are mapped back to their pre-contact positions, an isotropic Gaussian
mixture is fitted to them, and the contact point is the plain average of the
component means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateRegion, TooFewPoints
from .geometry import PixelPoint

VAR_FLOOR = 0.25  # px^2
MAX_EM_ITERS = 200
EM_TOL = 1e-8  # log-likelihood gain per point


@dataclass(frozen=True)
class TrackedPoint:
    id: int
    pos_pre: PixelPoint
    pos_contact: PixelPoint
    visible_contact: bool = True


@dataclass(frozen=True)
class FingerRegion:
    vertices: tuple  # thumb, index, middle tips projected into the contact frame
    dilation: float = 5.0

    def __post_init__(self):
        verts = tuple(PixelPoint(float(u), float(v)) for u, v in self.vertices)
        if len(verts) != 3:
            raise ValueError("finger region needs exactly three vertices")
        if self.dilation < 0:
            raise ValueError("dilation must be non-negative")
        object.__setattr__(self, "vertices", verts)

    def area(self) -> float:
        (x0, y0), (x1, y1), (x2, y2) = self.vertices
        return 0.5 * abs((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))


@dataclass(frozen=True, eq=False)
class GmmParams:
    means: np.ndarray  # (k, 2)
    variances: np.ndarray  # (k,)
    weights: np.ndarray  # (k,)
    ll_trace: tuple = field(default=(), repr=False)
    n_iter: int = 0

    @property
    def k(self) -> int:
        return len(self.weights)


def point_triangle_distance(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Euclidean distance from each of ``points`` (n, 2) to the filled triangle ``tri`` (3, 2)."""
    p = np.asarray(points, dtype=float).reshape(-1, 2)
    tri = np.asarray(tri, dtype=float)
    a, b, c = tri
    # signed areas; inside when all share the triangle's orientation (edges count as inside)
    def cross(o, e, q):
        return (e[0] - o[0]) * (q[:, 1] - o[1]) - (e[1] - o[1]) * (q[:, 0] - o[0])

    orient = np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
    s0, s1, s2 = cross(a, b, p) * orient, cross(b, c, p) * orient, cross(c, a, p) * orient
    inside = (s0 >= 0) & (s1 >= 0) & (s2 >= 0)

    dist = np.full(len(p), np.inf)
    for e0, e1 in ((a, b), (b, c), (c, a)):
        d = e1 - e0
        t = np.clip((p - e0) @ d / (d @ d), 0.0, 1.0)
        dist = np.minimum(dist, np.linalg.norm(p - (e0 + t[:, None] * d), axis=1))
    dist[inside] = 0.0
    return dist


def region_membership(pos_contact: np.ndarray, visible: np.ndarray, region: FingerRegion) -> np.ndarray:
    """Boolean mask of visible tracks whose contact-frame position lies in the dilated triangle."""
    if region.area() <= 1e-6:
        raise DegenerateRegion("fingertip triangle is degenerate")
    pos_contact = np.asarray(pos_contact, dtype=float).reshape(-1, 2)
    if len(pos_contact) == 0:
        return np.zeros(0, dtype=bool)
    dist = point_triangle_distance(pos_contact, np.array(region.vertices))
    return np.asarray(visible, dtype=bool) & (dist <= region.dilation)


def points_in_finger_region(tracks, region: FingerRegion) -> list[PixelPoint]:
    tracks = list(tracks)
    if region.area() <= 1e-6:
        raise DegenerateRegion("fingertip triangle is degenerate")
    if not tracks:
        return []
    pos_c = np.array([t.pos_contact for t in tracks], dtype=float)
    vis = np.array([t.visible_contact for t in tracks], dtype=bool)
    keep = region_membership(pos_c, vis, region)
    return [PixelPoint(*t.pos_pre) for t, k in zip(tracks, keep) if k]


# ---------------------------------------------------------------------------
# isotropic GMM via EM


def _lexmin_index(points: np.ndarray, candidates: np.ndarray) -> int:
    """Among candidate indices pick the lexicographically smallest point (order-independent)."""
    sub = points[candidates]
    order = np.lexsort((sub[:, 1], sub[:, 0]))
    return int(candidates[order[0]])


def farthest_point_init(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Farthest-point seeding; the first centre is the point nearest a seeded reference.

    The reference is drawn inside the bounding box, so the result is invariant to
    the order of ``points`` and equivariant to translating them.
    """
    rng = np.random.default_rng(seed)
    lo, hi = points.min(axis=0), points.max(axis=0)
    ref = lo + rng.uniform(size=2) * (hi - lo)
    d = np.linalg.norm(points - ref, axis=1)
    first = _lexmin_index(points, np.flatnonzero(d == d.min()))
    chosen = [first]
    mind = np.linalg.norm(points - points[first], axis=1)
    for _ in range(1, k):
        nxt = _lexmin_index(points, np.flatnonzero(mind == mind.max()))
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(points - points[nxt], axis=1))
    return points[chosen].copy()


def _log_components(x, means, variances, weights):
    sq = ((x[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    with np.errstate(divide="ignore"):
        logw = np.log(weights)
    return logw[None, :] - np.log(2 * np.pi * variances)[None, :] - 0.5 * sq / variances[None, :]


def gmm_log_likelihood(points, gmm: GmmParams) -> float:
    x = np.asarray(points, dtype=float).reshape(-1, 2)
    return float(logsumexp(_log_components(x, gmm.means, gmm.variances, gmm.weights), axis=1).sum())


def fit_gmm(points, k: int, seed: int = 0, var_floor: float = VAR_FLOOR,
            max_iter: int = MAX_EM_ITERS, tol: float = EM_TOL) -> GmmParams:
    """Fit an isotropic k-component mixture to 2-D pixel points by EM."""
    x = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(x)
    if k < 1 or n < k:
        raise TooFewPoints(f"need at least k={k} points, got {n}")

    means = farthest_point_init(x, k, seed)
    variances = np.full(k, max(x.var(axis=0).mean(), var_floor))
    weights = np.full(k, 1.0 / k)

    trace = []
    prev = -np.inf
    it = 0
    for it in range(1, max_iter + 1):
        logp = _log_components(x, means, variances, weights)
        lse = logsumexp(logp, axis=1)
        ll = float(lse.sum())
        trace.append(ll)
        if ll - prev < tol * n:
            break
        prev = ll
        resp = np.exp(logp - lse[:, None])
        nk = resp.sum(axis=0)
        live = nk > 1e-12
        weights = nk / n
        new_means = (resp.T @ x) / np.where(live, nk, 1.0)[:, None]
        means = np.where(live[:, None], new_means, means)
        sq = ((x[:, None, :] - means[None, :, :]) ** 2).sum(-1)
        new_var = (resp * sq).sum(axis=0) / (2.0 * np.where(live, nk, 1.0))
        variances = np.where(live, np.maximum(new_var, var_floor), variances)
    else:
        trace.append(float(logsumexp(_log_components(x, means, variances, weights), axis=1).sum()))

    return GmmParams(means, variances, weights / weights.sum(), tuple(trace), it)


def contact_point(gmm: GmmParams) -> PixelPoint:
    """Unweighted average of the component means."""
    m = np.asarray(gmm.means, dtype=float).mean(axis=0)
    return PixelPoint(float(m[0]), float(m[1]))


def default_k(n_points: int, k_max: int = 3) -> int:
    return max(1, min(k_max, n_points))


def extract_contact_point(points, k: int | None = None, seed: int = 0) -> PixelPoint:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    k = default_k(len(pts)) if k is None else k
    return contact_point(fit_gmm(pts, k, seed))
