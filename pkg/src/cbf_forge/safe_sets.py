"""Safe sets C = {x : h(x) >= 0}, boundary sampling and boundary partitioning.

Boundary partitioning produces segments whose inward unit normals are pairwise
"consistent": n_i . n_j > -1 + margin for every pair inside a segment. Such a
segment admits a common axis s with n . s > 0, which is what the gradient
design needs to extend the segment into a family of parallel level curves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

log = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-10
PARTITION_MARGIN = 0.05
# Boundary normals closer than this angle to being orthogonal to an input
# channel are replaced by an inner approximation (see gradient_design).
DEFAULT_MIN_TILT = 0.35
DEFAULT_BOX_HALF_WIDTH = 2.0

PROVENANCE_ORIGINAL = "original-boundary"
PROVENANCE_HULL = "convex-hull-extension"
PROVENANCE_INNER = "inner-approximation"


class BoundarySamplingError(RuntimeError):
    pass


class PartitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SafeSetFunction:
    """h with analytic gradient (and Hessian where cheap); batched over (..., n)."""

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    name: str
    state_dim: int
    spec: dict[str, Any] = field(default_factory=dict)
    hessian: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, x):
        return self.value(np.asarray(x, dtype=float))


def _himmelblau_parts(level, scale, offset):
    s = np.asarray(scale, dtype=float)
    o = np.asarray(offset, dtype=float)

    def ab(x):
        x = np.asarray(x, dtype=float)
        return s[0] * (x[..., 0] - o[0]), s[1] * (x[..., 1] - o[1])

    def value(x):
        a, b = ab(x)
        return level - ((a * a + b - 11.0) ** 2 + (a + b * b - 7.0) ** 2)

    def gradient(x):
        a, b = ab(x)
        r1 = a * a + b - 11.0
        r2 = a + b * b - 7.0
        da = 4.0 * a * r1 + 2.0 * r2
        db = 2.0 * r1 + 4.0 * b * r2
        return -np.stack([s[0] * da, s[1] * db], axis=-1)

    def hessian(x):
        a, b = ab(x)
        daa = 12.0 * a * a + 4.0 * b - 42.0
        dbb = 12.0 * b * b + 4.0 * a - 26.0
        dab = 4.0 * a + 4.0 * b
        out = np.empty(a.shape + (2, 2))
        out[..., 0, 0] = -s[0] * s[0] * daa
        out[..., 1, 1] = -s[1] * s[1] * dbb
        out[..., 0, 1] = out[..., 1, 0] = -s[0] * s[1] * dab
        return out

    return value, gradient, hessian


def himmelblau(a, b):
    """Classical Himmelblau function, zero at (3, 2) and three other minima."""
    return (a * a + b - 11.0) ** 2 + (a + b * b - 7.0) ** 2


def himmelblau_safe_set(level: float, scale, offset) -> SafeSetFunction:
    """h(x) = level - Him(s1 (x1 - o1), s2 (x2 - o2))."""
    if level <= 0:
        raise ValueError("level must be positive")
    value, gradient, hessian = _himmelblau_parts(level, scale, offset)
    spec = {
        "kind": "himmelblau",
        "level": float(level),
        "scale": [float(v) for v in scale],
        "offset": [float(v) for v in offset],
    }
    return SafeSetFunction(value, gradient, "himmelblau", 2, spec, hessian)


def ellipsoid_safe_set(center, shape_matrix) -> SafeSetFunction:
    """h(x) = 1 - (x - c)^T P (x - c) for symmetric positive definite P."""
    c = np.asarray(center, dtype=float)
    P = np.asarray(shape_matrix, dtype=float)
    n = c.shape[0]
    if P.shape != (n, n):
        raise ValueError("shape_matrix must be n x n")
    if not np.allclose(P, P.T, rtol=0, atol=1e-12 * max(1.0, np.abs(P).max())):
        raise ValueError("shape_matrix must be symmetric")
    if np.linalg.eigvalsh(P).min() <= 0:
        raise ValueError("shape_matrix must be positive definite")
    P = 0.5 * (P + P.T)

    def value(x):
        d = np.asarray(x, dtype=float) - c
        return 1.0 - np.einsum("...i,ij,...j->...", d, P, d)

    def gradient(x):
        d = np.asarray(x, dtype=float) - c
        return -2.0 * d @ P

    def hessian(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(-2.0 * P, x.shape[:-1] + (n, n)).copy()

    spec = {"kind": "ellipsoid", "center": c.tolist(), "shape_matrix": P.tolist()}
    return SafeSetFunction(value, gradient, "ellipsoid", n, spec, hessian)


def halfspace_safe_set(normal, offset: float) -> SafeSetFunction:
    """h(x) = a^T x + b."""
    a = np.asarray(normal, dtype=float)
    if not np.any(a):
        raise ValueError("normal must be nonzero")
    n = a.shape[0]

    def value(x):
        return np.asarray(x, dtype=float) @ a + offset

    def gradient(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(a, x.shape).copy()

    def hessian(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (n, n))

    spec = {"kind": "halfspace", "normal": a.tolist(), "offset": float(offset)}
    return SafeSetFunction(value, gradient, "halfspace", n, spec, hessian)


def interval_safe_set(x_min: float, x_max: float) -> SafeSetFunction:
    """One-dimensional quadratic h(x) = (x - x_min)(x_max - x)."""
    if not x_min < x_max:
        raise ValueError("x_min must be below x_max")

    def value(x):
        x = np.asarray(x, dtype=float)[..., 0]
        return (x - x_min) * (x_max - x)

    def gradient(x):
        x = np.asarray(x, dtype=float)
        return (x_min + x_max) - 2.0 * x

    def hessian(x):
        x = np.asarray(x, dtype=float)
        return np.full(x.shape[:-1] + (1, 1), -2.0)

    spec = {"kind": "interval", "x_min": float(x_min), "x_max": float(x_max)}
    return SafeSetFunction(value, gradient, "interval", 1, spec, hessian)


def safe_set_from_spec(spec: dict) -> SafeSetFunction:
    kind = spec.get("kind")
    if kind == "himmelblau":
        return himmelblau_safe_set(spec["level"], spec["scale"], spec["offset"])
    if kind == "ellipsoid":
        return ellipsoid_safe_set(spec["center"], spec["shape_matrix"])
    if kind == "halfspace":
        return halfspace_safe_set(spec["normal"], spec["offset"])
    if kind == "interval":
        return interval_safe_set(spec["x_min"], spec["x_max"])
    raise ValueError(f"unknown safe set kind {kind!r}")


# ---------------------------------------------------------------------------
# boundary samples


@dataclass(frozen=True)
class BoundarySample:
    points: np.ndarray
    normals: np.ndarray
    closed: bool = False

    def __post_init__(self):
        for name in ("points", "normals"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.points.shape != self.normals.shape or self.points.ndim != 2:
            raise ValueError("points and normals must both have shape (N, n)")

    def __len__(self):
        return self.points.shape[0]

    def subset(self, idx) -> "BoundarySample":
        return BoundarySample(self.points[idx], self.normals[idx], closed=False)


def unit_normals(set_: SafeSetFunction, points) -> np.ndarray:
    grad = set_.gradient(points)
    norm = np.linalg.norm(grad, axis=-1, keepdims=True)
    if np.any(norm <= 1e-8):
        raise BoundarySamplingError("vanishing gradient at a boundary point")
    return grad / norm


def _default_box(n):
    return np.tile([-DEFAULT_BOX_HALF_WIDTH, DEFAULT_BOX_HALF_WIDTH], (n, 1)).astype(float)


def bisect_along(set_: SafeSetFunction, origin, direction, lo, hi, tol=BOUNDARY_TOL, iters=200):
    """Vectorized bisection for h(origin + tau * direction) = 0, tau in [lo, hi].

    h(lo) and h(hi) must have opposite signs per row. Returns the polished
    points and the final |h| values.
    """
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    h_lo = set_.value(origin + lo[:, None] * direction)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        h_mid = set_.value(origin + mid[:, None] * direction)
        same = np.sign(h_mid) == np.sign(h_lo)
        lo = np.where(same, mid, lo)
        h_lo = np.where(same, h_mid, h_lo)
        hi = np.where(same, hi, mid)
        if np.all(np.abs(h_mid) <= tol * 1e-3) or np.all(hi - lo <= 4e-16 * (1 + np.abs(lo))):
            break
    cand_lo = origin + lo[:, None] * direction
    cand_hi = origin + hi[:, None] * direction
    v_lo = np.abs(set_.value(cand_lo))
    v_hi = np.abs(set_.value(cand_hi))
    pick_lo = v_lo <= v_hi
    pts = np.where(pick_lo[:, None], cand_lo, cand_hi)
    return pts, np.where(pick_lo, v_lo, v_hi)


def _polish(set_, approx, step, tol):
    """Move approximate boundary points onto h = 0 by bisection along the normal."""
    approx = np.atleast_2d(np.asarray(approx, dtype=float))
    direction = set_.gradient(approx)
    norm = np.linalg.norm(direction, axis=-1, keepdims=True)
    if np.any(norm <= 1e-12):
        raise BoundarySamplingError("vanishing gradient near the boundary; cannot polish")
    direction = direction / norm
    radius = np.full(len(approx), step)
    ok = np.zeros(len(approx), dtype=bool)
    for _ in range(8):
        h_lo = set_.value(approx - radius[:, None] * direction)
        h_hi = set_.value(approx + radius[:, None] * direction)
        ok = np.sign(h_lo) != np.sign(h_hi)
        if ok.all():
            break
        radius = np.where(ok, radius, 2.0 * radius)
    if not ok.all():
        bad = approx[~ok][0]
        raise BoundarySamplingError(f"no sign change of h along the normal ray through {bad.tolist()}")
    pts, resid = bisect_along(set_, approx, direction, -radius, radius, tol=tol)
    if np.any(resid > tol):
        worst = int(np.argmax(resid))
        raise BoundarySamplingError(
            f"bisection stalled at |h| = {resid[worst]:.3e} > {tol:.1e} near {pts[worst].tolist()}"
        )
    return pts


def _polygon_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def point_in_polygon(point, poly) -> bool:
    """Even-odd rule test; poly is an (N, 2) vertex list (closing edge implied)."""
    x, y = float(point[0]), float(point[1])
    xs, ys = poly[:, 0], poly[:, 1]
    xj, yj = np.roll(xs, 1), np.roll(ys, 1)
    crosses = (ys > y) != (yj > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = xj + (y - yj) * (xs - xj) / (ys - yj)
    return bool(np.count_nonzero(crosses & (x < xint)) % 2)


def _grid_contours(set_, box, resolution):
    from skimage.measure import find_contours

    xs = np.linspace(box[0, 0], box[0, 1], resolution)
    ys = np.linspace(box[1, 0], box[1, 1], resolution)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    H = set_.value(np.stack([X, Y], axis=-1))
    out = []
    for c in find_contours(H, 0.0):
        pts = np.column_stack(
            [np.interp(c[:, 0], np.arange(resolution), xs), np.interp(c[:, 1], np.arange(resolution), ys)]
        )
        closed = bool(np.allclose(c[0], c[-1]))
        out.append((pts, closed))
    cell = max((box[0, 1] - box[0, 0]), (box[1, 1] - box[1, 0])) / (resolution - 1)
    return out, cell


def _resample(poly, closed, count, phase):
    if closed:
        poly = np.vstack([poly[:-1] if np.allclose(poly[0], poly[-1]) else poly, poly[:1]])
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if closed:
        targets = (np.arange(count) + phase) * total / count
    else:
        targets = (np.arange(count) + phase) * total / count
    return np.column_stack([np.interp(targets, s, poly[:, k]) for k in range(poly.shape[1])])


def sample_boundary(
    set_: SafeSetFunction,
    count: int,
    seed: int,
    *,
    box=None,
    interior_point=None,
    resolution: int = 400,
    tol: float = BOUNDARY_TOL,
) -> BoundarySample:
    """Sample ``count`` points on the boundary of the safe set, polished to |h| <= tol.

    In two dimensions the zero-level curve is traced on a grid over ``box``,
    the component enclosing ``interior_point`` (or the longest one) is
    resampled uniformly in arc length with a seeded phase, ordered
    counter-clockwise, and every point is bisected onto h = 0 along its normal
    line. In one dimension the roots inside the box are returned. Higher
    dimensions are supported for ellipsoids and half-spaces only.
    """
    if count < 2:
        raise ValueError("count must be at least 2")
    n = set_.state_dim
    box = _default_box(n) if box is None else np.asarray(box, dtype=float)
    rng = np.random.default_rng(seed)

    if n == 1:
        xs = np.linspace(box[0, 0], box[0, 1], max(resolution, 16))[:, None]
        hv = set_.value(xs)
        idx = np.nonzero(np.sign(hv[:-1]) != np.sign(hv[1:]))[0]
        if len(idx) == 0:
            raise BoundarySamplingError("no sign change of h inside the box")
        pts, resid = bisect_along(
            set_, xs[idx], np.ones((len(idx), 1)), np.zeros(len(idx)), xs[idx + 1, 0] - xs[idx, 0], tol=tol
        )
        if np.any(resid > tol):
            raise BoundarySamplingError("bisection failed to reach the boundary tolerance")
        return BoundarySample(pts, unit_normals(set_, pts), closed=False)

    if n == 2:
        contours, cell = _grid_contours(set_, box, resolution)
        if not contours:
            raise BoundarySamplingError("the zero-level set does not intersect the box")
        chosen = None
        if interior_point is not None:
            for pts, closed in contours:
                if closed and point_in_polygon(interior_point, pts):
                    if chosen is None or _polygon_area(pts) ** 2 < _polygon_area(chosen[0]) ** 2:
                        chosen = (pts, closed)
            if chosen is None:
                raise BoundarySamplingError("no closed boundary component encloses the interior point")
        else:
            lengths = [np.linalg.norm(np.diff(p, axis=0), axis=1).sum() for p, _ in contours]
            chosen = contours[int(np.argmax(lengths))]
        poly, closed = chosen
        if closed and _polygon_area(poly) < 0:
            poly = poly[::-1]
        approx = _resample(poly, closed, count, rng.uniform())
        pts = _polish(set_, approx, 2.0 * cell, tol)
        return BoundarySample(pts, unit_normals(set_, pts), closed=closed)

    kind = set_.spec.get("kind")
    if kind == "ellipsoid":
        c = np.asarray(set_.spec["center"])
        P = np.asarray(set_.spec["shape_matrix"])
        d = rng.standard_normal((count, n))
        d /= np.sqrt(np.einsum("ki,ij,kj->k", d, P, d))[:, None]
        pts = c + d
        return BoundarySample(pts, unit_normals(set_, pts), closed=True)
    if kind == "halfspace":
        a = np.asarray(set_.spec["normal"])
        b = set_.spec["offset"]
        x = rng.uniform(box[:, 0], box[:, 1], size=(count, n))
        pts = x - ((x @ a + b) / (a @ a))[:, None] * a
        return BoundarySample(pts, unit_normals(set_, pts), closed=False)
    raise NotImplementedError("boundary sampling above two dimensions supports ellipsoids and half-spaces only")


# ---------------------------------------------------------------------------
# convex hull


def convex_hull_2d(points) -> np.ndarray:
    """Counter-clockwise hull vertex indices by Andrew's monotone chain."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("need at least three 2-D points")
    order = np.lexsort((pts[:, 1], pts[:, 0]))

    def cross(o, a, b):
        return (pts[a, 0] - pts[o, 0]) * (pts[b, 1] - pts[o, 1]) - (pts[a, 1] - pts[o, 1]) * (pts[b, 0] - pts[o, 0])

    lower: list[int] = []
    for i in order:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], i) <= 0:
            lower.pop()
        lower.append(int(i))
    upper: list[int] = []
    for i in order[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], i) <= 0:
            upper.pop()
        upper.append(int(i))
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise ValueError("degenerate input: points are collinear")
    return np.array(hull)


def hull_membership(points, tol: float = 1e-8) -> np.ndarray:
    """True for points within ``tol`` (relative to the point cloud's extent) of the hull boundary."""
    pts = np.asarray(points, dtype=float)
    hull = pts[convex_hull_2d(pts)]
    a, b = hull, np.roll(hull, -1, axis=0)
    ab = b - a
    t = np.einsum("kej,ej->ke", pts[:, None, :] - a[None], ab) / np.einsum("ej,ej->e", ab, ab)
    t = np.clip(t, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    dist = np.linalg.norm(pts[:, None, :] - closest, axis=-1).min(axis=1)
    scale = np.ptp(pts, axis=0).max()
    return dist <= tol * max(scale, 1.0)


# ---------------------------------------------------------------------------
# partition


@dataclass(frozen=True)
class BoundaryPartition:
    segments: list[BoundarySample]
    provenance: list[str]
    indices: list[np.ndarray]
    margin: float = PARTITION_MARGIN

    def __len__(self):
        return len(self.segments)


def consistent_normals(normals, margin: float = PARTITION_MARGIN) -> bool:
    """Full pairwise check n_i . n_j > -1 + margin."""
    nrm = np.asarray(normals, dtype=float)
    if len(nrm) < 2:
        return True
    return bool((nrm @ nrm.T).min() > -1.0 + margin)


def channel_components(system, points, normals) -> np.ndarray:
    """Cosines between boundary normals and each (normalized) input channel, shape (N, m)."""
    g = system.g(points)
    norm = np.linalg.norm(g, axis=-2, keepdims=True)
    ghat = np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)
    return np.einsum("kn,knm->km", normals, ghat)


def _runs(mask):
    """Maximal cyclic runs of True in ``mask`` as (start, length) pairs."""
    N = len(mask)
    if mask.all():
        return [(0, N)]
    start = int(np.argmin(mask))  # first False
    out = []
    k = 0
    while k < N:
        i = (start + k) % N
        if mask[i]:
            j = k
            while j < N and mask[(start + j) % N]:
                j += 1
            out.append((i, j - k))
            k = j
        else:
            k += 1
    return out


def _greedy_pieces(normals, margin):
    """Greedy sweep: indices where a new piece must start."""
    starts = [0]
    cur = [0]
    for j in range(1, len(normals)):
        if (normals[cur] @ normals[j]).min() > -1.0 + margin:
            cur.append(j)
        else:
            starts.append(j)
            cur = [j]
    return starts


def _split_run(normals, pieces, margin):
    """Split an ordered run into ``pieces`` contiguous parts of equal normal turning.

    Adjacent parts share their junction point. Falls back to a greedy sweep
    followed by bisection of the widest part when equal turning violates the
    pairwise check.
    """
    L = len(normals)
    if pieces <= 1:
        return [np.arange(L)]
    if normals.shape[1] == 2:
        ang = np.unwrap(np.arctan2(normals[:, 1], normals[:, 0]))
        measure = np.concatenate([[0.0], np.cumsum(np.abs(np.diff(ang)))])
    else:
        measure = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(normals, axis=0), axis=1))])
    if measure[-1] <= 1e-12:
        measure = np.arange(L, dtype=float)
    cuts = [0]
    for k in range(1, pieces):
        j = int(np.searchsorted(measure, measure[-1] * k / pieces))
        j = min(max(j, cuts[-1] + 1), L - 1)
        cuts.append(j)
    cuts.append(L - 1)
    parts = [np.arange(cuts[i], cuts[i + 1] + 1) for i in range(pieces)]
    if all(len(p) >= 2 and consistent_normals(normals[p], margin) for p in parts):
        return parts
    starts = _greedy_pieces(normals, margin) + [L]
    parts = [np.arange(starts[i], starts[i + 1]) for i in range(len(starts) - 1)]
    while len(parts) < pieces:
        widths = [measure[p[-1]] - measure[p[0]] for p in parts]
        w = int(np.argmax(widths))
        p = parts[w]
        if len(p) < 3:
            break
        mid = p[len(p) // 2]
        parts[w : w + 1] = [p[p <= mid], p[p >= mid]]
    return parts


def partition_boundary(
    sample: BoundarySample,
    q_target: int,
    *,
    margin: float = PARTITION_MARGIN,
    system=None,
    min_tilt: float = DEFAULT_MIN_TILT,
) -> BoundaryPartition:
    """Split a sampled boundary into about ``q_target`` segments with consistent normals.

    Forced cuts come first: transitions between hull and pocket parts of a
    closed 2-D curve and, when ``system`` is given, the middle of every stretch
    where a boundary normal is nearly orthogonal to an input channel and the
    channel sign differs on the two sides. The remaining runs receive pieces in
    proportion to their normal turning, at least as many as a greedy sweep
    with the pairwise margin check needs.
    """
    if q_target < 1:
        raise ValueError("q_target must be at least 1")
    N = len(sample)
    if N == 0:
        raise ValueError("empty boundary sample")
    if not 0 < margin < 2:
        raise ValueError("margin must lie in (0, 2)")
    pts, nrm = sample.points, sample.normals
    dim = pts.shape[1]
    closed = sample.closed

    cuts: set[int] = set()
    on_hull = np.ones(N, dtype=bool)
    if closed and dim == 2 and N >= 3:
        on_hull = hull_membership(pts)
        if not on_hull.all():
            cuts.update(int(k) for k in np.nonzero(on_hull != np.roll(on_hull, 1))[0])

    flagged = np.zeros(N, dtype=bool)
    if system is not None:
        comp = channel_components(system, pts, nrm)
        flagged = np.any(np.abs(comp) < np.sin(min_tilt), axis=1)
        if flagged.all():
            raise PartitionError("every boundary normal is nearly orthogonal to an input channel")
        runs = _runs(flagged) if closed else _open_runs(flagged)
        for start, length in runs:
            before = (start - 1) % N
            after = (start + length) % N
            if not closed and (start == 0 or start + length >= N):
                continue
            if np.any(np.sign(comp[before]) != np.sign(comp[after])):
                idx = (start + np.arange(length)) % N
                cuts.add(int(idx[np.argmin(np.abs(comp[idx]).min(axis=1))]))

    # Sequences of indices between cuts; neighbouring runs share the cut point.
    if closed:
        if not cuts:
            cut_list = [0]
        else:
            cut_list = sorted(cuts)
        runs_idx = []
        for i, c in enumerate(cut_list):
            nxt = cut_list[(i + 1) % len(cut_list)]
            length = (nxt - c) % N or N
            runs_idx.append((c + np.arange(length + 1)) % N)
    else:
        order = np.arange(N)
        if dim == 1:
            order = np.argsort(pts[:, 0])
        bounds = [0] + sorted(c for c in cuts if 0 < c < N) + [N - 1]
        runs_idx = [order[bounds[i] : bounds[i + 1] + 1] for i in range(len(bounds) - 1)]

    need = [len(_greedy_pieces(nrm[r], margin)) for r in runs_idx]
    turning = []
    for r in runs_idx:
        if dim == 2:
            ang = np.unwrap(np.arctan2(nrm[r, 1], nrm[r, 0]))
            turning.append(float(np.abs(np.diff(ang)).sum()))
        else:
            turning.append(float(np.linalg.norm(np.diff(nrm[r], axis=0), axis=1).sum()))
    alloc = list(need)
    while sum(alloc) < q_target:
        # A run can hold at most one piece per pair of points.
        score = [t / a if len(r) > 2 * a else -1.0 for t, a, r in zip(turning, alloc, runs_idx)]
        best = int(np.argmax(score))
        if score[best] < 0:
            break
        alloc[best] += 1
    if sum(alloc) != q_target:
        log.warning("partition produced %d segments for q_target=%d", sum(alloc), q_target)

    segments, provenance, indices = [], [], []
    for r, pieces in zip(runs_idx, alloc):
        for part in _split_run(nrm[r], pieces, margin):
            idx = r[part]
            if not consistent_normals(nrm[idx], margin):
                raise PartitionError("a boundary point cannot be placed in any consistent segment")
            if flagged[idx].any():
                prov = PROVENANCE_INNER
            elif on_hull[idx].all():
                prov = PROVENANCE_HULL
            else:
                prov = PROVENANCE_ORIGINAL
            segments.append(sample.subset(idx))
            provenance.append(prov)
            indices.append(np.asarray(idx))
    covered = np.zeros(N, dtype=bool)
    for idx in indices:
        covered[idx] = True
    if not covered.all():
        raise PartitionError("partition does not cover every sampled boundary point")
    return BoundaryPartition(segments, provenance, indices, margin)


def _open_runs(mask):
    out = []
    k = 0
    N = len(mask)
    while k < N:
        if mask[k]:
            j = k
            while j < N and mask[j]:
                j += 1
            out.append((k, j - k))
            k = j
        else:
            k += 1
    return out
