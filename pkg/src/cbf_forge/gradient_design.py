"""Gradient-field design for multiple CBFs.

Each boundary segment q gets a target gradient field whose level sets are
translates of the segment along a common axis s_q. The target is split into
an input-channel part g alpha and a complementary part b beta; alpha is
clamped away from zero so the CBF's Lie derivative along every input channel
never vanishes, and (beta, theta) are then adjusted until every design point
inside the running intersection of CBF sets admits an input satisfying all
constraints j <= q.

Geometry near channel-orthogonal boundary points: where a boundary normal is
within ``min_tilt`` of being orthogonal to an input channel, the segment is
replaced by a straight line whose normal is tilted by at least ``min_tilt``
(an inner approximation of the set). At cuts between segments of opposite
channel sign the two lines meet in a corner, pulled inward by
``corner_offset`` along the boundary normal at the cut.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .dynamics import ControlAffineSystem, system_from_config
from .safe_sets import (
    DEFAULT_MIN_TILT,
    BoundarySample,
    SafeSetFunction,
    channel_components,
    safe_set_from_spec,
)

log = logging.getLogger(__name__)


class InfeasibleDesign(RuntimeError):
    """No (beta, theta <= theta_max, u) satisfies the constraints at some design point."""

    def __init__(self, message, q=None, point=None):
        super().__init__(message)
        self.q = q
        self.point = None if point is None else np.asarray(point).tolist()


class NonConvergence(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# linear algebra helpers


def orthonormal_complement(g_matrix, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the complement of col(g), shape (n, n - rank g).

    Each column is sign-normalized so its largest-magnitude entry is positive.
    """
    g = np.atleast_2d(np.asarray(g_matrix, dtype=float))
    n = g.shape[0]
    u, sv, _ = np.linalg.svd(g, full_matrices=True)
    rank = int(np.sum(sv > tol * max(1.0, sv.max(initial=0.0))))
    b = u[:, rank:].copy()
    for k in range(b.shape[1]):
        j = int(np.argmax(np.abs(b[:, k])))
        if b[j, k] < 0:
            b[:, k] = -b[:, k]
    return b.reshape(n, n - rank)


def batched_complement(g):
    """orthonormal_complement over a batch of input matrices (N, n, m)."""
    g = np.asarray(g, dtype=float)
    if g.ndim == 2:
        return orthonormal_complement(g)
    first = orthonormal_complement(g[0])
    if np.all(g == g[0]):
        return np.broadcast_to(first, g.shape[:1] + first.shape).copy()
    return np.stack([orthonormal_complement(gk) for gk in g])


def decompose_target(target, g_matrix, b_matrix):
    """Split target = g alpha + b beta with alpha = (g^T g)^-1 g^T target, beta = b^T target.

    Batched over a leading axis when target is (N, n) and the matrices are
    (N, n, m) and (N, n, n - p). Raises LinAlgError for rank-deficient g.
    """
    t = np.asarray(target, dtype=float)
    g = np.asarray(g_matrix, dtype=float)
    b = np.asarray(b_matrix, dtype=float)
    gtg = np.swapaxes(g, -1, -2) @ g
    if np.any(np.linalg.matrix_rank(gtg) < g.shape[-1]):
        raise np.linalg.LinAlgError("g^T g is singular; use the joint solver")
    alpha = np.linalg.solve(gtg, (np.swapaxes(g, -1, -2) @ t[..., None]))[..., 0]
    beta = (np.swapaxes(b, -1, -2) @ t[..., None])[..., 0]
    return alpha, beta


def solve_alpha_step(alpha_target, epsilon, majority_sign=None) -> np.ndarray:
    """Closest alpha with |alpha_i| >= epsilon_i, channel by channel.

    Zero targets take the segment majority sign (ties resolve to +1).
    ``epsilon`` may be a scalar or broadcastable per channel.
    """
    a = np.asarray(alpha_target, dtype=float)
    eps = np.asarray(epsilon, dtype=float)
    if np.any(eps <= 0):
        raise ValueError("epsilon must be positive")
    tie = 1.0 if majority_sign is None else np.where(np.asarray(majority_sign) < 0, -1.0, 1.0)
    sign = np.where(a > 0, 1.0, np.where(a < 0, -1.0, tie))
    return np.where(np.abs(a) >= eps, a, sign * eps)


# ---------------------------------------------------------------------------
# target field geometry


@dataclass(frozen=True)
class BoundaryDesign:
    """Shape of each CBF's zero-level curve relative to its boundary segment."""

    min_tilt: float = DEFAULT_MIN_TILT
    boundary_offset: float = 0.0
    corner_offset: float = 0.0
    smoothing: float = 0.02

    def to_dict(self):
        return {
            "min_tilt": self.min_tilt,
            "boundary_offset": self.boundary_offset,
            "corner_offset": self.corner_offset,
            "smoothing": self.smoothing,
        }


@dataclass(frozen=True)
class _Line:
    normal: np.ndarray
    offset: float
    lo: float
    hi: float
    smooth: bool


def _majority_signs(comp):
    total = comp.sum(axis=0)
    return np.where(total < 0, -1.0, 1.0)


def _allowed_normal(mean_normal, ghat, signs, sin_tilt, axis):
    """Unit 2-D normal closest to ``mean_normal`` whose channel cosines clear the tilt bound."""
    psi = np.linspace(-np.pi, np.pi, 14401)
    cand = np.column_stack([np.cos(psi), np.sin(psi)])
    comp = cand @ ghat
    ok = np.all(signs * comp >= sin_tilt + 1e-9, axis=1) & (cand @ axis > 0.05)
    if not ok.any():
        raise InfeasibleDesign("no line normal clears the tilt bound for this segment")
    cand = cand[ok]
    return cand[int(np.argmax(cand @ mean_normal))]


class TargetGradientField:
    """Target gradient for one segment: gradient of the offset along the cone axis.

    For a point x with axis coordinate v = s.x and transverse coordinate t,
    the designed zero-level curve is the graph v = Gamma(t) and
    sigma(x) = v - Gamma(t). ``lookup(x)`` returns grad sigma, which equals
    n(x_c*) / (n(x_c*) . s) for the unit normal at the point x_c* where the
    line through x along s meets the curve. It is constant along s and its
    level sets are translates of the curve.
    """

    def __init__(
        self,
        segment: BoundarySample,
        set_: SafeSetFunction,
        system: ControlAffineSystem | None = None,
        design: BoundaryDesign = BoundaryDesign(),
    ):
        self.segment = segment
        self.set = set_
        self.system = system
        self.design = design
        pts = np.asarray(segment.points, dtype=float)
        nrm = np.asarray(segment.normals, dtype=float)
        self.dim = pts.shape[1]
        mean = nrm.mean(axis=0)
        if np.linalg.norm(mean) < 1e-12:
            raise ValueError("segment normals cancel; the segment fails the consistency check")
        s = mean / np.linalg.norm(mean)
        if np.any(nrm @ s <= 0):
            raise ValueError("a segment normal has non-positive dot with the cone axis")
        self.cone_axis = s
        self.lines: list[_Line] = []
        self.channel_signs = np.ones(system.input_dim if system is not None else 1)
        self.channel_margin = np.nan
        if self.dim == 1:
            self._anchor = float(pts[0] @ s)
            return
        if self.dim != 2:
            raise NotImplementedError("target fields are implemented for one- and two-dimensional states")
        self.perp = np.array([-s[1], s[0]])
        t = pts @ self.perp
        order = np.argsort(t)
        pts, nrm, t = pts[order], nrm[order], t[order]
        if np.any(np.diff(t) <= 0):
            raise ValueError("segment is not a graph over its transverse coordinate")
        self._pts, self._nrm = pts, nrm
        self._t = t
        self._v = pts @ s
        self.t_lo, self.t_hi = float(t[0]), float(t[-1])
        self._spacing = float(np.max(np.hypot(np.diff(t), np.diff(self._v)))) if len(t) > 1 else 1e-3
        flagged = np.zeros(len(t), dtype=bool)
        if system is not None:
            comp = channel_components(system, pts, nrm)
            self.channel_signs = _majority_signs(comp)
            flagged = ~np.all(self.channel_signs * comp >= np.sin(design.min_tilt), axis=1)
        self.flagged = flagged
        self._base_lo = None if flagged[0] else self._tangent(0)
        self._base_hi = None if flagged[-1] else self._tangent(-1)
        if flagged.any():
            self._build_lines(flagged)
        if system is not None:
            self.channel_margin = self._channel_margin()

    # -- construction --------------------------------------------------

    def _tangent(self, k):
        n = self._nrm[k]
        slope = -(n @ self.perp) / (n @ self.cone_axis)
        return (float(self._t[k]), float(self._v[k] + self.design.boundary_offset), float(slope))

    def _line_graph(self, line, t):
        nt = line.normal @ self.perp
        nv = line.normal @ self.cone_axis
        return (line.offset - nt * t) / nv, np.full_like(t, -nt / nv)

    def _build_lines(self, flagged):
        s, design = self.cone_axis, self.design
        K = len(self._t)
        shifted = self._pts + design.boundary_offset * s
        corners = []
        if flagged[0]:
            corners.append(self._corner(0))
        if flagged[-1]:
            corners.append(self._corner(-1))
        v_base = self._v + design.boundary_offset
        if flagged.all():
            ghat = self._ghat(self._pts.mean(axis=0))
            normal = _allowed_normal(self._nrm.mean(axis=0), ghat, self.channel_signs, np.sin(design.min_tilt), s)
            cand = np.vstack([shifted] + [c[None] for c in corners])
            self.lines.append(_Line(normal, float((cand @ normal).max()), -np.inf, np.inf, False))
            return
        k = 0
        while k < K:
            if not flagged[k]:
                k += 1
                continue
            start = k
            while k < K and flagged[k]:
                k += 1
            stop = k  # run is [start, stop)
            j_lo = start - 1 if start > 0 else None
            j_hi = stop if stop < K else None
            if j_lo is None:
                junction = j_hi
            elif j_hi is None:
                junction = j_lo
            else:
                margins = [np.min(self.channel_signs * channel_components(
                    self.system, self._pts[j][None], self._nrm[j][None])[0]) for j in (j_lo, j_hi)]
                junction = j_lo if margins[0] <= margins[1] else j_hi
            normal = self._nrm[junction]
            members = list(range(start, stop)) + [j for j in (j_lo, j_hi) if j is not None]
            cand = [shifted[members]]
            if start == 0 and flagged[0]:
                cand.append(corners[0][None])
            if stop == K and flagged[-1]:
                cand.append(corners[-1][None])
            cand = np.vstack(cand)
            proj = cand @ normal
            offset = float(proj.max())
            tangent_at = None
            if np.isclose(offset, shifted[junction] @ normal, rtol=0, atol=1e-12):
                tangent_at = junction
            line = _Line(normal, offset, -np.inf, np.inf, False)
            lo, hi = -np.inf, np.inf
            sides = []
            if j_lo is not None:
                sides.append(("lo", j_lo))
            if j_hi is not None:
                sides.append(("hi", j_hi))
            smooth = tangent_at is None
            ends = {}
            for side, j in sides:
                if tangent_at == j:
                    ends[side] = float(self._t[j])
                    continue
                idx = np.arange(j, -1, -1) if side == "lo" else np.arange(j, K)
                gl, _ = self._line_graph(line, self._t[idx])
                gap = v_base[idx] - gl
                thresh = 30.0 * design.smoothing if smooth else 0.0
                above = np.nonzero(gap > thresh)[0]
                if len(above) == 0:
                    ends[side] = -np.inf if side == "lo" else np.inf
                    continue
                a = above[0]
                if smooth or a == 0:
                    ends[side] = float(self._t[idx[a]])
                else:
                    g0, g1 = gap[a - 1], gap[a]
                    t0, t1 = self._t[idx[a - 1]], self._t[idx[a]]
                    ends[side] = float(t0 + (t1 - t0) * (-g0) / (g1 - g0))
            lo = ends.get("lo", -np.inf)
            hi = ends.get("hi", np.inf)
            self.lines.append(_Line(normal, offset, lo, hi, smooth))

    def _corner(self, k):
        """Corner point shared by the lines of two neighbouring flagged segment ends.

        It sits ``corner_offset`` inside the junction and is slid the same
        distance along the boundary tangent, toward the side where the drift
        points into the set, so that the vertex of the CBF intersection is not
        a point where every admissible input is exactly balanced.
        """
        p, n = self._pts[k], self._nrm[k]
        d = self.design.corner_offset
        base = p + d * n
        tangent = np.array([-n[1], n[0]])
        h = 1e-6
        slope = (self.system.f(base + h * tangent) @ n - self.system.f(base - h * tangent) @ n) / (2 * h)
        if abs(slope) < 1e-9:
            return base
        return base + np.sign(slope) * d * tangent

    def _ghat(self, x):
        g = self.system.g(np.asarray(x, dtype=float))
        norm = np.linalg.norm(g, axis=0, keepdims=True)
        return np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)

    def _channel_margin(self):
        span = 4.0 * max(self.t_hi - self.t_lo, 1.0)
        t = np.linspace(self.t_lo - span, self.t_hi + span, 2001)
        gam, slope, ok = self._graph(t)
        t, gam, slope = t[ok], gam[ok], slope[ok]
        grad = self.cone_axis[None] - slope[:, None] * self.perp[None]
        unit = grad / np.linalg.norm(grad, axis=1, keepdims=True)
        x = t[:, None] * self.perp + gam[:, None] * self.cone_axis
        comp = channel_components(self.system, x, unit)
        return float(np.min(self.channel_signs * comp))

    # -- evaluation ----------------------------------------------------

    def _polish(self, t):
        """Exact arc height v = G(t) (before offset) and unit normal, by bisection on h."""
        s, perp = self.cone_axis, self.perp
        guess = np.interp(t, self._t, self._v)
        eta = np.full(t.shape, max(2.0 * self._spacing, 1e-3))
        ok = np.zeros(t.shape, dtype=bool)
        lo_v = hi_v = guess
        for _ in range(6):
            lo_v = guess - eta
            hi_v = guess + eta
            h_lo = self.set.value(t[:, None] * perp + lo_v[:, None] * s)
            h_hi = self.set.value(t[:, None] * perp + hi_v[:, None] * s)
            ok = (h_lo < 0) & (h_hi > 0)
            if ok.all():
                break
            eta = np.where(ok, eta, 2.0 * eta)
        lo_v, hi_v = lo_v.copy(), hi_v.copy()
        for _ in range(64):
            mid = 0.5 * (lo_v + hi_v)
            h_mid = self.set.value(t[:, None] * perp + mid[:, None] * s)
            inside = h_mid > 0
            hi_v = np.where(inside, mid, hi_v)
            lo_v = np.where(inside, lo_v, mid)
        v = 0.5 * (lo_v + hi_v)
        x = t[:, None] * perp + v[:, None] * s
        grad = self.set.gradient(x)
        unit = grad / np.linalg.norm(grad, axis=-1, keepdims=True)
        v = np.where(ok, v, np.nan)
        return v, unit, ok

    def _graph(self, t):
        t = np.asarray(t, dtype=float)
        gam = np.full(t.shape, -np.inf)
        slope = np.zeros(t.shape)
        ok = np.ones(t.shape, dtype=bool)
        inside = (t >= self.t_lo) & (t <= self.t_hi)
        if inside.any():
            v, unit, good = self._polish(t[inside])
            sl = -(unit @ self.perp) / (unit @ self.cone_axis)
            gam[inside] = v + self.design.boundary_offset
            slope[inside] = sl
            ok[inside] = good
        for base, mask in ((self._base_lo, t < self.t_lo), (self._base_hi, t > self.t_hi)):
            if base is not None and mask.any():
                t0, v0, sl = base
                gam[mask] = v0 + sl * (t[mask] - t0)
                slope[mask] = sl
        w = self.design.smoothing
        for line in self.lines:
            mask = (t >= line.lo) & (t <= line.hi)
            if not mask.any():
                continue
            gl, sl = self._line_graph(line, t[mask])
            g0, s0 = gam[mask], slope[mask]
            if line.smooth and w > 0:
                z = (g0 - gl) / w
                soft = np.logaddexp(0.0, z)
                weight = np.exp(z - soft)
                gam[mask] = gl + w * soft
                slope[mask] = sl + weight * np.where(np.isfinite(g0), s0 - sl, 0.0)
            else:
                take = gl >= g0
                gam[mask] = np.where(take, gl, g0)
                slope[mask] = np.where(take, sl, s0)
        ok &= np.isfinite(gam)
        return gam, slope, ok

    def evaluate(self, x):
        """(sigma, grad sigma, valid) at states x of shape (N, n)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        s = self.cone_axis
        if self.dim == 1:
            sigma = x @ s - self._anchor - self.design.boundary_offset
            grad = np.broadcast_to(s, x.shape).copy()
            return sigma, grad, np.ones(len(x), dtype=bool)
        t = x @ self.perp
        gam, slope, ok = self._graph(t)
        sigma = x @ s - gam
        grad = s[None] - slope[:, None] * self.perp[None]
        return sigma, grad, ok

    def lookup(self, x):
        return self.evaluate(x)[1]

    def sigma(self, x):
        return self.evaluate(x)[0]

    def boundary_points(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Points on the designed zero-level curve, uniform in the transverse coordinate."""
        if self.dim == 1:
            return np.full((count, 1), (self._anchor + self.design.boundary_offset) * self.cone_axis[0])
        t = rng.uniform(self.t_lo, self.t_hi, size=count)
        gam, _, ok = self._graph(t)
        t, gam = t[ok], gam[ok]
        return t[:, None] * self.perp + gam[:, None] * self.cone_axis

    def to_dict(self):
        return {
            "segment_points": np.asarray(self.segment.points).tolist(),
            "segment_normals": np.asarray(self.segment.normals).tolist(),
            "safe_set": self.set.spec,
            "system": None if self.system is None else self.system.config,
            "design": self.design.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        segment = BoundarySample(np.array(data["segment_points"]), np.array(data["segment_normals"]))
        system = None if data.get("system") is None else system_from_config(data["system"])
        return cls(segment, safe_set_from_spec(data["safe_set"]), system, BoundaryDesign(**data["design"]))


def build_target_field(segment, set_, system=None, design: BoundaryDesign = BoundaryDesign()) -> TargetGradientField:
    return TargetGradientField(segment, set_, system, design)


# ---------------------------------------------------------------------------
# sequential design


@dataclass(frozen=True)
class GradientDesignConfig:
    epsilon: float | None = None
    epsilon_fraction: float = 0.05
    theta_init: float = 1.0
    theta_max: float = 10.0
    theta_growth: float = 1.5
    solver_tol: float = 1e-10
    max_iterations: int = 100

    def __post_init__(self):
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.theta_init <= self.theta_max:
            raise ValueError("need 0 < theta_init <= theta_max")

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "epsilon_fraction": self.epsilon_fraction,
            "theta_init": self.theta_init,
            "theta_max": self.theta_max,
            "theta_growth": self.theta_growth,
            "solver_tol": self.solver_tol,
            "max_iterations": self.max_iterations,
        }


@dataclass
class PriorConstraint:
    """A frozen earlier CBF j evaluated on a point set.

    Its constraint at each point reads upsilon . u >= -lf - theta * value.
    """

    upsilon: np.ndarray
    lf: np.ndarray
    value: np.ndarray
    theta: float

    def rhs(self):
        return -self.lf - self.theta * self.value


@dataclass
class DesignTable:
    """Per-point design results on one point set."""

    points: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gradient: np.ndarray
    upsilon: np.ndarray
    lf: np.ndarray
    sigma: np.ndarray
    value: np.ndarray
    certified: np.ndarray
    witnesses: np.ndarray
    valid: np.ndarray

    def to_dict(self):
        return {k: np.asarray(getattr(self, k)).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=(bool if k in ("certified", "valid") else float)) for k, v in d.items()})

    def as_prior(self, theta, value=None) -> PriorConstraint:
        return PriorConstraint(self.upsilon, self.lf, self.value if value is None else value, theta)


@dataclass
class DesignedGradient:
    """Designed alpha/beta/theta for CBF q, with witnesses on collocation and audit points."""

    q: int
    theta: float
    epsilon: float
    channel_signs: np.ndarray
    cone_axis: np.ndarray
    collocation: DesignTable
    audit: DesignTable | None
    boundary_points: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def points(self):
        return self.collocation.points

    @property
    def gradient(self):
        return self.collocation.gradient[self.collocation.valid]

    @property
    def physics_points(self):
        return self.collocation.points[self.collocation.valid]

    def to_dict(self, include_audit=False):
        return {
            "q": self.q,
            "theta": self.theta,
            "epsilon": self.epsilon,
            "channel_signs": np.asarray(self.channel_signs).tolist(),
            "cone_axis": np.asarray(self.cone_axis).tolist(),
            "collocation": self.collocation.to_dict(),
            "audit": self.audit.to_dict() if (include_audit and self.audit is not None) else None,
            "boundary_points": np.asarray(self.boundary_points).tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            q=int(d["q"]),
            theta=float(d["theta"]),
            epsilon=float(d["epsilon"]),
            channel_signs=np.asarray(d["channel_signs"], dtype=float),
            cone_axis=np.asarray(d["cone_axis"], dtype=float),
            collocation=DesignTable.from_dict(d["collocation"]),
            audit=None if d.get("audit") is None else DesignTable.from_dict(d["audit"]),
            boundary_points=np.asarray(d["boundary_points"], dtype=float),
            metadata=d.get("metadata", {}),
        )


def _interval(a_rows, b_rows):
    """Intersect half-lines a u >= b (m = 1) per point; returns lo, hi, consistent."""
    lo = np.full(a_rows.shape[0], -np.inf)
    hi = np.full(a_rows.shape[0], np.inf)
    ok = np.ones(a_rows.shape[0], dtype=bool)
    for k in range(a_rows.shape[1]):
        a, b = a_rows[:, k], b_rows[:, k]
        pos, neg, zero = a > 0, a < 0, a == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            r = b / a
        lo = np.where(pos, np.maximum(lo, r), lo)
        hi = np.where(neg, np.minimum(hi, r), hi)
        ok &= ~(zero & (b > 0))
    return lo, hi, ok & (lo <= hi)


def _witness(lo, hi):
    """Deterministic input inside [lo, hi]: the midpoint, or a finite end plus one."""
    w = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi), 0.0)
    w = np.where(np.isfinite(lo) & ~np.isfinite(hi), lo + 1.0, w)
    w = np.where(~np.isfinite(lo) & np.isfinite(hi), hi - 1.0, w)
    return w


def _lp_witness(A, b):
    """Max-slack input for A u >= b (m > 1) via a small LP; returns (u, slack)."""
    from scipy.optimize import linprog

    m = A.shape[1]
    scale = np.maximum(np.linalg.norm(A, axis=1), 1e-12)
    An, bn = A / scale[:, None], b / scale
    c = np.zeros(m + 1)
    c[-1] = -1.0
    res = linprog(
        c,
        A_ub=np.hstack([-An, np.ones((len(An), 1))]),
        b_ub=-bn,
        bounds=[(-1e6, 1e6)] * m + [(None, 1.0)],
        method="highs",
    )
    if res.status != 0:
        return np.full(m, np.nan), -np.inf
    return res.x[:m], float(res.x[-1])


def _constraint_q(alpha, beta, g, b, f, sigma, s, theta):
    grad = np.einsum("knm,km->kn", g, alpha) + np.einsum("knr,kr->kn", b, beta)
    ups = np.einsum("knm,kn->km", g, grad)
    lf = np.einsum("kn,kn->k", grad, f)
    value = sigma * (grad @ s)
    return grad, ups, lf, value


def solve_beta_theta_step(
    q: int,
    beta_targets,
    prior_cbfs: list[PriorConstraint],
    config: GradientDesignConfig,
    *,
    points,
    alpha,
    system: ControlAffineSystem,
    basis_b,
    sigma,
    cone_axis,
    theta=None,
    valid=None,
):
    """Adjust (beta, theta) for CBF q so every certified point admits a witness input.

    Certified points are those inside every CBF set j <= q. Starting from
    beta = target, theta climbs a geometric ladder up to ``theta_max``; at
    points still infeasible beta is projected minimally (m = 1). Returns
    (beta, theta, witnesses, certified, n_projected). Raises InfeasibleDesign
    when some certified point has no witness.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    N = len(x)
    g = system.g(x)
    f = system.f(x)
    m = g.shape[-1]
    b = np.asarray(basis_b, dtype=float)
    alpha = np.asarray(alpha, dtype=float).reshape(N, m)
    beta_t = np.asarray(beta_targets, dtype=float).reshape(N, b.shape[-1])
    sigma = np.asarray(sigma, dtype=float)
    s = np.asarray(cone_axis, dtype=float)
    valid = np.ones(N, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    prior_inside = np.ones(N, dtype=bool)
    for p in prior_cbfs:
        prior_inside &= p.value >= 0

    a_prior = np.stack([p.upsilon for p in prior_cbfs], axis=1) if prior_cbfs else np.zeros((N, 0, m))
    b_prior = np.stack([p.rhs() for p in prior_cbfs], axis=1) if prior_cbfs else np.zeros((N, 0))

    def assess(beta, th):
        _, ups, lf, val = _constraint_q(alpha, beta, g, b, f, sigma, s, th)
        cert = valid & prior_inside & (val >= 0)
        A = np.concatenate([a_prior, ups[:, None, :]], axis=1)
        B = np.concatenate([b_prior, (-lf - th * val)[:, None]], axis=1)
        if m == 1:
            lo, hi, ok = _interval(A[..., 0], B)
            wit = _witness(lo, hi)[:, None]
        else:
            wit = np.full((N, m), np.nan)
            ok = np.zeros(N, dtype=bool)
            for k in np.nonzero(cert)[0]:
                u, slack = _lp_witness(A[k], B[k])
                ok[k] = slack >= 0
                wit[k] = u
        return cert, ok, wit, A, B, val

    theta0 = config.theta_init if theta is None else float(theta)
    ladder = [theta0]
    while ladder[-1] < config.theta_max:
        ladder.append(min(ladder[-1] * config.theta_growth, config.theta_max))
    beta = beta_t.copy()
    for th in ladder:
        cert, ok, wit, A, B, val = assess(beta, th)
        if np.all(ok[cert]):
            break
    n_projected = 0
    bad = cert & ~ok
    if bad.any() and m == 1 and b.shape[-1] > 0:
        # b_q(beta) = b_q0 - w . dbeta with w = b^T f + theta sigma b^T s.
        lo_p, hi_p, ok_p = _interval(a_prior[..., 0], b_prior) if prior_cbfs else (
            np.full(N, -np.inf), np.full(N, np.inf), np.ones(N, dtype=bool))
        ups_q = A[:, -1, 0]
        bound = np.where(ups_q > 0, hi_p, lo_p)
        need = B[:, -1] - ups_q * bound
        w = np.einsum("knr,kn->kr", b, f) + th * sigma[:, None] * np.einsum("knr,n->kr", b, s)
        ww = np.einsum("kr,kr->k", w, w)
        fix = bad & ok_p & np.isfinite(bound) & (ww > 1e-18)
        step = np.where(fix, (need + 1e-9 * (1.0 + np.abs(need))) / np.where(ww > 0, ww, 1.0), 0.0)
        beta = beta + step[:, None] * w
        n_projected = int(fix.sum())
        cert, ok, wit, A, B, val = assess(beta, th)
    bad = cert & ~ok
    if bad.any():
        k = int(np.nonzero(bad)[0][0])
        raise InfeasibleDesign(
            f"CBF {q}: no input satisfies all constraints at {x[k].tolist()} with theta <= {config.theta_max}",
            q=q,
            point=x[k],
        )
    wit = np.where(cert[:, None], wit, np.nan)
    return beta, th, wit, cert, n_projected


def _design_table(field_, points, config, epsilon, prior, system, theta=None, signs=None, q=0):
    x = np.atleast_2d(np.asarray(points, dtype=float))
    sigma, target, valid = field_.evaluate(x)
    g = system.g(x)
    bmat = batched_complement(g)
    gtg = np.swapaxes(g, -1, -2) @ g
    full_rank = np.all(np.linalg.matrix_rank(gtg) == g.shape[-1])
    if not full_rank:
        raise np.linalg.LinAlgError("g^T g is singular")
    alpha_t, beta_t = decompose_target(np.where(valid[:, None], target, 0.0), g, bmat)
    # The Lie derivative bound |upsilon_i| >= epsilon maps to |alpha_i| >= epsilon / (g^T g)_ii
    # when g^T g is diagonal; otherwise the joint solver is used.
    diag = np.diagonal(gtg, axis1=-2, axis2=-1)
    if not np.allclose(gtg, np.einsum("ki,ij->kij", diag, np.eye(g.shape[-1]))):
        raise np.linalg.LinAlgError("g^T g is not diagonal")
    signs = field_.channel_signs if signs is None else signs
    alpha = solve_alpha_step(alpha_t, epsilon / diag, signs)
    beta, th, wit, cert, n_proj = solve_beta_theta_step(
        q, beta_t, prior, config, points=x, alpha=alpha, system=system, basis_b=bmat,
        sigma=np.where(valid, sigma, 0.0), cone_axis=field_.cone_axis, theta=theta, valid=valid,
    )
    grad = np.einsum("knm,km->kn", g, alpha) + np.einsum("knr,kr->kn", bmat, beta)
    ups = np.einsum("knm,kn->km", g, grad)
    lf = np.einsum("kn,kn->k", grad, system.f(x))
    value = np.where(valid, sigma, 0.0) * (grad @ field_.cone_axis)
    table = DesignTable(x, alpha, beta, grad, ups, lf, sigma, value, cert, wit, valid)
    stats = {
        "clamped": int(np.sum(np.any(alpha != alpha_t, axis=1) & valid)),
        "projected": n_proj,
        "dropped": int(np.sum(~valid)),
        "certified": int(cert.sum()),
    }
    return table, th, stats


def design_gradient(
    q: int,
    field_: TargetGradientField,
    system: ControlAffineSystem,
    collocation,
    config: GradientDesignConfig,
    prior: list[PriorConstraint],
    *,
    audit=None,
    prior_audit: list[PriorConstraint] | None = None,
    boundary_points=None,
) -> DesignedGradient:
    """Two-step design (alpha clamp, then beta/theta) for CBF q.

    theta is chosen on the collocation set; the audit set is then certified
    with that theta (raising the ladder further if needed, after which the
    collocation set is re-certified with the final theta).
    """
    x = np.atleast_2d(np.asarray(collocation, dtype=float))
    sigma, target, valid = field_.evaluate(x)
    ups_t = np.einsum("knm,kn->km", system.g(x), target)[valid]
    eps = config.epsilon
    if eps is None:
        eps = float(config.epsilon_fraction * np.median(np.abs(ups_t)))
    try:
        table, theta, stats = _design_table(field_, x, config, eps, prior, system, q=q)
        joint = False
    except np.linalg.LinAlgError:
        return solve_joint_gradient_problem(q, field_, prior, config, system=system, collocation=x, epsilon=eps,
                                            audit=audit, prior_audit=prior_audit, boundary_points=boundary_points)
    audit_table = None
    audit_stats = {}
    if audit is not None:
        audit_table, theta_a, audit_stats = _design_table(field_, audit, config, eps, prior_audit or [], system, theta, q=q)
        if theta_a != theta:
            theta = theta_a
            table, _, stats = _design_table(field_, x, config, eps, prior, system, theta, q=q)
    if boundary_points is None:
        boundary_points = np.zeros((0, x.shape[1]))
    meta = {"order": q, "joint_solver": joint, "collocation": stats, "audit": audit_stats,
            "channel_margin": float(field_.channel_margin) if np.isfinite(field_.channel_margin) else None}
    return DesignedGradient(q, float(theta), eps, field_.channel_signs.copy(), field_.cone_axis.copy(), table,
                            audit_table, np.asarray(boundary_points), meta)


def solve_joint_gradient_problem(
    q, target_field, prior_cbfs, config, *, system, collocation, epsilon=None, audit=None, prior_audit=None,
    boundary_points=None,
) -> DesignedGradient:
    """Alternating minimization over (alpha, beta, theta, u), usable for any g.

    Step (i) clamps upsilon = g^T g alpha channel-wise away from zero
    (solved as a least-squares problem in the grad h tilde coordinates);
    step (ii) is the beta/theta step. With alpha fixed after (i) the second
    step does not feed back into the first, so iteration stops once the
    objective change falls below ``solver_tol``.
    """
    x = np.atleast_2d(np.asarray(collocation, dtype=float))

    def one_table(points, prior, theta=None):
        sigma, target, valid = target_field.evaluate(points)
        g = system.g(points)
        m = g.shape[-1]
        bmat = batched_complement(g)
        ups_t = np.einsum("knm,kn->km", g, np.where(valid[:, None], target, 0.0))
        eps = epsilon if epsilon is not None else float(config.epsilon_fraction * np.median(np.abs(ups_t[valid])))
        signs = target_field.channel_signs
        prev_obj = np.inf
        theta_cur = theta
        beta = None
        for it in range(config.max_iterations):
            ups = np.where(np.abs(ups_t) >= eps, ups_t,
                           np.where(ups_t > 0, 1.0, np.where(ups_t < 0, -1.0, signs)) * eps)
            # minimal-norm gradient change realizing the clamped upsilon: grad = target + g (g^T g)^+ (ups - ups_t)
            gtg = np.swapaxes(g, -1, -2) @ g
            corr = np.einsum("knm,km->kn", g, np.einsum("kmj,kj->km", np.linalg.pinv(gtg), ups - ups_t))
            grad_a = target + corr
            # In the (range g) + (complement) coordinates, alpha is any solution of g alpha = P_g grad_a.
            alpha = np.einsum("kmn,kn->km", np.linalg.pinv(g), grad_a)
            beta_t = np.einsum("knr,kn->kr", bmat, target)
            beta, theta_cur, wit, cert, n_proj = solve_beta_theta_step(
                q, beta_t, prior, config, points=points, alpha=alpha, system=system, basis_b=bmat,
                sigma=np.where(valid, sigma, 0.0), cone_axis=target_field.cone_axis, theta=theta_cur, valid=valid)
            grad = np.einsum("knm,km->kn", g, alpha) + np.einsum("knr,kr->kn", bmat, beta)
            obj = float(np.sum((grad - target)[valid] ** 2))
            if abs(prev_obj - obj) < config.solver_tol:
                break
            prev_obj = obj
        else:
            raise NonConvergence(f"joint design for CBF {q} did not converge")
        ups_final = np.einsum("knm,kn->km", g, grad)
        if np.any(np.abs(ups_final[valid]) < eps * (1 - 1e-9)):
            raise NonConvergence(f"joint design for CBF {q} violates the Lie derivative bound")
        lf = np.einsum("kn,kn->k", grad, system.f(points))
        value = np.where(valid, sigma, 0.0) * (grad @ target_field.cone_axis)
        table = DesignTable(points, alpha, beta, grad, ups_final, lf, sigma, value, cert, wit, valid)
        stats = {"projected": n_proj, "dropped": int(np.sum(~valid)), "certified": int(cert.sum()),
                 "iterations": it + 1}
        return table, theta_cur, eps, stats

    table, theta, eps, stats = one_table(x, prior_cbfs)
    audit_table, audit_stats = None, {}
    if audit is not None:
        audit_table, theta_a, _, audit_stats = one_table(np.atleast_2d(audit), prior_audit or [], theta)
        if theta_a != theta:
            theta = theta_a
            table, _, _, stats = one_table(x, prior_cbfs, theta)
    if boundary_points is None:
        boundary_points = np.zeros((0, x.shape[1]))
    meta = {"order": q, "joint_solver": True, "collocation": stats, "audit": audit_stats,
            "channel_margin": float(target_field.channel_margin) if np.isfinite(target_field.channel_margin) else None}
    return DesignedGradient(q, float(theta), eps, target_field.channel_signs.copy(), target_field.cone_axis.copy(),
                            table, audit_table, np.asarray(boundary_points), meta)
