"""Numerical detection of states where a channel Lie derivative L_{g_i} h vanishes.

At such states the CBF constraint loses its input term and the safety filter
stops acting. The scan walks grid lines of the admissible box, brackets sign
changes of each L_{g_i} h and refines them by bisection.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.optimize import root

from .dynamics import ControlAffineSystem

DEFAULT_TOL = 1e-7
BOUNDARY_BAND = 1e-3
INTERIOR = "interior"
BOUNDARY = "boundary"


@dataclass(frozen=True)
class LieDerivatives:
    lf_h: float
    lg_h: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.lf_h) and np.all(np.isfinite(self.lg_h))):
            raise FloatingPointError("non-finite Lie derivative")


def _value_grad(barrier, x):
    if hasattr(barrier, "value_and_gradient"):
        h, grad = barrier.value_and_gradient(x)
    else:
        h, grad = barrier.value(x), barrier.gradient(x)
    return np.asarray(h, dtype=float), np.asarray(grad, dtype=float)


def _lg(sys, barrier, x):
    """Batched (h, L_g h) with shapes (...,) and (..., m)."""
    h, grad = _value_grad(barrier, x)
    return h, np.einsum("...nm,...n->...m", sys.g(x), grad)


def lie_derivatives(sys: ControlAffineSystem, set_, x) -> LieDerivatives:
    x = np.asarray(x, dtype=float)
    if x.shape != (sys.state_dim,):
        raise ValueError(f"state must have shape ({sys.state_dim},), got {x.shape}")
    if getattr(set_, "state_dim", sys.state_dim) != sys.state_dim:
        raise ValueError("safe set and system disagree on the state dimension")
    _, grad = _value_grad(set_, x)
    if grad.shape != (sys.state_dim,):
        raise ValueError("gradient has the wrong shape")
    return LieDerivatives(float(grad @ sys.f(x)), sys.g(x).T @ grad)


@dataclass(frozen=True)
class InactivityReport:
    """Zero-locus points of L_g h found inside or on the boundary of the set.

    ``per_channel[i]`` holds points where |L_{g_i} h| < tol; ``points`` is
    their union with ``channels``, ``h`` and ``classification`` aligned to it.
    ``zero_locus`` marks points where every channel vanishes at once.
    """

    points: np.ndarray
    channels: np.ndarray
    h: np.ndarray
    classification: tuple[str, ...]
    zero_locus: np.ndarray
    tol: float
    boundary_band: float
    input_dim: int

    @property
    def per_channel(self):
        return [self.points[self.channels == i] for i in range(self.input_dim)]

    @property
    def zero_locus_points(self):
        return self.points[self.zero_locus]

    @property
    def boundary_points(self):
        mask = np.array([c == BOUNDARY for c in self.classification], dtype=bool)
        return self.points[mask] if len(self.points) else self.points

    @property
    def interior_points(self):
        mask = np.array([c == INTERIOR for c in self.classification], dtype=bool)
        return self.points[mask] if len(self.points) else self.points

    def is_empty(self):
        return len(self.points) == 0

    def to_dict(self):
        return {
            "tol": self.tol,
            "boundary_band": self.boundary_band,
            "input_dim": self.input_dim,
            "points": self.points.tolist(),
            "channels": self.channels.tolist(),
            "h": self.h.tolist(),
            "classification": list(self.classification),
            "zero_locus": self.zero_locus.tolist(),
        }

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.points.shape[1] if self.points.ndim == 2 else 0
        w.writerow([f"x{i}" for i in range(n)] + ["channel", "h", "class"])
        for p, c, h, k in zip(self.points, self.channels, self.h, self.classification):
            w.writerow([repr(float(v)) for v in p] + [int(c), repr(float(h)), k])
        return buf.getvalue()


def _bisect(fun, a, b, fa, iters=80):
    """Vectorized bisection of fun between rows of a and b, fa = fun(a) with sign change."""
    a, b, fa = a.copy(), b.copy(), fa.copy()
    for _ in range(iters):
        m = 0.5 * (a + b)
        fm = fun(m)
        left = np.sign(fm) == np.sign(fa)
        a[left], fa[left] = m[left], fm[left]
        b[~left] = m[~left]
    return 0.5 * (a + b)


def _grid(box, res):
    axes = [np.linspace(lo, hi, res) for lo, hi in box]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _boundary_crossings(sys, set_, channel, pts, hs, tol, band):
    """Points where the channel zero locus meets h = 0 (n = 2 only).

    Consecutive locus points with h of opposite sign bracket a crossing; a
    2x2 root solve from their midpoint pins it down.
    """
    found = []
    if sys.state_dim != 2 or len(pts) < 2:
        return found
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    tree_pts, tree_h = pts[order], hs[order]

    def eqs(x):
        h, lg = _lg(sys, set_, x[None])
        return [float(h[0]), float(lg[0, channel])]

    seen = set()
    for i in range(len(tree_pts)):
        d = np.linalg.norm(tree_pts - tree_pts[i], axis=1)
        d[i] = np.inf
        j = int(np.argmin(d))
        if np.sign(tree_h[i]) == np.sign(tree_h[j]) or (min(i, j), max(i, j)) in seen:
            continue
        seen.add((min(i, j), max(i, j)))
        sol = root(eqs, 0.5 * (tree_pts[i] + tree_pts[j]), method="hybr", tol=1e-14)
        r = np.asarray(eqs(sol.x))
        if abs(r[0]) <= band and abs(r[1]) < tol and sys.contains(sol.x):
            found.append(sol.x)
    return found


def scan_inactivity(sys: ControlAffineSystem, set_, grid_resolution: int = 200, tol: float = DEFAULT_TOL,
                    boundary_band: float = BOUNDARY_BAND) -> InactivityReport:
    """Locate states in {h >= -band} where some L_{g_i} h vanishes."""
    if grid_resolution < 8:
        raise ValueError("grid_resolution must be at least 8")
    n, m = sys.state_dim, sys.input_dim
    X = _grid(sys.admissible_box, grid_resolution)
    _, L = _lg(sys, set_, X)
    pts, chans = [], []
    for i in range(m):
        Li = L[..., i]

        def fun(y, i=i):
            return _lg(sys, set_, y)[1][..., i]

        for ax in range(n):
            a = np.moveaxis(X, ax, 0)
            la = np.moveaxis(Li, ax, 0)
            lo, hi, flo, fhi = a[:-1], a[1:], la[:-1], la[1:]
            cross = (np.sign(flo) * np.sign(fhi) < 0)
            if cross.any():
                r = _bisect(fun, lo[cross], hi[cross], flo[cross])
                pts.append(r)
                chans.append(np.full(len(r), i))
        # grid nodes that already sit in the locus (exact zeros, tangential touches)
        node = np.abs(Li) < tol
        if node.any():
            pts.append(X[node])
            chans.append(np.full(int(node.sum()), i))

    if pts:
        P = np.concatenate(pts).reshape(-1, n)
        C = np.concatenate(chans)
    else:
        P, C = np.zeros((0, n)), np.zeros(0, dtype=int)
    if len(P):
        key = np.round(np.column_stack([P, C]), 9)
        _, first = np.unique(key, axis=0, return_index=True)
        first = np.sort(first)
        P, C = P[first], C[first]
        h, L = _lg(sys, set_, P)
        keep = (np.abs(L[np.arange(len(P)), C]) < tol) & (h >= -boundary_band)
        extra = []
        for i in range(m):
            sel = C == i
            # locus points just outside the set still help bracket the boundary crossing
            near = np.abs(L[np.arange(len(P)), C]) < tol
            cand = sel & near
            for x in _boundary_crossings(sys, set_, i, P[cand], h[cand], tol, boundary_band):
                extra.append((x, i))
        P, C = P[keep], C[keep]
        if extra:
            P = np.vstack([P] + [e[0][None] for e in extra])
            C = np.concatenate([C, [e[1] for e in extra]])
    if len(P):
        h, L = _lg(sys, set_, P)
        zero = np.all(np.abs(L) < tol, axis=-1)
        cls = tuple(BOUNDARY if abs(v) <= boundary_band else INTERIOR for v in h)
    else:
        h, zero, cls = np.zeros(0), np.zeros(0, dtype=bool), ()
    return InactivityReport(P, C.astype(int), np.asarray(h, dtype=float), cls, zero, float(tol),
                            float(boundary_band), m)
