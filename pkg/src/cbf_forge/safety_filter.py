"""Runtime CBF safety filter.

    minimize ||u - u_nom||^2  subject to  a_q^T u >= b_q,  q = 1..Q

with a_q = g(x)^T grad h_q(x) and b_q = -grad h_q(x)^T f(x) - gamma_q(h_q(x)).
Single-input systems use exact interval intersection; multi-input systems
use Hildreth's dual coordinate ascent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .dynamics import ControlAffineSystem

PASS_THROUGH = "pass-through"
MODIFIED = "modified"
INFEASIBLE = "infeasible"

HOLD_LAST = "hold-last"
LEAST_VIOLATION = "least-violation"

SLACK_TOL = 1e-9


@dataclass(frozen=True)
class ClassKappa:
    """Linear extended class-K function gamma(h) = slope * h."""

    slope: float = 1.0

    def __post_init__(self):
        if not self.slope > 0:
            raise ValueError("class-K slope must be positive")

    def __call__(self, h):
        return self.slope * np.asarray(h, dtype=float)


@dataclass(frozen=True)
class CbfModel:
    """One barrier h_q (anything with value/gradient) with its class-K function."""

    barrier: Any
    kappa: ClassKappa = ClassKappa()
    label: str = "h"
    metadata: dict = field(default_factory=dict)

    def value_and_gradient(self, x):
        x = np.asarray(x, dtype=float)
        if hasattr(self.barrier, "value_and_gradient"):
            h, grad = self.barrier.value_and_gradient(x)
        else:
            h, grad = self.barrier.value(x), self.barrier.gradient(x)
        return np.asarray(h, dtype=float), np.asarray(grad, dtype=float)


@dataclass(frozen=True)
class MultiCbfFilter:
    cbfs: tuple[CbfModel, ...]
    system: ControlAffineSystem
    infeasible_policy: str = HOLD_LAST

    def __post_init__(self):
        object.__setattr__(self, "cbfs", tuple(self.cbfs))
        if len(self.cbfs) < 1:
            raise ValueError("a filter needs at least one CBF")
        if self.infeasible_policy not in (HOLD_LAST, LEAST_VIOLATION):
            raise ValueError(f"unknown infeasibility policy {self.infeasible_policy!r}")

    def __len__(self):
        return len(self.cbfs)


@dataclass(frozen=True)
class FilterResult:
    u_filtered: np.ndarray
    active_constraints: tuple[int, ...]
    slacks: np.ndarray
    status: str
    values: np.ndarray | None = None


def constraint_row(cbf: CbfModel, sys: ControlAffineSystem, x):
    """(a, b) such that the CBF condition reads a^T u >= b at state x."""
    x = np.asarray(x, dtype=float)
    h, grad = cbf.value_and_gradient(x)
    a = sys.g(x).T @ grad
    b = -(grad @ sys.f(x)) - float(cbf.kappa(h))
    return a, float(b)


def constraint_rows(flt: MultiCbfFilter, x):
    """Stacked (A, b, h) for all CBFs at x."""
    rows, rhs, vals = [], [], []
    sys = flt.system
    f, g = sys.f(x), sys.g(x)
    for cbf in flt.cbfs:
        h, grad = cbf.value_and_gradient(x)
        rows.append(g.T @ grad)
        rhs.append(-(grad @ f) - float(cbf.kappa(h)))
        vals.append(float(h))
    return np.array(rows, dtype=float), np.array(rhs, dtype=float), np.array(vals)


def _interval(A, b):
    """Intersect a_q u >= b_q for scalar u; returns (lo, hi) or None when empty."""
    lo, hi = -np.inf, np.inf
    for a, r in zip(A[:, 0], b):
        if abs(a) <= 1e-12:
            if r > SLACK_TOL:
                return None
            continue
        if a > 0:
            lo = max(lo, r / a)
        else:
            hi = min(hi, r / a)
    if lo > hi:
        return None
    return lo, hi


def hildreth(A, b, u0, tol=1e-10, max_sweeps=10_000):
    """Dual coordinate ascent for min ||u - u0||^2 s.t. A u >= b.

    Rows are normalized first. Returns (u, multipliers, converged); a blown-up
    multiplier sum flags an infeasible constraint set.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    norms = np.linalg.norm(A, axis=1)
    keep = norms > 1e-12
    An = A[keep] / norms[keep, None]
    bn = b[keep] / norms[keep]
    u = np.array(u0, dtype=float)
    lam = np.zeros(len(An))
    for _ in range(max_sweeps):
        biggest = 0.0
        for i in range(len(An)):
            step = max(-lam[i], bn[i] - An[i] @ u)
            if step != 0.0:
                lam[i] += step
                u += step * An[i]
                biggest = max(biggest, abs(step))
        if biggest <= tol * (1.0 + lam.max(initial=0.0)):
            return _polish(An, bn, np.asarray(u0, dtype=float), u, lam), lam, True
        if lam.sum() > 1e12:
            return u, lam, False
    return u, lam, False


def _polish(A, b, u0, u, lam):
    """Exact projection onto the active set found by the dual iteration.

    Kept only if its multipliers are nonnegative and it stays feasible;
    otherwise the iterate is returned unchanged.
    """
    act = lam > 0
    if not act.any():
        return u
    Aa = A[act]
    try:
        mu = np.linalg.solve(Aa @ Aa.T, b[act] - Aa @ u0)
    except np.linalg.LinAlgError:
        return u
    cand = u0 + Aa.T @ mu
    if np.all(mu >= 0) and np.all(A @ cand - b >= -1e-12):
        return cand
    return u


def _least_violation(A, b):
    """Input minimizing the largest normalized violation max_q (b_q - a_q u) / ||a_q||.

    The violation is floored at zero, which keeps the LP bounded when the rows are feasible.
    """
    from scipy.optimize import linprog

    m = A.shape[1]
    norms = np.linalg.norm(A, axis=1)
    keep = norms > 1e-12
    if not keep.any():
        return np.zeros(m)
    An, bn = A[keep] / norms[keep, None], b[keep] / norms[keep]
    c = np.zeros(m + 1)
    c[-1] = 1.0
    res = linprog(c, A_ub=np.hstack([-An, -np.ones((len(An), 1))]), b_ub=-bn,
                  bounds=[(None, None)] * m + [(0.0, None)], method="highs")
    if res.status != 0:
        return np.zeros(m)
    return res.x[:m]


def filter(flt: MultiCbfFilter, x, u_nominal, last_feasible=None) -> FilterResult:  # noqa: A001
    """Minimally modify ``u_nominal`` to satisfy every CBF constraint at x.

    On an empty certified input set the status is ``infeasible`` and the
    returned input follows the filter's policy: the last feasible input
    (``last_feasible``, falling back to least violation when None) or the
    least-violating input.
    """
    x = np.asarray(x, dtype=float)
    u_nom = np.atleast_1d(np.asarray(u_nominal, dtype=float))
    A, b, vals = constraint_rows(flt, x)
    slack_nom = A @ u_nom - b
    norms = np.maximum(np.linalg.norm(A, axis=1), 1.0)
    if np.all(slack_nom >= 0):
        return FilterResult(u_nom, (), slack_nom, PASS_THROUGH, vals)
    m = flt.system.input_dim
    feasible = True
    if m == 1:
        iv = _interval(A, b)
        if iv is None:
            feasible = False
        else:
            u = np.array([min(max(u_nom[0], iv[0]), iv[1])])
    else:
        u, _, converged = hildreth(A, b, u_nom)
        feasible = converged and np.all(A @ u - b >= -SLACK_TOL * norms)
    if feasible:
        slacks = A @ u - b
        if np.any(slacks < -SLACK_TOL * norms):
            feasible = False
    if not feasible:
        if flt.infeasible_policy == HOLD_LAST and last_feasible is not None:
            u = np.atleast_1d(np.asarray(last_feasible, dtype=float)).copy()
        else:
            u = _least_violation(A, b)
        return FilterResult(u, (), A @ u - b, INFEASIBLE, vals)
    active = tuple(int(q) for q in np.nonzero(np.abs(slacks) <= 1e-7 * norms)[0])
    return FilterResult(u, active, slacks, MODIFIED, vals)


def kkt_residual(A, b, u_nominal, u):
    """Largest violation of the KKT conditions of the filter QP at u.

    Multipliers are recovered by nonnegative least squares on the rows
    that are active at u.
    """
    from scipy.optimize import nnls

    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    u = np.asarray(u, dtype=float)
    r = u - np.asarray(u_nominal, dtype=float)
    slack = A @ u - b
    scale = np.maximum(np.linalg.norm(A, axis=1), 1.0)
    act = np.abs(slack) <= 1e-7 * scale
    lam = np.zeros(len(b))
    if act.any():
        lam[act], _ = nnls(A[act].T, r)
    stationarity = np.abs(r - A.T @ lam).max(initial=0.0)
    primal = np.max(np.maximum(-slack, 0.0), initial=0.0)
    complementarity = np.max(np.abs(lam * slack), initial=0.0)
    return float(max(stationarity, primal, complementarity))


def certified_input_set_1d(flt: MultiCbfFilter, x):
    """Interval of inputs satisfying all constraints (m = 1), or None when empty."""
    if flt.system.input_dim != 1:
        raise ValueError("certified_input_set_1d needs a single-input system")
    A, b, _ = constraint_rows(flt, np.asarray(x, dtype=float))
    return _interval(A, b)


def single_cbf_filter(set_, system, slope=1.0, policy=HOLD_LAST) -> MultiCbfFilter:
    """Filter using the desired safe set's own h as the only CBF."""
    return MultiCbfFilter((CbfModel(set_, ClassKappa(slope), label="h_des"),), system, policy)


def multi_cbf_filter(models: Sequence, slopes: Sequence[float], system, policy=HOLD_LAST) -> MultiCbfFilter:
    cbfs = tuple(CbfModel(m, ClassKappa(c), label=f"h_{q + 1}") for q, (m, c) in enumerate(zip(models, slopes)))
    return MultiCbfFilter(cbfs, system, policy)
