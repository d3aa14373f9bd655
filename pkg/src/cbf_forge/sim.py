"""Fixed-rate closed-loop simulation: policy -> safety filter -> RK4 plant.

The filter runs once per period 1/filter_rate and its output is held over
``substeps`` RK4 steps.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .dynamics import ControlAffineSystem, evaluate_dynamics
from .safety_filter import INFEASIBLE, MultiCbfFilter, filter as run_filter

ESCAPED = "escaped"
UNFILTERED = "unfiltered"


@dataclass(frozen=True)
class ConstantPolicy:
    u: tuple[float, ...]
    kind: str = "constant-input"

    def __post_init__(self):
        object.__setattr__(self, "u", tuple(float(v) for v in np.atleast_1d(self.u)))

    def __call__(self, x, t=0.0):
        return np.array(self.u)

    def to_dict(self):
        return {"kind": self.kind, "u": list(self.u)}


@dataclass(frozen=True)
class GoalSeekingPolicy:
    """u = offset + gain (goal - x), a proportional pull toward ``goal``."""

    goal: tuple[float, ...]
    gain: tuple[tuple[float, ...], ...]
    offset: tuple[float, ...] = (0.0,)
    kind: str = "goal-seeking"

    def __post_init__(self):
        object.__setattr__(self, "goal", tuple(float(v) for v in np.atleast_1d(self.goal)))
        gain = np.atleast_2d(np.asarray(self.gain, dtype=float))
        object.__setattr__(self, "gain", tuple(tuple(r) for r in gain))
        object.__setattr__(self, "offset", tuple(float(v) for v in np.atleast_1d(self.offset)))
        if gain.shape != (len(self.offset), len(self.goal)):
            raise ValueError("gain must have shape (input_dim, state_dim)")

    def __call__(self, x, t=0.0):
        return np.asarray(self.offset) + np.asarray(self.gain) @ (np.asarray(self.goal) - x)

    def to_dict(self):
        return {"kind": self.kind, "goal": list(self.goal), "gain": [list(r) for r in self.gain],
                "offset": list(self.offset)}


def policy_from_dict(d: dict):
    kind = d.get("kind", "constant-input")
    if kind == "constant-input":
        return ConstantPolicy(tuple(np.atleast_1d(d["u"])))
    if kind == "goal-seeking":
        return GoalSeekingPolicy(tuple(d["goal"]), d["gain"], tuple(np.atleast_1d(d.get("offset", 0.0))))
    raise ValueError(f"unknown policy kind {kind!r}")


@dataclass(frozen=True)
class SimulationConfig:
    filter_rate: float = 100.0
    substeps: int = 10
    duration: float = 20.0
    initial_state: tuple[float, ...] = (0.0, 0.0)
    record_substeps: bool = False

    def __post_init__(self):
        if not self.filter_rate > 0:
            raise ValueError("filter_rate must be positive")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError("substeps must be a positive integer")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        object.__setattr__(self, "initial_state", tuple(float(v) for v in self.initial_state))

    @property
    def steps(self) -> int:
        return int(round(self.duration * self.filter_rate))

    def to_dict(self):
        return {"filter_rate": self.filter_rate, "substeps": self.substeps, "duration": self.duration,
                "initial_state": list(self.initial_state), "integrator": "rk4"}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d.get("filter_rate", 100.0)), int(d.get("substeps", 10)), float(d.get("duration", 20.0)),
                   tuple(d.get("initial_state", (0.0, 0.0))))


@dataclass
class SimulationTrace:
    t: np.ndarray
    x: np.ndarray
    u_nominal: np.ndarray
    u_filtered: np.ndarray
    status: list
    active: list
    h_desired: np.ndarray
    h: np.ndarray
    escaped: bool = False
    substep_states: np.ndarray | None = None
    substep_inputs: np.ndarray | None = None
    labels: list = field(default_factory=list)

    def __len__(self):
        return len(self.t)


def rk4_step(sys, x, u, dt):
    k1 = evaluate_dynamics(sys, x, u)
    k2 = evaluate_dynamics(sys, x + 0.5 * dt * k1, u)
    k3 = evaluate_dynamics(sys, x + 0.5 * dt * k2, u)
    k4 = evaluate_dynamics(sys, x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _scalar(v):
    return float(np.asarray(v).reshape(()))


def run_closed_loop(sys: ControlAffineSystem, policy, flt: MultiCbfFilter | None, config: SimulationConfig,
                    desired_set=None) -> SimulationTrace:
    """Simulate from ``config.initial_state``; a box escape truncates the trace and sets ``escaped``.

    The row at which the state left the box is kept (status ``escaped``, no
    input) so metrics see the violating state.
    """
    x = np.asarray(config.initial_state, dtype=float)
    if x.shape != (sys.state_dim,):
        raise ValueError(f"initial state must have length {sys.state_dim}")
    if not sys.contains(x):
        raise ValueError("initial state is outside the admissible box")
    dt_f = 1.0 / config.filter_rate
    dt = dt_f / config.substeps
    Q = len(flt) if flt is not None else 0
    ts, xs, uns, ufs, sts, acts, hd, hs = [], [], [], [], [], [], [], []
    sub_x, sub_u = [], []
    last_ok = None
    escaped = False
    for k in range(config.steps + 1):
        t = k * dt_f
        u_nom = np.atleast_1d(np.asarray(policy(x, t), dtype=float))
        if flt is not None:
            res = run_filter(flt, x, u_nom, last_feasible=last_ok)
            u, status, active = res.u_filtered, res.status, res.active_constraints
            hq = res.values
            if status != INFEASIBLE:
                last_ok = u
        else:
            u, status, active, hq = u_nom, UNFILTERED, (), np.zeros(0)
        ts.append(t)
        xs.append(x.copy())
        uns.append(u_nom)
        ufs.append(np.array(u, dtype=float))
        sts.append(status)
        acts.append(tuple(active))
        hd.append(_scalar(desired_set.value(x)) if desired_set is not None else np.nan)
        hs.append(np.asarray(hq, dtype=float))
        if k == config.steps:
            break
        for _ in range(config.substeps):
            if config.record_substeps:
                sub_x.append(x.copy())
                sub_u.append(np.array(u, dtype=float))
            x = rk4_step(sys, x, u, dt)
        if not sys.contains(x):
            escaped = True
            ts.append((k + 1) * dt_f)
            xs.append(x.copy())
            nan_u = np.full(sys.input_dim, np.nan)
            uns.append(nan_u)
            ufs.append(nan_u)
            sts.append(ESCAPED)
            acts.append(())
            hd.append(_scalar(desired_set.value(x)) if desired_set is not None else np.nan)
            hs.append(np.array([_scalar(c.value_and_gradient(x)[0]) for c in flt.cbfs]) if Q else np.zeros(0))
            break
    return SimulationTrace(
        t=np.array(ts), x=np.array(xs), u_nominal=np.array(uns), u_filtered=np.array(ufs), status=sts,
        active=acts, h_desired=np.array(hd), h=np.array(hs).reshape(len(ts), Q), escaped=escaped,
        substep_states=np.array(sub_x) if config.record_substeps else None,
        substep_inputs=np.array(sub_u) if config.record_substeps else None,
        labels=[c.label for c in flt.cbfs] if flt is not None else [],
    )


def trace_metrics(trace: SimulationTrace, desired_set=None) -> dict:
    """Safety and smoothness summary of a trace.

    The chattering index is the mean absolute per-step change of the
    filtered input over the second half of the trace.
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    if desired_set is not None:
        h = np.asarray(desired_set.value(trace.x), dtype=float)
    else:
        h = trace.h_desired
    u = trace.u_filtered[np.isfinite(trace.u_filtered).all(axis=1)]
    half = u[len(u) // 2:]
    chatter = float(np.mean(np.abs(np.diff(half, axis=0)).sum(axis=1))) if len(half) > 1 else 0.0
    hit = np.nonzero(h <= 0)[0]
    counts = {}
    for s in trace.status:
        counts[s] = counts.get(s, 0) + 1
    return {
        "min_h_desired": float(np.min(h)),
        "violation_steps": int(np.sum(h < 0)),
        "chattering_index": chatter,
        "time_to_boundary": float(trace.t[hit[0]]) if len(hit) else None,
        "escaped": bool(trace.escaped),
        "steps": len(trace),
        "final_state": trace.x[-1].tolist(),
        "status_counts": dict(sorted(counts.items())),
    }


def trace_csv(trace: SimulationTrace) -> str:
    """Trace as CSV with header t,x0,x1,u_nom,u_filt,status,h_des,h_1..h_Q."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = trace.x.shape[1]
    m = trace.u_filtered.shape[1]
    if m == 1:
        ucols = ["u_nom", "u_filt"]
    else:
        ucols = [f"u_nom{i}" for i in range(m)] + [f"u_filt{i}" for i in range(m)]
    Q = trace.h.shape[1]
    w.writerow(["t"] + [f"x{i}" for i in range(n)] + ucols + ["status", "h_des"] + [f"h_{q + 1}" for q in range(Q)])
    for i in range(len(trace)):
        row = [repr(float(trace.t[i]))] + [repr(float(v)) for v in trace.x[i]]
        row += [repr(float(v)) for v in trace.u_nominal[i]] + [repr(float(v)) for v in trace.u_filtered[i]]
        row += [trace.status[i], repr(float(trace.h_desired[i]))] + [repr(float(v)) for v in trace.h[i]]
        w.writerow(row)
    return buf.getvalue()
