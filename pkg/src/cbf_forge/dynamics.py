"""Control-affine systems xdot = f(x) + g(x) u.

Every callable here is batched: states come in with shape (..., n) and the
leading axes are carried through, so f returns (..., n) and g returns
(..., n, m).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

GRAVITY = 9.81

# Default admissible box for the quadrotor z-axis model: z and zdot in [-2, 2].
QUADROTOR_BOX = ((-2.0, 2.0), (-2.0, 2.0))


@dataclass(frozen=True)
class ControlAffineSystem:
    """Immutable description of xdot = f(x) + g(x) u on an axis-aligned box."""

    state_dim: int
    input_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    input_matrix: Callable[[np.ndarray], np.ndarray]
    admissible_box: np.ndarray
    name: str = "system"
    config: dict[str, Any] = field(default_factory=dict)
    constant_input_matrix: bool = False

    def __post_init__(self):
        box = np.asarray(self.admissible_box, dtype=float)
        if box.shape != (self.state_dim, 2):
            raise ValueError(f"admissible_box must have shape ({self.state_dim}, 2), got {box.shape}")
        if np.any(box[:, 0] >= box[:, 1]):
            raise ValueError("admissible_box lower bounds must be below upper bounds")
        box.setflags(write=False)
        object.__setattr__(self, "admissible_box", box)

    def f(self, x) -> np.ndarray:
        return self.drift(self._check_state(x))

    def g(self, x) -> np.ndarray:
        return self.input_matrix(self._check_state(x))

    def contains(self, x, atol: float = 0.0) -> np.ndarray:
        """Boolean mask of states inside the admissible box (optionally padded by atol)."""
        x = np.asarray(x, dtype=float)
        lo, hi = self.admissible_box[:, 0] - atol, self.admissible_box[:, 1] + atol
        return np.all((x >= lo) & (x <= hi), axis=-1)

    def _check_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.state_dim:
            raise ValueError(f"state must have trailing dimension {self.state_dim}, got shape {x.shape}")
        return x


@dataclass(frozen=True)
class QuadrotorZParams:
    k1: float = 20.91
    k2: float = 3.65
    gravity: float = GRAVITY

    def __post_init__(self):
        if self.k2 == 0:
            raise ValueError("k2 must be nonzero, otherwise the input channel vanishes")

    @property
    def hover_input(self) -> float:
        return -(self.k1 - self.gravity) / self.k2


SIM_PARAMS = QuadrotorZParams(k1=20.91, k2=3.65)
REAL_PARAMS = QuadrotorZParams(k1=20.91, k2=2.19)


def quadrotor_z_system(params: QuadrotorZParams = SIM_PARAMS, box=QUADROTOR_BOX) -> ControlAffineSystem:
    """Vertical quadrotor channel: x = (z, zdot), zddot = k1 - gravity + k2 u."""
    if params.k2 == 0:
        raise ValueError("k2 must be nonzero")
    bias = params.k1 - params.gravity
    gain = float(params.k2)

    def drift(x):
        out = np.empty_like(x)
        out[..., 0] = x[..., 1]
        out[..., 1] = bias
        return out

    def input_matrix(x):
        out = np.zeros(x.shape[:-1] + (2, 1))
        out[..., 1, 0] = gain
        return out

    return ControlAffineSystem(
        state_dim=2,
        input_dim=1,
        drift=drift,
        input_matrix=input_matrix,
        admissible_box=box,
        name="quadrotor_z",
        config={
            "kind": "quadrotor_z",
            "k1": float(params.k1),
            "k2": float(params.k2),
            "gravity": float(params.gravity),
            "box": np.asarray(box, dtype=float).tolist(),
        },
        constant_input_matrix=True,
    )


def single_integrator(box=((-2.0, 2.0),)) -> ControlAffineSystem:
    """xdot = u in one dimension."""

    def drift(x):
        return np.zeros_like(x)

    def input_matrix(x):
        return np.ones(x.shape[:-1] + (1, 1))

    return ControlAffineSystem(
        state_dim=1,
        input_dim=1,
        drift=drift,
        input_matrix=input_matrix,
        admissible_box=box,
        name="single_integrator",
        config={"kind": "single_integrator", "box": np.asarray(box, dtype=float).tolist()},
        constant_input_matrix=True,
    )


def evaluate_dynamics(sys: ControlAffineSystem, x, u) -> np.ndarray:
    """Return f(x) + g(x) u, batched over leading axes of x and u."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.ndim == 0 or x.shape[-1] != sys.state_dim:
        raise ValueError(f"state must have trailing dimension {sys.state_dim}, got shape {x.shape}")
    if u.ndim == 0:
        if sys.input_dim != 1:
            raise ValueError(f"input must have length {sys.input_dim}")
        u = u[None]
    if u.shape[-1] != sys.input_dim:
        raise ValueError(f"input must have trailing dimension {sys.input_dim}, got shape {u.shape}")
    xdot = sys.f(x) + np.einsum("...ij,...j->...i", sys.g(x), u)
    if not np.all(np.isfinite(xdot)):
        raise FloatingPointError("dynamics produced a non-finite state derivative")
    return xdot


def system_from_config(config: dict) -> ControlAffineSystem:
    """Rebuild a system from the dict stored in ``ControlAffineSystem.config``."""
    kind = config.get("kind")
    if kind == "quadrotor_z":
        params = QuadrotorZParams(
            k1=float(config.get("k1", SIM_PARAMS.k1)),
            k2=float(config.get("k2", SIM_PARAMS.k2)),
            gravity=float(config.get("gravity", GRAVITY)),
        )
        return quadrotor_z_system(params, box=config.get("box", QUADROTOR_BOX))
    if kind == "single_integrator":
        return single_integrator(box=config.get("box", ((-2.0, 2.0),)))
    raise ValueError(f"unknown system kind {kind!r}")
