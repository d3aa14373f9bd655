"""Small tanh networks solving gradient-matching boundary value problems.

The network maps a state to a scalar H(x). Training minimizes

    E = lambda * mean (H(x_bc) - target_bc)^2 + mean ||grad H(x_phy) - target_grad||^2

Input gradients are propagated forward alongside the activations (a Jacobian
of shape (N, width, n) per layer, cheap for n = 1 or 2), and weight gradients
come from a hand-written reverse pass over that forward computation. In hard
boundary mode the output is F(x) * net(x) for a factor F that vanishes on the
designed boundary, so the boundary term drops out.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

log = logging.getLogger(__name__)


class Diverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# boundary factors


class BoundaryFactor:
    kind = "abstract"

    def value(self, x) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def value_and_gradient(self, x):
        return self.value(x), self.gradient(x)

    def to_dict(self) -> dict:
        raise NotImplementedError


class HyperplaneFactor(BoundaryFactor):
    """F(x) = a^T x + b."""

    kind = "hyperplane"

    def __init__(self, normal, offset):
        self.normal = np.asarray(normal, dtype=float)
        self.offset = float(offset)

    def value(self, x):
        return np.atleast_2d(x) @ self.normal + self.offset

    def gradient(self, x):
        x = np.atleast_2d(x)
        return np.broadcast_to(self.normal, x.shape).copy()

    def to_dict(self):
        return {"kind": self.kind, "normal": self.normal.tolist(), "offset": self.offset}


class EllipseFactor(BoundaryFactor):
    """F(x) = 1 - (x - c)^T P (x - c)."""

    kind = "ellipse"

    def __init__(self, center, shape_matrix):
        self.center = np.asarray(center, dtype=float)
        self.shape_matrix = np.asarray(shape_matrix, dtype=float)

    def value(self, x):
        d = np.atleast_2d(x) - self.center
        return 1.0 - np.einsum("ki,ij,kj->k", d, self.shape_matrix, d)

    def gradient(self, x):
        d = np.atleast_2d(x) - self.center
        return -2.0 * d @ self.shape_matrix

    def to_dict(self):
        return {"kind": self.kind, "center": self.center.tolist(), "shape_matrix": self.shape_matrix.tolist()}


class AxisOffsetFactor(BoundaryFactor):
    """F = signed offset along the segment's cone axis to the designed curve."""

    kind = "axis-offset"

    def __init__(self, target_field):
        self.field = target_field

    def value(self, x):
        return self.field.evaluate(np.atleast_2d(x))[0]

    def gradient(self, x):
        return self.field.evaluate(np.atleast_2d(x))[1]

    def value_and_gradient(self, x):
        sigma, grad, _ = self.field.evaluate(np.atleast_2d(x))
        return sigma, grad

    def to_dict(self):
        return {"kind": self.kind, "field": self.field.to_dict()}


def factor_from_dict(d: dict | None) -> BoundaryFactor | None:
    if d is None:
        return None
    kind = d["kind"]
    if kind == "hyperplane":
        return HyperplaneFactor(d["normal"], d["offset"])
    if kind == "ellipse":
        return EllipseFactor(d["center"], d["shape_matrix"])
    if kind == "axis-offset":
        from .gradient_design import TargetGradientField

        return AxisOffsetFactor(TargetGradientField.from_dict(d["field"]))
    raise ValueError(f"unknown boundary factor kind {kind!r}")


def hard_boundary_factor(segment, safe_set=None, target_field=None) -> BoundaryFactor | None:
    """Pick a factor vanishing on the segment's designed boundary.

    A target field gives the signed offset along its axis (exact for any
    designed curve). Otherwise an ellipsoid safe set gives its quadratic, and
    a segment with a constant normal gives its hyperplane. Anything else
    returns None with a warning, and training falls back to the soft loss.
    """
    if target_field is not None:
        return AxisOffsetFactor(target_field)
    if safe_set is not None and safe_set.spec.get("kind") == "ellipsoid":
        return EllipseFactor(safe_set.spec["center"], safe_set.spec["shape_matrix"])
    nrm = np.asarray(segment.normals, dtype=float)
    if np.allclose(nrm, nrm[0], rtol=0, atol=1e-9):
        a = nrm[0]
        return HyperplaneFactor(a, -float(np.mean(np.asarray(segment.points) @ a)))
    log.warning("segment geometry has no supported hard-boundary factor; using the soft boundary loss")
    return None


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class PinnArchitecture:
    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    hard_boundary: bool = False

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ValueError("need an input layer, at least one hidden layer and an output layer")
        if widths[-1] != 1:
            raise ValueError("output width must be 1")
        if min(widths) < 1:
            raise ValueError("layer widths must be positive")
        if self.activation != "tanh":
            raise ValueError("only the tanh activation is supported")

    @classmethod
    def hidden(cls, n_inputs, depth, width, hard_boundary=False):
        return cls((n_inputs,) + (width,) * depth + (1,), hard_boundary=hard_boundary)

    def to_dict(self):
        return {"layer_widths": list(self.layer_widths), "activation": self.activation,
                "hard_boundary": self.hard_boundary}


@dataclass
class PinnModel:
    architecture: PinnArchitecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_shift: np.ndarray
    input_scale: np.ndarray
    boundary_factor: BoundaryFactor | None = None
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def params(self):
        return self.weights + self.biases

    def value(self, x):
        return forward(self, x)

    def gradient(self, x):
        return input_gradient(self, x)

    def value_and_gradient(self, x):
        return _value_and_grad(self, x)

    def to_dict(self):
        return {
            "architecture": self.architecture.to_dict(),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "input_shift": self.input_shift.tolist(),
            "input_scale": self.input_scale.tolist(),
            "boundary_factor": None if self.boundary_factor is None else self.boundary_factor.to_dict(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        arch = d["architecture"]
        return cls(
            PinnArchitecture(tuple(arch["layer_widths"]), arch["activation"], arch["hard_boundary"]),
            [np.asarray(w, dtype=float).reshape(o, i) for w, o, i in
             zip(d["weights"], arch["layer_widths"][1:], arch["layer_widths"][:-1])],
            [np.asarray(b, dtype=float) for b in d["biases"]],
            np.asarray(d["input_shift"], dtype=float),
            np.asarray(d["input_scale"], dtype=float),
            factor_from_dict(d.get("boundary_factor")),
            d.get("metadata", {}),
        )


def init_model(arch: PinnArchitecture, seed: int, box=None, boundary_factor=None) -> PinnModel:
    """Glorot-uniform weights and zero biases from a seeded generator.

    ``box`` (n, 2) sets the input normalization to map the box onto [-1, 1]^n.
    """
    rng = np.random.default_rng(seed)
    widths = arch.layer_widths
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    n = widths[0]
    if box is None:
        shift, scale = np.zeros(n), np.ones(n)
    else:
        box = np.asarray(box, dtype=float)
        shift, scale = box.mean(axis=1), 0.5 * (box[:, 1] - box[:, 0])
    if arch.hard_boundary and boundary_factor is None:
        raise ValueError("hard boundary mode needs a boundary factor")
    return PinnModel(arch, weights, biases, shift, scale, boundary_factor if arch.hard_boundary else None)


def _prepare(model, x):
    """Flatten (..., n) to (N, n); returns the flat array and the leading shape."""
    x = np.asarray(x, dtype=float)
    n = model.architecture.layer_widths[0]
    if x.ndim == 0 or x.shape[-1] != n:
        raise ValueError(f"input must have {n} entries, got shape {x.shape}")
    return x.reshape(-1, n), x.shape[:-1]


def _net(model, x, with_jacobian):
    """Raw network output (N,) and, optionally, its input gradient (N, n) plus the tape.

    Jacobians are laid out as (n, N, width) so each layer is one batched matmul.
    """
    a = (x - model.input_shift) / model.input_scale
    n = x.shape[1]
    J = (np.eye(n) / model.input_scale[:, None])[:, None, :] if with_jacobian else None
    tape = []
    dz_prev = None
    L = len(model.weights)
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ W.T + b
        dz = None
        if with_jacobian:
            dz = J @ W.T if J.shape[1] == 1 else (J.reshape(-1, J.shape[2]) @ W.T).reshape(n, len(x), -1)
        tape.append((a, J, dz_prev))
        dz_prev = dz
        if l < L - 1:
            a = np.tanh(z)
            if with_jacobian:
                J = (1.0 - a * a) * dz
        else:
            a, J = z, dz
    y = a[:, 0]
    grad = np.broadcast_to(J[:, :, 0], (n, len(x))).T if with_jacobian else None
    return y, grad, tape


def _value_and_grad(model, x):
    x, lead = _prepare(model, x)
    y, gy, _ = _net(model, x, True)
    if model.boundary_factor is not None:
        F, gF = model.boundary_factor.value_and_gradient(x)
        gy = F[:, None] * gy + y[:, None] * gF
        y = F * y
    if lead == ():
        return y[0], gy[0]
    return y.reshape(lead), gy.reshape(lead + (x.shape[1],))


def forward(model: PinnModel, x) -> np.ndarray:
    x, lead = _prepare(model, x)
    y, _, _ = _net(model, x, False)
    if model.boundary_factor is not None:
        y = model.boundary_factor.value(x) * y
    return y[0] if lead == () else y.reshape(lead)


def input_gradient(model: PinnModel, x) -> np.ndarray:
    return _value_and_grad(model, x)[1]


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class TrainingConfig:
    lambda_bc: float = 10.0
    auto_lambda: bool = False
    learning_rate: float = 1e-3
    learning_rate_final: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    iterations: int = 20000
    loss_target: float = 0.0
    seed: int = 0
    log_every: int = 0

    def __post_init__(self):
        if self.lambda_bc <= 0:
            raise ValueError("lambda_bc must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TrainingData:
    x_phy: np.ndarray
    grad_target: np.ndarray
    x_bc: np.ndarray
    value_target: np.ndarray

    @classmethod
    def from_design(cls, designed):
        x_bc = np.asarray(designed.boundary_points, dtype=float)
        return cls(
            np.asarray(designed.physics_points, dtype=float),
            np.asarray(designed.gradient, dtype=float),
            x_bc,
            np.zeros(len(x_bc)),
        )


@dataclass
class _FactorCache:
    F_phy: np.ndarray | None = None
    gF_phy: np.ndarray | None = None


def _backward(model, tape, a_bar, dz_bar_out):
    """Reverse pass over the value/Jacobian forward computation.

    ``a_bar`` is the cotangent of the raw output (N,), ``dz_bar_out`` that of
    the output Jacobian (N, n) or None. Returns gradients for weights and biases.
    """
    L = len(model.weights)
    gW = [None] * L
    gb = [None] * L
    z_bar = a_bar[:, None]
    dz_bar = None if dz_bar_out is None else dz_bar_out.T[:, :, None]
    for l in range(L - 1, -1, -1):
        W = model.weights[l]
        a_in, J_in, dz_prev = tape[l]
        gW[l] = z_bar.T @ a_in
        gb[l] = z_bar.sum(axis=0)
        if dz_bar is not None:
            if J_in.shape[1] == 1:
                gW[l] = gW[l] + np.einsum("nj,ni->ji", dz_bar.sum(axis=1), J_in[:, 0, :])
            else:
                w_out, w_in = W.shape
                gW[l] = gW[l] + dz_bar.reshape(-1, w_out).T @ J_in.reshape(-1, w_in)
        if l == 0:
            break
        a_bar_in = z_bar @ W
        # a_in = tanh(z_prev), J_in = (1 - a_in^2) * dz_prev
        sech2 = 1.0 - a_in * a_in
        z_bar = a_bar_in * sech2
        if dz_bar is not None:
            J_bar_in = (dz_bar.reshape(-1, W.shape[0]) @ W).reshape(dz_bar.shape[:2] + (W.shape[1],))
            z_bar = z_bar + (J_bar_in * dz_prev).sum(axis=0) * (-2.0 * a_in * sech2)
            dz_bar = J_bar_in * sech2
    return gW, gb


def _loss_parts(model, data, lam, cache=None, need_grad=True):
    N_phy = len(data.x_phy)
    N_bc = len(data.x_bc)
    hard = model.boundary_factor is not None
    y, gy, tape = _net(model, data.x_phy, True)
    if hard:
        if cache is not None and cache.F_phy is not None:
            F, gF = cache.F_phy, cache.gF_phy
        else:
            F, gF = model.boundary_factor.value_and_gradient(data.x_phy)
            if cache is not None:
                cache.F_phy, cache.gF_phy = F, gF
        grad = F[:, None] * gy + y[:, None] * gF
    else:
        grad = gy
    r = grad - data.grad_target
    E_phy = float(np.mean(np.sum(r * r, axis=1))) if N_phy else 0.0
    E_bc = 0.0
    if not hard and N_bc:
        yb, _, tape_bc = _net(model, data.x_bc, False)
        rb = yb - data.value_target
        E_bc = float(np.mean(rb * rb))
    total = lam * E_bc + E_phy
    if not need_grad:
        return E_phy, E_bc, total, None
    c_grad = 2.0 * r / max(N_phy, 1)
    if hard:
        a_bar = np.einsum("kn,kn->k", c_grad, gF)
        dz_bar = F[:, None] * c_grad
    else:
        a_bar = np.zeros(N_phy)
        dz_bar = c_grad
    gW, gb = _backward(model, tape, a_bar, dz_bar)
    if not hard and N_bc:
        gWb, gbb = _backward(model, tape_bc, lam * 2.0 * rb / N_bc, None)
        gW = [a + b for a, b in zip(gW, gWb)]
        gb = [a + b for a, b in zip(gb, gbb)]
    return E_phy, E_bc, total, gW + gb


def loss_and_weight_gradients(model: PinnModel, designed, config: TrainingConfig = TrainingConfig()):
    """(E_phy, E_bc, E, dE/dparams) with params ordered as ``model.params``.

    ``designed`` is a DesignedGradient or a TrainingData.
    """
    data = designed if isinstance(designed, TrainingData) else TrainingData.from_design(designed)
    return _loss_parts(model, data, config.lambda_bc)


# ---------------------------------------------------------------------------
# training


def train(designed, arch: PinnArchitecture, config: TrainingConfig = TrainingConfig(), *, box=None,
          boundary_factor=None) -> PinnModel:
    """Adam on the combined loss from a seeded initialization.

    Deterministic given (data, arch, config). Raises Diverged on a non-finite loss.
    """
    data = designed if isinstance(designed, TrainingData) else TrainingData.from_design(designed)
    if len(data.x_phy) == 0:
        raise ValueError("empty collocation set")
    model = init_model(arch, config.seed, box=box, boundary_factor=boundary_factor)
    params = model.params
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    lam = config.lambda_bc
    cache = _FactorCache()
    ema_phy = ema_bc = None
    t0 = time.perf_counter()
    E_phy, E_bc, total, _ = _loss_parts(model, data, lam, cache, need_grad=False)
    initial = (E_phy, E_bc, total)
    history = []
    it = 0
    lr0 = config.learning_rate
    lr1 = config.learning_rate_final if config.learning_rate_final is not None else lr0
    for it in range(1, config.iterations + 1):
        E_phy, E_bc, total, grads = _loss_parts(model, data, lam, cache)
        if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads):
            raise Diverged(f"non-finite loss at iteration {it}")
        if total < config.loss_target:
            break
        frac = (it - 1) / max(config.iterations - 1, 1)
        lr = lr0 * (lr1 / lr0) ** frac
        b1t = 1.0 - config.beta1**it
        b2t = 1.0 - config.beta2**it
        for p, g, a, v in zip(params, grads, m1, m2):
            a *= config.beta1
            a += (1.0 - config.beta1) * g
            v *= config.beta2
            v += (1.0 - config.beta2) * g * g
            p -= lr * (a / b1t) / (np.sqrt(v / b2t) + config.adam_eps)
        if config.auto_lambda and model.boundary_factor is None and E_bc > 0:
            ema_phy = E_phy if ema_phy is None else 0.99 * ema_phy + 0.01 * E_phy
            ema_bc = E_bc if ema_bc is None else 0.99 * ema_bc + 0.01 * E_bc
            if it % 100 == 0:
                lam = float(np.clip(config.lambda_bc * np.sqrt(ema_phy / ema_bc), config.lambda_bc, 1e4))
        if config.log_every and it % config.log_every == 0:
            history.append([it, E_phy, E_bc, total])
            log.info("iter %d  E_phy %.3e  E_bc %.3e  E %.3e", it, E_phy, E_bc, total)
    E_phy, E_bc, total, _ = _loss_parts(model, data, lam, cache, need_grad=False)
    if not np.isfinite(total):
        raise Diverged("non-finite final loss")
    log.info("trained %d iterations in %.1f s, E_phy %.3e E_bc %.3e", it, time.perf_counter() - t0, E_phy, E_bc)
    model.metadata = {
        "seed": config.seed,
        "iterations": it,
        "lambda_bc": lam,
        "initial_losses": {"E_phy": initial[0], "E_bc": initial[1], "E": initial[2]},
        "final_losses": {"E_phy": E_phy, "E_bc": E_bc, "E": total},
        "history": history,
    }
    return model


def with_metadata(model: PinnModel, **extra) -> PinnModel:
    meta = dict(model.metadata)
    meta.update(extra)
    return replace(model, metadata=meta)
