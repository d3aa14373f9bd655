"""End-to-end synthesis: boundary -> partition -> per-q (field, design, PINN) -> filter.

CBFs are built strictly in order q = 1..Q. CBF q's design sees the trained
networks of all j < q as prior constraints, both on the collocation points and
on the dense audit grid.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
from scipy.stats import qmc

from .dynamics import ControlAffineSystem, system_from_config
from .gradient_design import (
    BoundaryDesign,
    DesignedGradient,
    GradientDesignConfig,
    PriorConstraint,
    TargetGradientField,
    build_target_field,
    design_gradient,
)
from .pinn import PinnArchitecture, PinnModel, TrainingConfig, hard_boundary_factor, train
from .safe_sets import (
    DEFAULT_MIN_TILT,
    PARTITION_MARGIN,
    BoundaryPartition,
    BoundarySample,
    SafeSetFunction,
    partition_boundary,
    safe_set_from_spec,
    sample_boundary,
)
from .safety_filter import CbfModel, ClassKappa, MultiCbfFilter, single_cbf_filter

log = logging.getLogger(__name__)

PRESETS = ("himmelblau", "ellipsoid", "integrator", "halfspace")

DEFAULTS: dict[str, Any] = {
    "name": "experiment",
    "seed": 0,
    "Q": 1,
    "interior_point": None,
    "boundary": {"count": 2000, "resolution": 400, "margin": PARTITION_MARGIN, "min_tilt": DEFAULT_MIN_TILT},
    "boundary_design": {"boundary_offset": 0.02, "corner_offset": 0.05, "smoothing": 0.02},
    "design": {"theta_init": 5.0, "theta_max": 50.0},
    "collocation": {"count": 4096, "boundary_count": 512},
    "audit_resolution": 200,
    "architecture": {"depth": 2, "width": 16, "hard_boundary": True},
    "training": {"iterations": 3000, "learning_rate": 1e-3, "lambda_bc": 10.0},
    "simulation": {"filter_rate": 100.0, "substeps": 10, "duration": 20.0},
    "policy": {"kind": "constant-input", "u": [0.0]},
    "single_cbf_kappa": 1.0,
    "infeasible_policy": "hold-last",
}


class ConfigError(ValueError):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("cbf_forge").joinpath("presets", f"sim_{name}.json").read_text()
    return json.loads(text)


def load_config(path=None, preset=None, overrides=None) -> dict:
    """Merge defaults, an optional preset, an optional JSON file and explicit overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if preset:
        cfg = _merge(cfg, load_preset(preset))
    if path:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    for key in ("system", "safe_set"):
        if key not in cfg:
            raise ConfigError(f"config is missing {key!r} (use --preset or --config)")
    if not isinstance(cfg.get("seed"), int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    if int(cfg["Q"]) < 1:
        raise ConfigError("Q must be at least 1")
    try:
        system_from_config(cfg["system"])
        safe_set_from_spec(cfg["safe_set"])
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def derived_seeds(master: int) -> dict[str, int]:
    """Independent sub-seeds for every random stage, all fixed by the master seed."""
    names = ("boundary", "collocation", "boundary_points", "training")
    ss = np.random.SeedSequence(master).spawn(len(names))
    return {n: int(s.generate_state(1, dtype=np.uint32)[0]) for n, s in zip(names, ss)}


def audit_grid(box, resolution: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, resolution) for lo, hi in np.asarray(box, dtype=float)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))


def collocation_points(box, count: int, seed: int) -> np.ndarray:
    box = np.asarray(box, dtype=float)
    m = int(np.ceil(np.log2(max(count, 2))))
    u = qmc.Sobol(len(box), scramble=True, seed=seed).random_base2(m)[:count]
    return box[:, 0] + u * (box[:, 1] - box[:, 0])


def prior_constraint(model, theta: float, system: ControlAffineSystem, x) -> PriorConstraint:
    h, grad = model.value_and_gradient(x)
    ups = np.einsum("knm,kn->km", system.g(x), grad)
    lf = np.einsum("kn,kn->k", grad, system.f(x))
    return PriorConstraint(ups, lf, np.asarray(h, dtype=float), float(theta))


@dataclass
class SynthesisResult:
    config: dict
    seeds: dict
    system: ControlAffineSystem
    desired_set: SafeSetFunction
    sample: BoundarySample
    partition: BoundaryPartition
    fields: list[TargetGradientField] = field(default_factory=list)
    designs: list[DesignedGradient] = field(default_factory=list)
    models: list[PinnModel] = field(default_factory=list)
    audit_priors: list[list[PriorConstraint]] = field(default_factory=list)
    audit_points: np.ndarray | None = None
    summaries: list[dict] = field(default_factory=list)
    train_seconds: list[float] = field(default_factory=list)

    @property
    def thetas(self):
        return [d.theta for d in self.designs]

    def multi_filter(self, policy=None) -> MultiCbfFilter:
        cbfs = tuple(CbfModel(m, ClassKappa(d.theta), label=f"h_{d.q}") for m, d in zip(self.models, self.designs))
        return MultiCbfFilter(cbfs, self.system, policy or self.config["infeasible_policy"])

    def single_filter(self, policy=None) -> MultiCbfFilter:
        return single_cbf_filter(self.desired_set, self.system, self.config["single_cbf_kappa"],
                                 policy or self.config["infeasible_policy"])


def model_summary(model, design: DesignedGradient, fld: TargetGradientField, system, grid, rng) -> dict:
    """Fidelity and margin numbers for one trained CBF."""
    held_out = fld.boundary_points(500, rng)
    h_bc = np.abs(model.value(held_out)) if len(held_out) else np.zeros(1)
    sigma, target, valid = fld.evaluate(grid)
    H, dH = model.value_and_gradient(grid)
    ups = np.einsum("knm,kn->km", system.g(grid), dH)
    tab = design.audit if design.audit is not None else design.collocation
    ok = tab.valid
    rel = np.linalg.norm(dH[ok] - tab.gradient[ok], axis=1) / np.linalg.norm(tab.gradient[ok], axis=1) \
        if design.audit is not None else np.array([np.nan])
    return {
        "q": design.q,
        "theta": design.theta,
        "epsilon": design.epsilon,
        "boundary_residual_max": float(h_bc.max()),
        "physics_residual_mean": float(np.mean(rel)),
        "min_abs_lg_over_eps": float(np.min(np.abs(ups)) / design.epsilon),
        "final_losses": model.metadata.get("final_losses", {}),
        "design": design.metadata,
    }


def synthesize(cfg: dict, *, keep_audit: bool = True) -> SynthesisResult:
    """Run the sequential pipeline for ``cfg`` (a dict from ``load_config``)."""
    validate_config(cfg)
    seeds = derived_seeds(cfg["seed"])
    system = system_from_config(cfg["system"])
    desired = safe_set_from_spec(cfg["safe_set"])
    box = system.admissible_box
    bcfg = cfg["boundary"]
    sample = sample_boundary(desired, int(bcfg["count"]), seeds["boundary"], box=box,
                             interior_point=cfg.get("interior_point"), resolution=int(bcfg["resolution"]))
    partition = partition_boundary(sample, int(cfg["Q"]), margin=float(bcfg["margin"]), system=system,
                                   min_tilt=float(bcfg["min_tilt"]))
    log.info("partitioned %d boundary points into %d segments", len(sample), len(partition))
    bdesign = BoundaryDesign(min_tilt=float(bcfg["min_tilt"]), **cfg["boundary_design"])
    dcfg = GradientDesignConfig(**cfg["design"])
    X = collocation_points(box, int(cfg["collocation"]["count"]), seeds["collocation"])
    G = audit_grid(box, int(cfg["audit_resolution"]))
    arch_cfg = cfg["architecture"]
    arch = PinnArchitecture.hidden(system.state_dim, int(arch_cfg["depth"]), int(arch_cfg["width"]),
                                   bool(arch_cfg["hard_boundary"]))
    tcfg_base = dict(cfg["training"])
    bp_rng = np.random.default_rng(seeds["boundary_points"])
    res = SynthesisResult(cfg, seeds, system, desired, sample, partition, audit_points=G if keep_audit else None)
    prior_x: list[PriorConstraint] = []
    prior_g: list[PriorConstraint] = []
    for k, segment in enumerate(partition.segments):
        q = k + 1
        fld = build_target_field(segment, desired, system, bdesign)
        bp = fld.boundary_points(int(cfg["collocation"]["boundary_count"]), bp_rng)
        design = design_gradient(q, fld, system, X, dcfg, prior_x, audit=G, prior_audit=prior_g, boundary_points=bp)
        factor = hard_boundary_factor(segment, desired, fld) if arch.hard_boundary else None
        arch_q = arch if (factor is not None or not arch.hard_boundary) else PinnArchitecture(
            arch.layer_widths, arch.activation, False)
        tcfg = TrainingConfig(**dict(tcfg_base, seed=seeds["training"] + q))
        t0 = time.perf_counter()
        model = train(design, arch_q, tcfg, box=box, boundary_factor=factor)
        res.train_seconds.append(time.perf_counter() - t0)
        summary = model_summary(model, design, fld, system, G, np.random.default_rng([seeds["boundary_points"], q]))
        log.info("CBF %d: theta %.3g, eps %.3g, E_phy %.3e, min|LgH|/eps %.2f", q, design.theta, design.epsilon,
                 summary["final_losses"].get("E_phy", np.nan), summary["min_abs_lg_over_eps"])
        res.audit_priors.append(list(prior_g))
        prior_x.append(prior_constraint(model, design.theta, system, X))
        prior_g.append(prior_constraint(model, design.theta, system, G))
        res.fields.append(fld)
        res.designs.append(design if keep_audit else _strip_audit(design))
        res.models.append(model)
        res.summaries.append(summary)
    return res


def _strip_audit(design: DesignedGradient) -> DesignedGradient:
    return DesignedGradient(design.q, design.theta, design.epsilon, design.channel_signs, design.cone_axis,
                            design.collocation, None, design.boundary_points, design.metadata)
