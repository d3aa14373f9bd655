"""Command-line driver: synthesize, analyze, simulate, compare, export.

    cbf-forge <command> [--config PATH] [--preset NAME] [--seed N] [--out DIR]

Every file is written under ``--out``. Exit codes are listed in EXIT_CODES.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import persistence as store
from .dynamics import system_from_config
from .gradient_design import InfeasibleDesign, NonConvergence
from .pinn import Diverged
from .pipeline import PRESETS, ConfigError, derived_seeds, load_config, synthesize
from .relative_degree import scan_inactivity
from .safe_sets import safe_set_from_spec
from .safety_filter import single_cbf_filter
from .sim import SimulationConfig, policy_from_dict, run_closed_loop, trace_csv, trace_metrics

log = logging.getLogger("cbf_forge")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_DIVERGED = 4
EXIT_ESCAPE = 5
EXIT_ARTIFACT = 6
EXIT_CODES = {
    EXIT_OK: "success",
    EXIT_CONFIG: "configuration error",
    EXIT_INFEASIBLE: "infeasible gradient design",
    EXIT_DIVERGED: "training diverged",
    EXIT_ESCAPE: "simulation left the admissible box",
    EXIT_ARTIFACT: "unreadable or corrupted artifact",
}

MANIFEST = "manifest.json"


class SimulationEscape(RuntimeError):
    pass


def worker_count() -> int:
    raw = os.environ.get("CBF_FORGE_THREADS")
    if raw is None:
        return max(1, min(2, os.cpu_count() or 1))
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CBF_FORGE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("CBF_FORGE_THREADS must be at least 1")
    return n


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(json.loads(store.canonical_json(obj)), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synthesize(cfg: dict, out: Path, echo=print, keep_audit: bool = False) -> dict:
    """Run the pipeline and write models, designs, partition and the filter manifest.

    ``keep_audit`` keeps the audit-grid tables on the returned result; they
    are never written to disk.
    """
    out.mkdir(parents=True, exist_ok=True)
    (out / "models").mkdir(exist_ok=True)
    (out / "designs").mkdir(exist_ok=True)
    res = synthesize(cfg, keep_audit=keep_audit)
    seeds = derived_seeds(cfg["seed"])
    chain = [cfg["seed"]] + [seeds[k] for k in sorted(seeds)]
    hashes = {
        "safe_set": store.save(res.desired_set, out / "safe_set.json", seed_chain=chain),
        "partition": store.save(res.partition, out / "partition.json", seed_chain=chain),
    }
    entries = []
    for design, model, summary in zip(res.designs, res.models, res.summaries):
        q = design.q
        d_hash = store.save(design, out / "designs" / f"d_{q:02d}.json", seed_chain=chain)
        m_hash = store.save(model, out / "models" / f"h_{q:02d}.json", seed_chain=chain)
        entries.append({"q": q, "label": f"h_{q}", "file": f"models/h_{q:02d}.json", "hash": m_hash,
                        "design_file": f"designs/d_{q:02d}.json", "design_hash": d_hash,
                        "kappa": design.theta, "epsilon": design.epsilon})
        echo(f"h_{q}: theta={design.theta:.4g} eps={design.epsilon:.4g} "
             f"E_phy={summary['final_losses'].get('E_phy', float('nan')):.3e} "
             f"max|H|bc={summary['boundary_residual_max']:.2e} "
             f"phys_rel={summary['physics_residual_mean']:.4f} "
             f"min|LgH|/eps={summary['min_abs_lg_over_eps']:.3f}")
    manifest = {
        "system": res.system.config,
        "desired_set": res.desired_set.spec,
        "models": entries,
        "infeasible_policy": cfg["infeasible_policy"],
        "provenance": list(res.partition.provenance),
        "config": cfg,
        "artifacts": hashes,
    }
    hashes["manifest"] = store.save(manifest, out / MANIFEST, kind=store.KIND_MANIFEST, seed_chain=chain)
    _write_json(out / "synthesis_summary.json", {"summaries": res.summaries, "hashes": hashes})
    echo(f"wrote {len(entries)} models and {MANIFEST} to {out}")
    return {"result": res, "hashes": hashes, "manifest": out / MANIFEST}


def _report_files(report, out: Path, stem: str) -> None:
    store.save(report, out / f"{stem}.json")
    (out / f"{stem}.csv").write_text(report.to_csv())


def cmd_analyze(cfg: dict, out: Path, manifest: Path | None = None, resolution: int = 200, echo=print) -> dict:
    """Inactivity scan of the desired set, or of every CBF in a manifest at tol = eps/2."""
    out.mkdir(parents=True, exist_ok=True)
    if manifest is None:
        system = system_from_config(cfg["system"])
        desired = safe_set_from_spec(cfg["safe_set"])
        report = scan_inactivity(system, desired, resolution)
        _report_files(report, out, "inactivity_desired")
        echo(f"desired set: {len(report.points)} zero-locus points "
             f"({len(report.boundary_points)} on the boundary, {len(report.interior_points)} interior)")
        return {"desired": report}
    flt, desired, man = store.load_filter(manifest)
    reports = {}
    for entry, cbf in zip(man["models"], flt.cbfs):
        report = scan_inactivity(flt.system, cbf.barrier, resolution, tol=0.5 * float(entry["epsilon"]))
        _report_files(report, out, f"inactivity_{entry['label']}")
        reports[entry["label"]] = report
        echo(f"{entry['label']}: {len(report.points)} points with |L_g h| < eps/2")
    return reports


def _simulate(system, policy, flt, sim_cfg, desired):
    trace = run_closed_loop(system, policy, flt, sim_cfg, desired)
    return trace, trace_metrics(trace, desired)


def cmd_simulate(cfg: dict, out: Path, manifest: Path | None = None, mode: str = "auto", echo=print) -> dict:
    """Closed-loop run with the multi-CBF filter (manifest), the single CBF, or no filter."""
    out.mkdir(parents=True, exist_ok=True)
    system = system_from_config(cfg["system"])
    desired = safe_set_from_spec(cfg["safe_set"])
    if mode == "auto":
        mode = "multi" if manifest is not None else "single"
    if mode == "multi":
        if manifest is None:
            raise ConfigError("the multi-CBF filter needs --manifest")
        flt, desired, _ = store.load_filter(manifest, cfg["infeasible_policy"])
    elif mode == "single":
        flt = single_cbf_filter(desired, system, cfg["single_cbf_kappa"], cfg["infeasible_policy"])
    elif mode == "none":
        flt = None
    else:
        raise ConfigError(f"unknown filter mode {mode!r}")
    sim_cfg = SimulationConfig.from_dict(cfg["simulation"])
    trace, metrics = _simulate(system, policy_from_dict(cfg["policy"]), flt, sim_cfg, desired)
    metrics["filter"] = mode
    (out / f"trace_{mode}.csv").write_text(trace_csv(trace))
    _write_json(out / f"metrics_{mode}.json", metrics)
    echo(f"{mode}: min h_des={metrics['min_h_desired']:.4g} violations={metrics['violation_steps']} "
         f"chattering={metrics['chattering_index']:.4g} escaped={metrics['escaped']}")
    return {"trace": trace, "metrics": metrics}


def _dat(path: Path, header: str, cols) -> None:
    arr = np.column_stack(cols)
    lines = [f"# {header}"] + [" ".join(repr(float(v)) for v in row) for row in arr]
    path.write_text("\n".join(lines) + "\n")


GNUPLOT = """\
set terminal pngcairo size 1200,900
set output 'compare.png'
set multiplot layout 2,2
set title 'phase plane'
set xlabel 'x0'; set ylabel 'x1'
plot 'boundary.dat' w l lc 'black' t 'desired boundary', \\
     'zero_locus.dat' w p pt 7 ps 0.3 lc 'gray' t 'L_g h = 0', \\
     'phase_single.dat' w l lc 'red' t 'single CBF', \\
     'phase_multi.dat' w l lc 'blue' t 'multi CBF'
set title 'filtered input'
set xlabel 't'; set ylabel 'u'
plot 'input.dat' u 1:2 w l lc 'red' t 'single', '' u 1:3 w l lc 'blue' t 'multi'
set title 'desired h'
set ylabel 'h'
plot 'h.dat' u 1:2 w l lc 'red' t 'single', '' u 1:3 w l lc 'blue' t 'multi', 0 lc 'black' notitle
unset multiplot
"""


def _boundary_polyline(desired, box, resolution=400):
    from skimage.measure import find_contours

    box = np.asarray(box, dtype=float)
    axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    polys = []
    for c in find_contours(desired.value(X), 0.0):
        polys.append(box[:, 0] + c * (box[:, 1] - box[:, 0]) / (resolution - 1))
    return polys


def cmd_compare(cfg: dict, out: Path, manifest: Path | None = None, echo=print) -> dict:
    """Single- vs multi-CBF runs from the same initial state, with gnuplot data files."""
    out.mkdir(parents=True, exist_ok=True)
    if manifest is None:
        manifest = cmd_synthesize(cfg, out / "synthesis", echo=echo)["manifest"]
    system = system_from_config(cfg["system"])
    desired = safe_set_from_spec(cfg["safe_set"])
    multi, _, _ = store.load_filter(manifest, cfg["infeasible_policy"])
    single = single_cbf_filter(desired, system, cfg["single_cbf_kappa"], cfg["infeasible_policy"])
    sim_cfg = SimulationConfig.from_dict(cfg["simulation"])
    policy = policy_from_dict(cfg["policy"])
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        jobs = {name: pool.submit(_simulate, system, policy, flt, sim_cfg, desired)
                for name, flt in (("single", single), ("multi", multi))}
        runs = {name: job.result() for name, job in jobs.items()}
    metrics = {name: m for name, (_, m) in runs.items()}
    ratio = metrics["single"]["chattering_index"] / max(metrics["multi"]["chattering_index"], 1e-300)
    report = {"single": metrics["single"], "multi": metrics["multi"], "chattering_ratio": ratio,
              "initial_state": list(sim_cfg.initial_state), "policy": policy.to_dict()}
    _write_json(out / "compare_metrics.json", report)
    for name, (trace, _) in runs.items():
        (out / f"trace_{name}.csv").write_text(trace_csv(trace))
        if system.state_dim == 2:
            _dat(out / f"phase_{name}.dat", "x0 x1", [trace.x[:, 0], trace.x[:, 1]])
    ts, tm = runs["single"][0], runs["multi"][0]
    n = min(len(ts), len(tm))
    _dat(out / "input.dat", "t u_single u_multi", [tm.t[:n], ts.u_filtered[:n, 0], tm.u_filtered[:n, 0]])
    _dat(out / "h.dat", "t h_single h_multi", [tm.t[:n], ts.h_desired[:n], tm.h_desired[:n]])
    if system.state_dim == 2:
        locus = scan_inactivity(system, desired, 200)
        pts = locus.points if len(locus.points) else np.zeros((0, 2))
        _dat(out / "zero_locus.dat", "x0 x1", [pts[:, 0], pts[:, 1]])
        lines = ["# x0 x1"]
        for poly in _boundary_polyline(desired, system.admissible_box):
            lines += [f"{p[0]!r} {p[1]!r}" for p in poly] + [""]
        (out / "boundary.dat").write_text("\n".join(lines) + "\n")
        (out / "compare.gp").write_text(GNUPLOT)
    echo(f"single: min h_des={metrics['single']['min_h_desired']:.4g} "
         f"chattering={metrics['single']['chattering_index']:.4g}")
    echo(f"multi:  min h_des={metrics['multi']['min_h_desired']:.4g} "
         f"chattering={metrics['multi']['chattering_index']:.4g}")
    echo(f"chattering ratio single/multi = {ratio:.4g}")
    return {"report": report, "traces": {k: v[0] for k, v in runs.items()}, "manifest": manifest}


def cmd_export(manifest: Path, out: Path, resolution: int = 101, echo=print) -> dict:
    """Grid values of every CBF and the desired set as gnuplot-ready .dat files."""
    out.mkdir(parents=True, exist_ok=True)
    flt, desired, man = store.load_filter(manifest)
    box = flt.system.admissible_box
    axes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    cols = [X[:, i] for i in range(X.shape[1])]
    names = ["h_des"] + [c.label for c in flt.cbfs]
    values = [desired.value(X)] + [c.barrier.value(X) for c in flt.cbfs]
    lines = ["# " + " ".join([f"x{i}" for i in range(X.shape[1])] + names)]
    block = resolution if X.shape[1] == 2 else len(X)
    arr = np.column_stack(cols + values)
    for i, row in enumerate(arr):
        lines.append(" ".join(repr(float(v)) for v in row))
        if X.shape[1] == 2 and (i + 1) % block == 0:
            lines.append("")
    (out / "cbf_grid.dat").write_text("\n".join(lines) + "\n")
    _write_json(out / "export_index.json", {"columns": names, "resolution": resolution,
                                             "models": [e["file"] for e in man["models"]]})
    echo(f"exported {len(names)} functions on a {resolution}-point grid to {out / 'cbf_grid.dat'}")
    return {"columns": names}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cbf-forge", description="Multi-CBF synthesis and safety-filter experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=False):
        sp.add_argument("--config", type=Path, help="experiment config JSON (merged over the preset)")
        sp.add_argument("--preset", choices=PRESETS, help="built-in experiment preset")
        sp.add_argument("--seed", type=int, help="master seed; overrides the config")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
        if manifest:
            sp.add_argument("--manifest", type=Path, help="filter manifest from a synthesize run")

    common(sub.add_parser("synthesize", help="build the multi-CBF family"))
    a = sub.add_parser("analyze", help="scan for states where L_g h vanishes")
    common(a, manifest=True)
    a.add_argument("--resolution", type=int, default=200)
    s = sub.add_parser("simulate", help="closed-loop simulation")
    common(s, manifest=True)
    s.add_argument("--filter", choices=("auto", "multi", "single", "none"), default="auto")
    common(sub.add_parser("compare", help="single- vs multi-CBF comparison"), manifest=True)
    e = sub.add_parser("export", help="grid values of a manifest's CBFs")
    common(e, manifest=True)
    e.add_argument("--resolution", type=int, default=101)
    return p


def _config(args) -> dict:
    overrides = {"seed": args.seed} if args.seed is not None else None
    if args.config is None and args.preset is None and args.command != "export":
        raise ConfigError("give --preset or --config")
    if args.command == "export" and args.config is None and args.preset is None:
        return {}
    return load_config(args.config, args.preset, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = args.out
        if args.command == "synthesize":
            cmd_synthesize(cfg, out)
        elif args.command == "analyze":
            cmd_analyze(cfg, out, args.manifest, args.resolution)
        elif args.command == "simulate":
            res = cmd_simulate(cfg, out, args.manifest, args.filter)
            if res["metrics"]["escaped"]:
                raise SimulationEscape("state left the admissible box")
        elif args.command == "compare":
            cmd_compare(cfg, out, args.manifest)
        elif args.command == "export":
            if args.manifest is None:
                raise ConfigError("export needs --manifest")
            cmd_export(args.manifest, out, args.resolution)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleDesign, NonConvergence) as exc:
        where = f" (CBF {getattr(exc, 'q', '?')}, point {getattr(exc, 'point', None)})"
        print(f"infeasible design: {exc}{where}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Diverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except SimulationEscape as exc:
        print(f"simulation escape: {exc}", file=sys.stderr)
        return EXIT_ESCAPE
    except store.ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
