"""Experiment stages and their artifact files.

Each stage reads the files of its upstream stages from the output directory
and writes its own, so stages can be run separately.  Per coarse size the
files live under ``H<coarse_n>/``::

    upscale.json  tensors.npz        upscale
    plan.json     eigen.json/.csv    split
    stability.json                   stability
    monitor_<scheme>.csv             stability (energy per step)
    stability_sweep.json/.csv        stability (with a contrast sweep)
    run.json  solve_<scheme>.npz     solve
    reference.npz                    reference
    errors.json  errors_<scheme>.csv errors

``report.json`` at the top level merges all JSON files plus provenance.
Nothing written depends on wall-clock time.
"""
from __future__ import annotations

import csv
import json
import logging
import platform
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy
import sklearn

from . import __version__
from .assembly import gaussian_source
from .config import ExperimentConfig, auto_cuts, json_default
from .exceptions import ConfigurationError
from .geometry import MeshHierarchy, build_hierarchy
from .macrosystem import (
    assemble_macro,
    estimate_C1,
    n_steps,
    run_transient,
    stability_report,
    tau_bounds,
)
from .media import CoefficientField, ContinuumSet, continua_by_threshold, continua_union, continua_with_linear, generate_field
from .postprocess import project_back, relative_errors
from .reference import FineTrajectory, solve_reference
from .split import SelectionPolicy, SplitPlan, aggregate, manual_plan, spectral_split
from .upscale import TensorStack, UpscaleStats, upscale_all

logger = logging.getLogger(__name__)

STAGES = ("upscale", "split", "stability", "solve", "reference", "errors")


class MissingArtifact(FileNotFoundError):
    """An upstream stage has not produced a required file."""


def write_json(path: Path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=json_default) + "\n")


def read_json(path: Path, stage: str):
    if not path.exists():
        raise MissingArtifact(f"missing {path} (run the '{stage}' stage first)")
    return json.loads(path.read_text())


def _require_file(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {path} (run the '{stage}' stage first)")
    return path


@dataclass
class Setup:
    """Mesh, field and continua of one coarse size (cheap to rebuild)."""

    mesh: MeshHierarchy
    field: CoefficientField
    continua: ContinuumSet
    layers: int


def build_continua(cfg: ExperimentConfig, field: CoefficientField, mesh: MeshHierarchy) -> ContinuumSet:
    spec = cfg.continua
    cuts = spec.get("cuts", "auto")
    values = np.unique(field.values)
    cuts = auto_cuts(values) if cuts == "auto" else [float(c) for c in cuts]
    base = continua_by_threshold(field, cuts, mesh)
    if spec["kind"] == "union":
        return continua_union(base, [[i - 1 for i in u] for u in spec["unions"]], mesh)
    if spec["kind"] == "linear":
        return continua_with_linear(base, mesh, 0 if spec.get("direction", "x1") == "x1" else 1)
    return base


def setup(cfg: ExperimentConfig, coarse_n: int, contrast: float | None = None) -> Setup:
    mesh = build_hierarchy(cfg.fine_n, coarse_n)
    field = generate_field(cfg.field_spec(contrast), mesh)
    return Setup(mesh, field, build_continua(cfg, field, mesh), cfg.layers_for(coarse_n))


def _source(cfg):
    return gaussian_source if cfg.source == "gaussian" else None


def size_dir(out: Path, coarse_n: int) -> Path:
    return Path(out) / f"H{coarse_n}"


# ---------------------------------------------------------------------------
# stages


def compute_tensors(cfg: ExperimentConfig, s: Setup, cache_dir=None, n_jobs: int = 1):
    stats = UpscaleStats()
    results = upscale_all(
        s.mesh, s.field, s.continua, s.layers, cache_dir=cache_dir, source=_source(cfg),
        source_tag=cfg.source, n_jobs=n_jobs, stats=stats, boundary=cfg.boundary,
    )
    worst = max(basis.constraint_residual for basis, _ in results.values())
    return TensorStack.from_results(results), worst, stats


def stage_upscale(cfg, coarse_n, out, cache_dir=None, n_jobs=1):
    s = setup(cfg, coarse_n)
    ts, worst, _ = compute_tensors(cfg, s, cache_dir, n_jobs)
    d = size_dir(out, coarse_n)
    d.mkdir(parents=True, exist_ok=True)
    ts.save(d / "tensors.npz")
    info = {
        "coarse_n": coarse_n,
        "H": s.mesh.H,
        "fine_n": cfg.fine_n,
        "layers": s.layers,
        "N": s.continua.N,
        "labels": list(s.continua.labels),
        "boundary": cfg.boundary,
        "max_constraint_residual": worst,
        "contrast": s.field.contrast,
    }
    write_json(d / "upscale.json", info)
    return info


def load_tensors(out, coarse_n) -> TensorStack:
    return TensorStack.load(_require_file(size_dir(out, coarse_n) / "tensors.npz", "upscale"))


def make_plan(cfg: ExperimentConfig, ts: TensorStack, coarse_n: int, tau: float | None = None) -> SplitPlan:
    agg = aggregate(ts.A, ts.M, ts.C)
    if cfg.split["method"] == "manual":
        return manual_plan(ts.N, [i - 1 for i in cfg.split["slow"]], agg)
    policy = dict(cfg.split.get("policy", {}))
    if policy.get("kind") == "target_tau":
        policy.setdefault("tau", tau if tau is not None else cfg.tau)
        policy.setdefault("H", 1.0 / coarse_n)
        policy.setdefault("C1", estimate_C1(coarse_n))
    return spectral_split(agg, SelectionPolicy(**policy), fallback=bool(cfg.split.get("fallback", True)))


def eigen_rows(plan: SplitPlan, coarse_n: int, layers: int):
    vecs = plan.eigenvectors if plan.eigenvectors is not None else plan.v
    return [
        {"H": 1.0 / coarse_n, "layers": layers, "lambda": float(lam), "v": [float(x) for x in vec]}
        for lam, vec in zip(plan.eigenvalues, vecs)
    ]


def stage_split(cfg, coarse_n, out):
    d = size_dir(out, coarse_n)
    info = read_json(d / "upscale.json", "upscale")
    plan = make_plan(cfg, load_tensors(out, coarse_n), coarse_n)
    write_json(d / "plan.json", plan.to_dict())
    rows = eigen_rows(plan, coarse_n, info["layers"])
    write_json(d / "eigen.json", rows)
    with (d / "eigen.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["H", "layers", "lambda"] + [f"v{i + 1}" for i in range(plan.N)])
        for r in rows:
            w.writerow([repr(r["H"]), r["layers"], repr(r["lambda"])] + [repr(x) for x in r["v"]])
    return plan


def load_plan(out, coarse_n) -> SplitPlan:
    return SplitPlan.from_dict(read_json(size_dir(out, coarse_n) / "plan.json", "split"))


def stability_for(cfg, ts: TensorStack, plan: SplitPlan, mesh: MeshHierarchy) -> dict:
    agg = aggregate(ts.A, ts.M, ts.C)
    sys = assemble_macro(mesh, ts, plan, cfg.mass_form)
    if plan.i0 == 0:
        return {"i0": 0, "note": "no explicit component"}
    return stability_report(sys, mesh, agg).to_dict()


def stage_stability(cfg, coarse_n, out, cache_dir=None, n_jobs=1):
    d = size_dir(out, coarse_n)
    ts, plan = load_tensors(out, coarse_n), load_plan(out, coarse_n)
    mesh = build_hierarchy(cfg.fine_n, coarse_n)
    rep = stability_for(cfg, ts, plan, mesh)
    write_json(d / "stability.json", rep)
    if rep.get("tau_energy_1"):
        write_monitors(cfg, ts, plan, mesh, rep, d)
    if cfg.contrast_sweep:
        sweep = contrast_sweep(cfg, coarse_n, cache_dir, n_jobs)
        write_json(d / "stability_sweep.json", sweep)
        write_sweep_csv(d / "stability_sweep.csv", sweep)
    return rep


MONITOR_STEPS = 50


def write_monitors(cfg, ts, plan, mesh, rep, d: Path):
    """Energy functional per step for schemes 1 and 2 with zero load.

    Starts from a seeded random state at ``0.9 x`` each scheme's
    energy-estimate step bound; writes ``monitor_<scheme>.csv``.
    """
    sys = assemble_macro(mesh, ts, plan, cfg.mass_form)
    rng = np.random.default_rng(cfg.seed)
    U0 = rng.standard_normal(sys.size)
    zero = np.zeros(sys.size)
    for scheme, key in (("scheme1", "tau_energy_1"), ("scheme2", "tau_energy_2")):
        tau = 0.9 * rep[key]
        tr = run_transient(sys, scheme, tau, MONITOR_STEPS * tau, U0=U0, monitor=True, gamma=rep["gamma"], F=zero)
        with (d / f"monitor_{scheme}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "value"])
            for n, val in enumerate(tr.monitor):
                w.writerow([n, repr(float(val))])


def contrast_sweep(cfg, coarse_n, cache_dir=None, n_jobs=1) -> list[dict]:
    """Stability ratios for each contrast of ``cfg.contrast_sweep``."""
    rows = []
    for c in cfg.contrast_sweep:
        s = setup(cfg, coarse_n, contrast=c)
        ts, _, _ = compute_tensors(cfg, s, cache_dir, n_jobs)
        plan = make_plan(cfg, ts, coarse_n)
        rep = stability_for(cfg, ts, plan, s.mesh)
        rows.append({"contrast": float(c), **rep})
    return rows


def write_sweep_csv(path: Path, sweep: list[dict]):
    """Rows: (component, c-inclusive); columns: one per contrast."""
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity"] + [f"{r['contrast']:.0e}" for r in sweep])
        for key in ("ratio_1", "ratio_2", "ratio_1_c", "ratio_2_c"):
            w.writerow([key] + ["" if r.get(key) is None else repr(r[key]) for r in sweep])


def resolve_tau(cfg, plan: SplitPlan, ts: TensorStack, coarse_n: int, scheme: str, tau) -> float:
    """Numeric step, or ``0.9 * tau_k`` from the bounds for ``tau == "auto"``."""
    if tau is None:
        return cfg.tau
    if tau != "auto":
        return float(tau)
    if scheme not in ("scheme1", "scheme2"):
        raise ConfigurationError(f"--tau auto needs scheme1 or scheme2, got {scheme!r}")
    agg = aggregate(ts.A, ts.M, ts.C)
    tau1, tau2 = tau_bounds(plan, estimate_C1(coarse_n), 1.0 / coarse_n, agg)
    return 0.9 * (tau1 if scheme == "scheme1" else tau2)


def snapshot_every(cfg, tau: float) -> int:
    return max(1, n_steps(cfg.T, tau) // cfg.snapshots)


def stage_solve(cfg, coarse_n, out, schemes=None, tau=None):
    d = size_dir(out, coarse_n)
    ts, plan = load_tensors(out, coarse_n), load_plan(out, coarse_n)
    mesh = build_hierarchy(cfg.fine_n, coarse_n)
    sys = assemble_macro(mesh, ts, plan, cfg.mass_form)
    schemes = list(schemes or cfg.schemes)
    taus = {s: resolve_tau(cfg, plan, ts, coarse_n, s, tau) for s in schemes}
    if len(set(taus.values())) > 1:
        raise ConfigurationError("all schemes of one solve must share tau; run them separately")
    step = taus[schemes[0]]
    every = snapshot_every(cfg, step)
    runs = {}
    for scheme in schemes:
        tr = run_transient(sys, scheme, step, cfg.T, snapshot_every=every)
        U = project_back(tr.states, plan.v_hat)
        np.savez(d / f"solve_{scheme}.npz", times=tr.times, states=U, rate=tr.rate)
        runs[scheme] = {**tr.to_dict(), "final_rate": float(tr.rate[-1]) if len(tr.rate) else None}
    run = {"tau": step, "T": cfg.T, "snapshot_every": every, "schemes": runs}
    write_json(d / "run.json", run)
    return run


def stage_reference(cfg, coarse_n, out):
    d = size_dir(out, coarse_n)
    run = read_json(d / "run.json", "solve")
    s = setup(cfg, coarse_n)
    tau, every = run["tau"], run["snapshot_every"]
    steps = n_steps(cfg.T, tau)
    keep = sorted(set(range(0, steps + 1, every)) | {steps})
    ref = solve_reference(s.mesh, s.field, _source(cfg), tau, cfg.T, snapshot_steps=keep)
    np.savez(d / "reference.npz", tau=ref.tau, times=ref.times, snapshots=ref.snapshots, max_residual=ref.max_residual)
    return {"tau": tau, "snapshots": len(ref.times), "max_residual": ref.max_residual}


def load_reference(out, coarse_n) -> FineTrajectory:
    path = _require_file(size_dir(out, coarse_n) / "reference.npz", "reference")
    with np.load(path) as z:
        return FineTrajectory(float(z["tau"]), z["times"], z["snapshots"], float(z["max_residual"]))


def stage_errors(cfg, coarse_n, out):
    d = size_dir(out, coarse_n)
    run = read_json(d / "run.json", "solve")
    ref = load_reference(out, coarse_n)
    s = setup(cfg, coarse_n)
    summary = {}
    for scheme, info in run["schemes"].items():
        if info["diverged"]:
            summary[scheme] = {"diverged": True, "steps": info["steps"]}
            continue
        with np.load(_require_file(d / f"solve_{scheme}.npz", "solve")) as z:
            times, states = z["times"], z["states"]
        keep = times > 0
        es = relative_errors(times[keep], states[keep], ref, s.continua, s.mesh)
        es.to_csv(d / f"errors_{scheme}.csv")
        summary[scheme] = {"diverged": False, "final": [None if np.isnan(x) else float(x) for x in es.final()]}
    ok = [k for k, v in summary.items() if not v["diverged"]]
    if "implicit" in ok:
        base = np.loadtxt(d / "errors_implicit.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1:]
        for k in ok:
            if k != "implicit":
                other = np.loadtxt(d / f"errors_{k}.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1:]
                summary[k]["max_diff_to_implicit"] = float(np.nanmax(np.abs(other - base)))
    write_json(d / "errors.json", summary)
    return summary


def provenance(cfg: ExperimentConfig) -> dict:
    return {
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "versions": {
            "mcsplit": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__,
            "python": platform.python_version(),
        },
    }


def stage_report(cfg, out) -> dict:
    out = Path(out)
    report = {"config": cfg.to_dict(), "provenance": provenance(cfg), "sizes": {}}
    for cn in cfg.coarse_sizes:
        d = size_dir(out, cn)
        entry = {}
        for name in ("upscale", "plan", "eigen", "stability", "stability_sweep", "run", "errors"):
            p = d / f"{name}.json"
            if p.exists():
                entry[name] = json.loads(p.read_text())
        report["sizes"][f"H{cn}"] = entry
    failures = out / "failures.json"
    if failures.exists():
        report["failures"] = json.loads(failures.read_text())
    write_json(out / "report.json", report)
    return report


def run_all(cfg: ExperimentConfig, out, cache_dir=None, n_jobs=1, schemes=None, tau=None) -> list[dict]:
    """All stages for every coarse size; failures are collected, not raised.

    Returns the list of failures (empty on success); it is also written to
    ``failures.json`` when non-empty.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    for cn in cfg.coarse_sizes:
        stages = [
            ("upscale", lambda: stage_upscale(cfg, cn, out, cache_dir, n_jobs)),
            ("split", lambda: stage_split(cfg, cn, out)),
            ("stability", lambda: stage_stability(cfg, cn, out, cache_dir, n_jobs)),
            ("solve", lambda: stage_solve(cfg, cn, out, schemes, tau)),
            ("reference", lambda: stage_reference(cfg, cn, out)),
            ("errors", lambda: stage_errors(cfg, cn, out)),
        ]
        for name, fn in stages:
            try:
                fn()
            except Exception as err:  # keep going with the next coarse size
                logger.error("H%d %s failed: %s", cn, name, err)
                failures.append({"coarse_n": cn, "stage": name, "error": f"{type(err).__name__}: {err}"})
                break
    failures_path = out / "failures.json"
    if failures:
        write_json(failures_path, failures)
    elif failures_path.exists():
        failures_path.unlink()
    stage_report(cfg, out)
    return failures
