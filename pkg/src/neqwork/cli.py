"""Command-line runner.

Exit codes: 0 when every acceptance band passes, 1 when a band fails (or a
replay diverges), 2 for configuration and other run-preventing errors.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend
from .config import ExperimentConfig, digest, load_json, observable_from_spec
from .errors import ConfigError, NeqworkError
from .estimator import convergence_study, jarzynski_estimate, weighted_observable_estimate
from .hamiltonian import canonical_expectation
from .protocol import StepProtocol
from .kernel import _propagate_block, discretize, worker_count
from .oracle import (brute_force_path_enumeration, check_stationarity, check_unit_ratio,
                     exact_bk_average, exact_exponential_work_average, exact_weighted_observable,
                     partition_ratio)

log = logging.getLogger("neqwork")

SCHEMA_VERSION = 1
ORACLE_TOL = 1e-12
CSV_COLUMNS = ("schema_version", "mode", "model", "n_samples", "grid_steps", "seed", "mean_exp_w",
               "stderr_exp_w", "delta_f_estimate", "stderr_delta_f", "delta_f_exact", "z_score", "mean_w",
               "stderr_w", "mean_exp_w0", "stderr_exp_w0", "passed", "config_digest")
# Report fields that describe the execution environment rather than the result.
_ENV_FIELDS = ("backend", "config_digest")


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ------------------------------------------------------------------- modes

def _mode_estimate(cfg: ExperimentConfig):
    rep = jarzynski_estimate(cfg.model, cfg.protocol, cfg.sampler(), cfg.N, allow_broken=cfg.allow_broken,
                             stderr_method=cfg.stderr_method, mode=cfg.mode, config_digest=cfg.digest)
    results = {k: v for k, v in rep.to_dict().items() if k not in _ENV_FIELDS}
    return results, rep.bands(cfg.sigmas), rep.samples


def _mode_corollary(cfg: ExperimentConfig):
    f, bound, vec = observable_from_spec(cfg.raw.get("observable"), cfg.model)
    lhs, rhs, se = weighted_observable_estimate(cfg.model, cfg.protocol, cfg.sampler(), cfg.N, f, bound,
                                                vectorized=vec, allow_broken=cfg.allow_broken)
    diff = lhs - rhs
    ok = abs(diff) <= cfg.sigmas * se if se > 0 else abs(diff) <= 1e-12
    z = diff / se if se > 0 else 0.0
    return {"lhs": lhs, "rhs": rhs, "stderr": se, "difference": diff, "z_score": z,
            "n_samples": cfg.N, "seed": cfg.master_seed, "grid_steps": cfg.grid_steps}, {"corollary_z": ok}, None


def _mode_convergence(cfg: ExperimentConfig):
    rows = convergence_study(cfg.model, cfg.protocol, cfg.sampler(), cfg.N, cfg.grids,
                             allow_broken=cfg.allow_broken, stderr_method=cfg.stderr_method)
    bands = {}
    for i in range(len(rows)):
        if rows[i]["z_score"] is not None:
            bands[f"grid_{rows[i]['grid']}_z"] = abs(rows[i]["z_score"]) <= cfg.sigmas
        for j in range(i + 1, len(rows)):
            a, b = rows[i], rows[j]
            if a["mean_exp_w"] is None or b["mean_exp_w"] is None:
                bands[f"grids_{a['grid']}_{b['grid']}"] = False
                continue
            comb = math.hypot(a["stderr_exp_w"], b["stderr_exp_w"])
            bands[f"grids_{a['grid']}_{b['grid']}"] = abs(a["mean_exp_w"] - b["mean_exp_w"]) <= cfg.sigmas * comb
    return {"rows": rows, "n_samples": cfg.N, "seed": cfg.master_seed}, bands, None


def _assumption_rows_finite(cfg: ExperimentConfig):
    sp = discretize(cfg.protocol, cfg.sampler())
    rows = []
    for lam in np.unique(sp.values, axis=0):
        P = cfg.kernel.matrix(lam)
        stat = check_stationarity(P, cfg.model, lam)
        unit = check_unit_ratio(P, cfg.model, lam)
        rows.append({"lambda": lam.tolist(), "stationarity": stat, "unit_ratio": unit,
                     "pass": stat <= ORACLE_TOL and unit <= ORACLE_TOL})
    return rows


def _assumption_rows_continuous(cfg: ExperimentConfig, n_steps: int = 10, max_points: int = 5):
    """Statistical stationarity: exact canonical draws, ``n_steps`` kernel steps, compare moments."""
    model = cfg.model
    if model.sampler is None:
        raise ConfigError("check-assumptions on a continuous model needs an exact canonical sampler")
    if model.dim > 2:
        raise ConfigError("check-assumptions on continuous models is limited to dim <= 2")
    sp = discretize(cfg.protocol, cfg.sampler())
    lams = np.unique(sp.values, axis=0)
    if len(lams) > max_points:
        lams = lams[np.linspace(0, len(lams) - 1, max_points).round().astype(int)]
    n = min(cfg.N, 100_000)
    rows = []
    for j, lam in enumerate(lams):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.master_seed, spawn_key=(2 ** 32, j))))
        x = model.sample_canonical(rng, lam, n)
        fixed = StepProtocol([0.0, 1.0], np.stack([lam, lam]))
        x = _propagate_block(cfg.kernel, fixed, n_steps * cfg.kernel.substeps, x,
                             [np.random.Generator(np.random.PCG64(rng.integers(2 ** 63))) for _ in range(n)])[:, -1]
        c = x[:, 0]
        mu = canonical_expectation(model, lam, lambda y: np.asarray(y).ravel()[0], tol=1e-12)
        m2 = canonical_expectation(model, lam, lambda y: (np.asarray(y).ravel()[0] - mu) ** 2, tol=1e-12)
        m4 = canonical_expectation(model, lam, lambda y: (np.asarray(y).ravel()[0] - mu) ** 4, tol=1e-12)
        z_mean = (c.mean() - mu) / math.sqrt(m2 / n)
        z_var = (np.mean((c - mu) ** 2) - m2) / math.sqrt(max(m4 - m2 ** 2, 1e-300) / n)
        rows.append({"lambda": lam.tolist(), "z_mean": float(z_mean), "z_var": float(z_var),
                     "pass": abs(z_mean) <= cfg.sigmas and abs(z_var) <= cfg.sigmas})
    return rows


def _mode_check(cfg: ExperimentConfig):
    if cfg.model.is_finite:
        rows = _assumption_rows_finite(cfg)
    else:
        rows = _assumption_rows_continuous(cfg)
    return {"rows": rows}, {"assumption_1": all(r["pass"] for r in rows)}, None


def _mode_oracle(cfg: ExperimentConfig):
    model = cfg.model
    if not model.is_finite:
        raise ConfigError("oracle mode needs a finite-state model")
    sp = discretize(cfg.protocol, cfg.sampler())
    mf = cfg.kernel.matrix
    reps = cfg.substeps_per_segment
    exact = exact_exponential_work_average(model, sp, substeps=reps, matrix_fn=mf)
    ratio = partition_ratio(model, sp)
    bk = exact_bk_average(model, sp, substeps=reps, matrix_fn=mf)
    f, _, _ = observable_from_spec(cfg.raw.get("observable"), model)
    lhs, rhs = exact_weighted_observable(model, sp, substeps=reps, f=f, matrix_fn=mf)
    try:
        brute = brute_force_path_enumeration(model, sp, substeps=reps, matrix_fn=mf)
    except NeqworkError:
        brute = None
    results = {"exact_mean_exp_w": exact, "partition_ratio": ratio, "telescoping_error": abs(exact - ratio),
               "brute_force_mean_exp_w": brute, "exact_mean_exp_w0": bk, "corollary_lhs": lhs,
               "corollary_rhs": rhs, "n_segments": sp.n_segments}
    bands = {"telescoping": abs(exact - ratio) <= ORACLE_TOL, "bk": abs(bk - 1.0) <= ORACLE_TOL,
             "corollary": abs(lhs - rhs) <= ORACLE_TOL}
    if brute is not None:
        bands["enumeration"] = abs(brute - exact) <= ORACLE_TOL
    return results, bands, None


MODE_RUNNERS = {"estimate": _mode_estimate, "bk": _mode_estimate, "corollary": _mode_corollary,
                "convergence": _mode_convergence, "check-assumptions": _mode_check, "oracle": _mode_oracle}


# ----------------------------------------------------------------- outputs

def execute(raw: dict):
    """Run a config mapping; returns ``(report, samples)``."""
    cfg = ExperimentConfig.from_dict(raw)
    log.info("mode=%s digest=%s seed=%d backend=%s workers=%d", cfg.mode, cfg.digest, cfg.master_seed,
             backend(), worker_count())
    results, bands, samples = MODE_RUNNERS[cfg.mode](cfg)
    body = {k: v for k, v in cfg.raw.items() if k != "master_seed"}
    report = {
        "schema_version": SCHEMA_VERSION,
        "tool": "neqwork",
        "version": __version__,
        "mode": cfg.mode,
        "config": body,
        "config_digest": cfg.digest,
        "seed": cfg.master_seed,
        "backend": backend(),
        "results": _clean(results),
        "bands": {k: bool(v) for k, v in bands.items()},
        "passed": all(bands.values()),
    }
    return report, samples


def summary_row(report: dict) -> dict:
    res = report["results"]
    row = {c: "" for c in CSV_COLUMNS}
    row.update(schema_version=report["schema_version"], mode=report["mode"],
               model=report["config"]["model"].get("name", ""), seed=report["seed"],
               passed=int(report["passed"]), config_digest=report["config_digest"])
    for c in CSV_COLUMNS:
        if c in res and res[c] is not None and not isinstance(res[c], (list, dict)):
            row[c] = res[c]
    if report["mode"] == "oracle":
        row["mean_exp_w"] = res["exact_mean_exp_w"]
        row["mean_exp_w0"] = res["exact_mean_exp_w0"]
    if row["grid_steps"] == "":
        row["grid_steps"] = report["config"].get("grid_steps", "")
    return row


def write_outputs(report: dict, samples, out_dir: Path, dump_work: bool = False) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"json": out_dir / "report.json", "csv": out_dir / "summary.csv"}
    with open(paths["json"], "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerow(summary_row(report))
    if dump_work and samples is not None:
        paths["work"] = out_dir / "works.csv"
        xs = np.asarray(samples.final_states)
        xs = xs.reshape(xs.shape[0], -1)
        with open(paths["work"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "W", "W0"] + [f"x_T{k}" for k in range(xs.shape[1])])
            for i in range(xs.shape[0]):
                writer.writerow([i, repr(float(samples.w[i])), repr(float(samples.w0[i]))]
                                + [repr(v.item()) for v in xs[i]])
    return paths


def _first_divergence(a, b, path="results"):
    if isinstance(a, dict) and isinstance(b, dict):
        for k in list(a.keys()) + [k for k in b if k not in a]:
            if k not in a or k not in b:
                return f"{path}.{k}"
            d = _first_divergence(a[k], b[k], f"{path}.{k}")
            if d:
                return d
        return None
    if isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            return f"{path} (length)"
        for i, (x, y) in enumerate(zip(a, b)):
            d = _first_divergence(x, y, f"{path}[{i}]")
            if d:
                return d
        return None
    return None if a == b and type(a) is type(b) else path


def replay(report_path) -> int:
    """Re-run a report's configuration and require bit-identical results."""
    report = load_json(report_path)
    for key in ("schema_version", "config", "config_digest", "seed", "results"):
        if key not in report:
            raise ConfigError(f"{report_path}: report has no '{key}' field")
    if report["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"{report_path}: unsupported schema_version {report['schema_version']}")
    raw = copy.deepcopy(report["config"])
    raw["master_seed"] = report["seed"]
    if digest(raw) != report["config_digest"]:
        print("replay mismatch: config_digest", file=sys.stderr)
        return 1
    fresh, _ = execute(raw)
    where = _first_divergence(report["results"], fresh["results"])
    if where is not None:
        print(f"replay mismatch: {where}", file=sys.stderr)
        return 1
    print(f"replay ok: {report['mode']} results identical (seed {report['seed']})")
    return 0


def _print_report(report: dict):
    res = report["results"]
    print(f"mode {report['mode']}  seed {report['seed']}  digest {report['config_digest'][:12]}")
    if report["mode"] == "check-assumptions":
        for r in res["rows"]:
            cols = "  ".join(f"{k}={v:.3e}" for k, v in r.items() if k not in ("lambda", "pass"))
            print(f"  lambda={r['lambda']}  {cols}  {'pass' if r['pass'] else 'FAIL'}")
    elif report["mode"] == "convergence":
        for r in res["rows"]:
            print(f"  grid={r['grid']:>6}  mean_exp_w={r['mean_exp_w']}  stderr={r['stderr_exp_w']}")
    else:
        for k, v in res.items():
            if not isinstance(v, (list, dict)):
                print(f"  {k}: {v}")
    for name, ok in report["bands"].items():
        print(f"  band {name}: {'pass' if ok else 'FAIL'}")


def _apply_overrides(raw: dict, args, mode=None) -> dict:
    raw = copy.deepcopy(raw)
    if mode is not None:
        raw["mode"] = mode
    if getattr(args, "seed", None) is not None:
        raw["master_seed"] = args.seed
    if getattr(args, "n", None) is not None:
        raw["N"] = args.n
    if getattr(args, "grid", None) is not None:
        raw["grid_steps"] = args.grid
    if getattr(args, "grids", None):
        try:
            raw["grids"] = [int(g) for g in args.grids.split(",")]
        except ValueError:
            raise ConfigError(f"--grids: expected comma-separated integers, got {args.grids!r}")
    if getattr(args, "allow_broken", False):
        raw["allow_broken"] = True
    return raw


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neqwork", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--n", type=int, help="number of trajectories")
        p.add_argument("--grid", type=int, help="grid steps for the continuous protocol part")
        p.add_argument("--out", help="output directory (default: config outputs.dir or '.')")
        p.add_argument("--allow-broken", action="store_true", help="run kernels that violate stationarity")
        p.add_argument("--dump-work", action="store_true", help="write per-trajectory works.csv")
        return p

    common(sub.add_parser("run", help="run the mode named in the config"))
    common(sub.add_parser("check-assumptions", help="stationarity residual table"))
    common(sub.add_parser("oracle", help="exact finite-state identities"))
    conv = common(sub.add_parser("convergence", help="estimates across grid resolutions"))
    conv.add_argument("--grids", help="comma-separated grid sizes")
    rp = sub.add_parser("replay", help="re-run a report and require identical results")
    rp.add_argument("report")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            return replay(args.report)
        raw = load_json(args.config)
        mode = None if args.command == "run" else args.command
        raw = _apply_overrides(raw, args, mode)
        report, samples = execute(raw)
        outputs = raw.get("outputs") or {}
        out_dir = Path(args.out or outputs.get("dir", "."))
        paths = write_outputs(report, samples, out_dir, args.dump_work or bool(outputs.get("work_dump")))
        _print_report(report)
        print(f"wrote {', '.join(str(p) for p in paths.values())}")
        if not report["passed"]:
            failed = [k for k, ok in report["bands"].items() if not ok]
            print(f"acceptance band failed: {', '.join(failed)}", file=sys.stderr)
            return 1
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NeqworkError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
