"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines inline;
they are also repeated in the terminal summary.
"""
import json
import math
import time

import numpy as np
import pytest

from neqwork import cli
from neqwork.config import ExperimentConfig
from neqwork.hamiltonian import two_state
from neqwork.kernel import WORKERS_ENV
from neqwork.oracle import (brute_force_path_enumeration, broken_metropolis_matrix, check_stationarity,
                            check_unit_ratio, exact_bk_average, exact_exponential_work_average,
                            exact_weighted_observable, metropolis_matrix, partition_ratio, random_instance)
from neqwork.protocol import StepProtocol

SEEDS = range(100)
Z_RATIO = 0.6839397
HALF_LN2 = 0.5 * math.log(2)
RESULTS = []


def record(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def instances():
    return [random_instance(s) for s in SEEDS]


@pytest.fixture(scope="module")
def reports(fixture_path):
    cache = {}

    def get(name, **patch):
        key = (name, json.dumps(patch, sort_keys=True))
        if key not in cache:
            raw = json.loads(fixture_path(name).read_text())
            raw.update(patch)
            t0 = time.perf_counter()
            rep, samples = cli.execute(raw)
            cache[key] = (raw, rep, samples, time.perf_counter() - t0)
        return cache[key]

    return get


@pytest.fixture(scope="module")
def fixture_path():
    from conftest import FIXTURES
    return lambda name: FIXTURES / f"{name}.json"


def test_criterion_1_exact_telescoping(instances):
    t0 = time.perf_counter()
    worst = max(abs(exact_exponential_work_average(m, sp, prop) - partition_ratio(m, sp))
                for m, sp, prop in instances)
    dt = time.perf_counter() - t0
    record(1, worst <= 1e-12 and dt < 1.0, f"max |exact - Z_T/Z_0| = {worst:.2e} (<= 1e-12), {dt:.2f} s (< 1 s)")


def test_criterion_2_enumeration(instances):
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for m, sp, prop in instances:
        if m.n_states ** (1 + sp.n_segments) > 1e7:
            continue
        n += 1
        worst = max(worst, abs(brute_force_path_enumeration(m, sp, prop) - exact_exponential_work_average(m, sp, prop)))
    dt = time.perf_counter() - t0
    record(2, worst <= 1e-12 and dt < 10.0 and n > 0,
           f"{n} instances, max |enumeration - matrix| = {worst:.2e} (<= 1e-12), {dt:.2f} s (< 10 s)")


def test_criterion_3_assumption_checkers(instances):
    t0 = time.perf_counter()
    res = 0.0
    for m, sp, prop in instances:
        for lam in sp.values:
            P = metropolis_matrix(m, lam, prop)
            res = max(res, check_stationarity(P, m, lam), check_unit_ratio(P, m, lam))
    m = two_state()
    B = broken_metropolis_matrix(m, 0.0, bias=0.1)
    b_stat, b_unit = check_stationarity(B, m, 0.0), check_unit_ratio(B, m, 0.0)
    sp = StepProtocol([0.0, 1.0], [0.0, 1.0])
    err = abs(exact_exponential_work_average(m, sp, matrix_fn=lambda lam: broken_metropolis_matrix(m, lam, bias=0.1))
              - partition_ratio(m, sp))
    dt = time.perf_counter() - t0
    ok = res <= 1e-12 and b_stat > 1e-3 and b_unit > 1e-3 and err > 1e-4 and dt < 1.0
    record(3, ok, f"metropolis residual {res:.1e} (<= 1e-12); broken residuals {b_stat:.3g}/{b_unit:.3g} (> 1e-3), "
                  f"broken average error {err:.3g} (> 1e-4), {dt:.2f} s (< 1 s)")


def test_criterion_4_finite_mc(reports):
    _, rep, _, dt = reports("two_state_jump")
    r = rep["results"]
    dev = abs(r["mean_exp_w"] - Z_RATIO)
    ok = r["n_samples"] == 100_000 and dev <= 4 * r["stderr_exp_w"] and r["stderr_exp_w"] < 0.01 and dt < 10
    record(4, ok, f"mean_exp_w {r['mean_exp_w']:.6f}, |dev| {dev:.2e} <= 4*stderr {4 * r['stderr_exp_w']:.2e}, "
                  f"stderr < 0.01, {dt:.2f} s (< 10 s)")


def test_criterion_5_continuous(reports):
    _, rep, _, dt = reports("stiffness_linear")
    r = rep["results"]
    dev = abs(r["delta_f_estimate"] - HALF_LN2)
    gap = r["mean_w"] - r["delta_f_estimate"]
    comb = r["stderr_w"] + r["stderr_delta_f"]
    ok = (r["n_samples"] == 100_000 and r["grid_steps"] == 100 and dev <= 4 * r["stderr_delta_f"]
          and gap >= -4 * comb and dt < 60)
    record(5, ok, f"dF {r['delta_f_estimate']:.6f} vs {HALF_LN2:.7f}, |dev| {dev:.2e} <= {4 * r['stderr_delta_f']:.2e}; "
                  f"<W> - dF = {gap:.4f} >= {-4 * comb:.2e}; {dt:.2f} s (< 60 s)")


def test_criterion_6_grid_unbiased(reports):
    _, rep, _, dt = reports("stiffness_linear", mode="convergence", grids=[10, 100])
    a, b = rep["results"]["rows"]
    diff = abs(a["mean_exp_w"] - b["mean_exp_w"])
    comb = math.hypot(a["stderr_exp_w"], b["stderr_exp_w"])
    record(6, diff <= 4 * comb and dt < 120,
           f"grid 10 {a['mean_exp_w']:.6f} vs grid 100 {b['mean_exp_w']:.6f}, |diff| {diff:.2e} <= {4 * comb:.2e}, "
           f"{dt:.2f} s (< 120 s)")


def test_criterion_7_bochkov_kuzovlev(instances, reports):
    worst = max(abs(exact_bk_average(m, sp, prop) - 1.0) for m, sp, prop in instances)
    lines, ok = [], worst <= 1e-12
    worst_id = 0.0
    for name in ("two_state_jump", "stiffness_linear"):
        raw, rep, samples, _ = reports(name)
        r = rep["results"]
        se = r["stderr_exp_w0"]
        dev = abs(r["mean_exp_w0"] - 1.0)
        ok &= dev <= 4 * se if se > 0 else dev == 0.0
        cfg = ExperimentConfig.from_dict(raw)
        m, p = cfg.model, cfg.protocol
        x = samples.final_states
        endpoint = m.energies(x, p.value_at(p.T)) - m.energies(x, p.value_at(0.0))
        worst_id = max(worst_id, float(np.max(np.abs(samples.w - samples.w0 - endpoint))))
        lines.append(f"{name} mean_exp_w0 {r['mean_exp_w0']:.6f} (|dev| {dev:.1e} <= 4*{se:.1e})")
    ok &= worst_id <= 1e-10
    record(7, ok, f"exact max |BK - 1| {worst:.1e} (<= 1e-12); " + "; ".join(lines)
                  + f"; max endpoint-identity error {worst_id:.1e} (<= 1e-10)")


def test_criterion_8_corollary(instances, reports):
    t0 = time.perf_counter()
    worst = 0.0
    for m, sp, prop in instances:
        lhs, rhs = exact_weighted_observable(m, sp, prop, f=lambda s: float(s == 0))
        worst = max(worst, abs(lhs - rhs))
    _, rep, _, dt_mc = reports("two_state_oracle", mode="corollary", N=100_000)
    r = rep["results"]
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and abs(r["difference"]) <= 4 * r["stderr"] and dt < 10
    record(8, ok, f"exact max |lhs - rhs| {worst:.1e} (<= 1e-12); MC |lhs - rhs| {abs(r['difference']):.2e} "
                  f"<= 4*stderr {4 * r['stderr']:.2e}; {dt:.2f} s (< 10 s)")


def test_criterion_9_replay(reports, tmp_path, monkeypatch):
    names = [("two_state_jump", {}), ("stiffness_linear", {}),
             ("stiffness_linear", {"mode": "convergence", "grids": [10, 100]}),
             ("two_state_oracle", {"mode": "corollary", "N": 100_000}), ("two_state_oracle", {})]
    codes = []
    for i, (name, patch) in enumerate(names):
        _, rep, _, _ = reports(name, **patch)
        path = tmp_path / f"report{i}.json"
        path.write_text(json.dumps(rep))
        workers = "3" if i % 2 == 0 else "2"
        monkeypatch.setenv(WORKERS_ENV, workers)
        codes.append(cli.replay(path))
    record(9, all(c == 0 for c in codes),
           f"{sum(c == 0 for c in codes)}/{len(codes)} reports replayed bit-identically under 2-3 workers")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-s"]))
