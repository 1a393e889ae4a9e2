import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from neqwork import oracle as orc
from neqwork.errors import ConfigError, SizeError
from neqwork.hamiltonian import energy_table, two_state
from neqwork.protocol import StepProtocol

Z_RATIO = (1 + math.exp(-1)) / 2


def jump01():
    return StepProtocol([0.0, 1.0], [0.0, 1.0])


def test_metropolis_matrix_examples():
    flat = energy_table([0.0, 1.0], [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
    prop = orc.uniform_proposal(3)
    assert np.array_equal(orc.metropolis_matrix(flat, 0.5, prop), prop)
    P = orc.metropolis_matrix(two_state(), 1.0, np.array([[0.5, 0.5], [0.5, 0.5]]))
    assert P[0, 1] == pytest.approx(0.5 * math.exp(-1), abs=1e-16)
    assert P[1, 0] == 0.5
    assert orc.check_stationarity(P, two_state(), 1.0) <= 1e-14


def test_asymmetric_proposal_rejected():
    with pytest.raises(ConfigError):
        orc.metropolis_matrix(two_state(), 0.0, np.array([[0.2, 0.8], [0.5, 0.5]]))


def test_checkers_on_identity_and_broken():
    m = two_state()
    assert orc.check_stationarity(np.eye(2), m, 1.0) == 0.0
    assert orc.check_unit_ratio(np.eye(2), m, 1.0) == 0.0
    B = orc.broken_metropolis_matrix(m, 0.0, bias=0.1)
    assert orc.is_stochastic(B)
    assert orc.check_stationarity(B, m, 0.0) > 1e-3
    assert orc.check_unit_ratio(B, m, 0.0) > 1e-3


def test_exact_average_examples():
    m = two_state()
    assert orc.exact_exponential_work_average(m, StepProtocol([0.0, 1.0], [0.7, 0.7])) == 1.0
    for prop in (orc.uniform_proposal(2), np.array([[0.9, 0.1], [0.1, 0.9]])):
        assert orc.exact_exponential_work_average(m, jump01(), prop) == pytest.approx(Z_RATIO, abs=1e-15)


def test_brute_force_examples():
    m = two_state()
    assert abs(orc.brute_force_path_enumeration(m, jump01())
               - orc.exact_exponential_work_average(m, jump01())) <= 1e-15
    assert orc.brute_force_path_enumeration(m, StepProtocol([0.0, 1.0], [0.3, 0.3])) == pytest.approx(1.0, abs=1e-15)
    rng = np.random.default_rng(0)
    m3 = energy_table([0.0, 1.0, 2.0, 3.0], rng.uniform(-2, 2, (3, 4)))
    sp = StepProtocol([0.0, 0.3, 0.6, 1.0], [0.0, 1.0, 2.0, 3.0])
    assert abs(orc.brute_force_path_enumeration(m3, sp) - orc.exact_exponential_work_average(m3, sp)) <= 1e-12


def test_brute_force_guard():
    m = energy_table([0.0, 1.0], np.zeros((5, 2)))
    sp = StepProtocol(np.linspace(0, 1, 12), np.zeros(12))
    with pytest.raises(SizeError):
        orc.brute_force_path_enumeration(m, sp)


def test_weighted_observable_examples():
    m = two_state()
    lhs, rhs = orc.exact_weighted_observable(m, jump01())
    assert lhs == pytest.approx(Z_RATIO, abs=1e-15) and rhs == pytest.approx(Z_RATIO, abs=1e-15)
    lhs, rhs = orc.exact_weighted_observable(m, jump01(), f=lambda s: float(s == 0))
    assert rhs == pytest.approx(0.5, abs=1e-15)
    assert abs(lhs - rhs) <= 1e-15


def test_bk_examples():
    m = two_state()
    assert orc.exact_bk_average(m, StepProtocol([0.0, 1.0], [0.2, 0.2])) == 1.0
    assert abs(orc.exact_bk_average(m, jump01()) - 1.0) <= 1e-14


seeds = st.integers(0, 2 ** 32 - 1)


@given(seeds, st.integers(1, 3))
def test_telescoping_equals_partition_ratio(seed, substeps):
    m, sp, prop = orc.random_instance(seed)
    assert abs(orc.exact_exponential_work_average(m, sp, prop, substeps) - orc.partition_ratio(m, sp)) <= 1e-12
    assert abs(orc.exact_bk_average(m, sp, prop, substeps) - 1.0) <= 1e-12
    lhs, rhs = orc.exact_weighted_observable(m, sp, prop, substeps, f=lambda s: math.sin(s + 1.0))
    assert abs(lhs - rhs) <= 1e-12


@given(seeds)
def test_matrix_equals_enumeration(seed):
    m, sp, prop = orc.random_instance(seed, n_states=(2, 3), n_jumps=(1, 5))
    assert abs(orc.brute_force_path_enumeration(m, sp, prop) - orc.exact_exponential_work_average(m, sp, prop)) <= 1e-12


@given(seeds, st.floats(0.01, 0.99))
def test_zero_jump_breakpoints_irrelevant(seed, t_extra):
    m, sp, prop = orc.random_instance(seed)
    if t_extra in sp.breakpoints:
        return
    k = int(np.searchsorted(sp.breakpoints, t_extra))
    fine = StepProtocol(np.insert(sp.breakpoints, k, t_extra), np.insert(sp.values, k, sp.values[k - 1], axis=0))
    a = orc.exact_exponential_work_average(m, sp, prop)
    b = orc.exact_exponential_work_average(m, fine, prop)
    assert abs(a - b) <= 1e-13


@given(seeds, st.floats(-3, 3))
def test_endpoint_modification_insensitive(seed, a):
    m, sp, prop = orc.random_instance(seed)
    # W from the original protocol; only the dynamics see lam(T) = a.
    if not (sp.values[0, 0] <= a <= sp.values[-1, 0]):
        a = float(np.clip(a, sp.values[0, 0], sp.values[-1, 0]))
    vals = sp.values.copy()
    vals[-1] = a
    mod = StepProtocol(sp.breakpoints, vals)
    f = lambda s: float(s % 2)
    base, _ = orc.exact_weighted_observable(m, sp, prop, 1, f)
    alt, _ = orc.exact_weighted_observable(m, sp, prop, 1, f, dynamics=mod)
    assert abs(base - alt) <= 1e-13


@pytest.mark.parametrize("bias", [0.05, 0.1, 0.2])
def test_broken_kernel_breaks_identity(bias):
    m = two_state()
    sp = StepProtocol([0.0, 0.5, 1.0], [0.0, 0.0, 1.0])
    val = orc.exact_exponential_work_average(m, sp, matrix_fn=lambda lam: orc.broken_metropolis_matrix(m, lam, bias=bias))
    assert abs(val - Z_RATIO) > 1e-4
