import math

import numpy as np
import pytest

from neqwork import kernel as kn
from neqwork.errors import ConfigError
from neqwork.hamiltonian import energy_table, harmonic_stiffness, two_state
from neqwork.oracle import metropolis_matrix, uniform_proposal
from neqwork.protocol import Protocol, StepProtocol

N = 100_000


def _freq_ok(states, probs, n_states):
    counts = np.bincount(states, minlength=n_states)
    sd = np.sqrt(len(states) * probs * (1 - probs))
    return np.all(np.abs(counts - len(states) * probs) <= 4 * sd + 1e-12)


def test_sample_initial_degenerate():
    m = energy_table([0.0, 1.0], [[0.0, 0.0], [1e6, 1e6]])
    rng = np.random.default_rng(0)
    assert all(kn.sample_initial(m, 0.5, rng) == 0 for _ in range(200))


def test_sample_initial_gaussian_variance():
    m = harmonic_stiffness()
    rng = np.random.default_rng(1)
    x = np.array([kn.sample_initial(m, 1.0, rng)[0] for _ in range(20_000)])
    x = np.concatenate([x, m.sample_canonical(rng, 1.0, N - x.size)[:, 0]])
    assert 0.98 <= x.var() <= 1.02


def test_sample_initial_uniform_frequencies():
    m = energy_table([0.0, 1.0], np.zeros((3, 2)))
    s = m.sample_canonical(np.random.default_rng(2), 0.0, N)
    assert _freq_ok(s, np.full(3, 1 / 3), 3)


def test_burn_in_requires_length():
    m = harmonic_stiffness()
    m_nosampler = type(m).__new__(type(m))
    m_nosampler.__dict__.update(m.__dict__)
    m_nosampler.sampler = None
    k = kn.MetropolisKernel(m_nosampler, 0.5)
    cfg = kn.SamplerConfig(k, burn_in=None)
    with pytest.raises(ConfigError):
        kn.sample_initial(m_nosampler, 1.0, np.random.default_rng(0), cfg)
    x = kn.sample_initial(m_nosampler, 1.0, np.random.default_rng(0), kn.SamplerConfig(k, burn_in=500))
    assert np.isfinite(x).all()


def test_downhill_always_accepted():
    # From s1 (E=1) the only move is downhill, so the chain leaves s1 with probability 1.
    m = two_state()
    k = kn.FiniteMatrixKernel(m, lambda lam: metropolis_matrix(m, lam, np.array([[0.0, 1.0], [1.0, 0.0]])))
    rng = np.random.default_rng(0)
    assert all(kn.kernel_step(k, 1, 1.0, rng) == 0 for _ in range(100))


def test_zero_sigma_rejected():
    with pytest.raises(ConfigError):
        kn.MetropolisKernel(harmonic_stiffness(), 0.0)


def test_three_state_rows_sum_to_one():
    m = energy_table([0.0, 1.0], [[0.0, 1.0], [0.5, -1.0], [2.0, 0.0]])
    P = kn.FiniteMetropolisKernel(m).matrix(0.3)
    assert np.max(np.abs(P.sum(axis=1) - 1.0)) <= 1e-15


def test_identity_kernel_keeps_state():
    m = energy_table([0.0, 1.0], [[0.0, 1.0], [0.5, -1.0], [2.0, 0.0]])
    sp = StepProtocol([0.0, 0.5, 1.0], [0.0, 0.5, 1.0])
    tr = kn.propagate_step_protocol(kn.identity_kernel(m), 2, sp, 3, np.random.default_rng(0))
    assert np.all(tr.states == 2)
    assert tr.times.tolist() == [0.0, 0.5, 1.0]


def test_two_time_joint_law():
    m = energy_table([0.0, 1.0], [[0.0, 0.3], [0.4, -0.5], [1.0, 0.2]])
    k = kn.FiniteMetropolisKernel(m)
    sp = StepProtocol([0.0, 0.5, 1.0], [0.0, 1.0, 1.0])
    cfg = kn.SamplerConfig(k, master_seed=11)
    _, st = kn.simulate_block(m, sp, cfg, 0, N)
    joint = np.zeros((3, 3))
    np.add.at(joint, (st[:, 1], st[:, 2]), 1.0)
    q0 = m.canonical_probs(0.0)
    exact = (q0 @ k.matrix(0.0))[:, None] * k.matrix(1.0)
    sd = np.sqrt(N * exact * (1 - exact))
    assert np.all(np.abs(joint - N * exact) <= 4 * sd)


def test_equal_value_segments_merge():
    m = energy_table([0.0, 1.0], [[0.0, 0.3], [0.4, -0.5], [1.0, 0.2]])
    k = kn.FiniteMetropolisKernel(m)
    split = StepProtocol([0.0, 0.5, 1.0], [0.0, 0.0, 1.0])
    q = m.canonical_probs(0.0)
    _, st = kn.simulate_block(m, split, kn.SamplerConfig(k, master_seed=4), 0, N)
    # Two steps at lam=0 from q leave q unchanged.
    assert _freq_ok(st[:, -1], q, 3)


def test_constant_protocol_marginal_is_initial_law():
    m = energy_table([0.0, 1.0], [[0.0, 0.3], [0.4, -0.5], [1.0, 0.2]])
    k = kn.FiniteMetropolisKernel(m)
    _, st = kn.simulate_block(m, Protocol.constant(0.6), kn.SamplerConfig(k, grid_steps=5, master_seed=9), 0, N)
    assert _freq_ok(st[:, -1], m.canonical_probs(0.6), 3)


def test_grid_one_pure_step_protocol_segments():
    m = two_state()
    p = Protocol.steps([0.0, 0.4, 1.0], [0.0, 1.0, 1.0])
    sp = kn.discretize(p, kn.SamplerConfig(kn.FiniteMetropolisKernel(m), grid_steps=1))
    assert sp.n_segments == 2


def test_trajectory_deterministic():
    m = harmonic_stiffness()
    cfg = kn.SamplerConfig(kn.MetropolisKernel(m, 0.6), grid_steps=20, master_seed=123)
    p = Protocol.linear(1.0, 2.0)
    a = kn.sample_trajectory(m, p, cfg, 17)
    b = kn.sample_trajectory(m, p, cfg, 17)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.times, b.times)


def test_trajectory_independent_of_block_position():
    m = two_state()
    cfg = kn.SamplerConfig(kn.FiniteMetropolisKernel(m), master_seed=5)
    p = Protocol.steps([0.0, 0.3, 1.0], [0.0, 1.0, 0.5])
    _, block = kn.simulate_block(m, p, cfg, 10, 30)
    for i in (10, 19, 29):
        assert np.array_equal(kn.sample_trajectory(m, p, cfg, i).states, block[i - 10])


def test_workers_do_not_change_results(monkeypatch):
    m = two_state()
    cfg = kn.SamplerConfig(kn.FiniteMetropolisKernel(m), master_seed=5)
    p = Protocol.steps([0.0, 0.3, 1.0], [0.0, 1.0, 0.5])
    fn = lambda a, b: kn.simulate_block(m, p, cfg, a, b)[1]
    one = np.concatenate(kn.map_blocks(fn, 10_000, block=1000, workers=1))
    four = np.concatenate(kn.map_blocks(fn, 10_000, block=1000, workers=4))
    assert np.array_equal(one, four)
    monkeypatch.setenv(kn.WORKERS_ENV, "bogus")
    with pytest.raises(ConfigError):
        kn.worker_count()


def test_continuous_stationarity_statistical():
    m = harmonic_stiffness()
    k = kn.MetropolisKernel(m, 0.8)
    rng = np.random.default_rng(7)
    for lam in (1.0, 2.0):
        x0 = m.sample_canonical(rng, lam, N)
        sp = StepProtocol([0.0, 1.0], [lam, lam])
        rngs = [np.random.default_rng(s) for s in rng.integers(2 ** 63, size=N)]
        x = kn._propagate_block(k, sp, 10, x0, rngs)[:, -1, 0]
        var = 1.0 / lam
        assert abs(x.mean()) <= 4 * math.sqrt(var / N)
        assert abs(np.mean(x ** 2) - var) <= 4 * math.sqrt(2 * var ** 2 / N)


def test_stationarity_residual_on_grid():
    m = energy_table([0.0, 1.0, 2.0], [[0.0, 1.0, -1.0], [0.5, -1.0, 0.3], [2.0, 0.0, 0.1]])
    k = kn.FiniteMetropolisKernel(m)
    for lam in np.linspace(0, 2, 21):
        q = m.canonical_probs(lam)
        assert np.max(np.abs(q @ k.matrix(lam) - q)) <= 1e-14


def test_build_kernel_specs():
    m = two_state()
    assert kn.build_kernel({"kind": "finite_metropolis"}, m).conserves_canonical
    assert not kn.build_kernel({"kind": "broken", "bias": 0.1}, m).conserves_canonical
    with pytest.raises(ConfigError):
        kn.build_kernel({"kind": "metropolis"}, harmonic_stiffness())
    with pytest.raises(ConfigError):
        kn.build_kernel({"kind": "langevin"}, m)
