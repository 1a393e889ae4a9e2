"""Exact finite-state verification.

For a step protocol with values ``lam_0..lam_n`` on breakpoints ``t_0..t_n``
the exponential work average is the product

    q_{lam_0}^T P_0^m D_1 P_1^m D_2 ... P_{n-1}^m D_n 1,
    D_i = diag(exp(-beta (E(., lam_i) - E(., lam_{i-1})))),

which telescopes to ``Z_{lam_n} / Z_{lam_0}`` whenever each ``P_i`` leaves
``q_{lam_i}`` invariant. :func:`brute_force_path_enumeration` evaluates the
same expectation path by path and shares none of the matrix code.
"""
from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, SizeError
from .hamiltonian import FiniteStateModel, energy_table
from .protocol import StepProtocol

PATH_GUARD = 10 ** 7
_SYM_TOL = 1e-14


def uniform_proposal(n_states: int) -> np.ndarray:
    return np.full((n_states, n_states), 1.0 / n_states)


def _check_proposal(proposal: np.ndarray, n_states: int) -> np.ndarray:
    proposal = np.asarray(proposal, dtype=float)
    if proposal.shape != (n_states, n_states):
        raise ConfigError(f"proposal has shape {proposal.shape}, expected ({n_states}, {n_states})")
    if np.any(proposal < 0):
        raise ConfigError("proposal has negative entries")
    if np.max(np.abs(proposal - proposal.T)) > _SYM_TOL:
        raise ConfigError("proposal matrix is not symmetric")
    if np.max(np.abs(proposal.sum(axis=1) - 1.0)) > 1e-14:
        raise ConfigError("proposal rows must sum to 1")
    return proposal


def _fill_diagonal(P: np.ndarray) -> np.ndarray:
    np.fill_diagonal(P, 0.0)
    np.fill_diagonal(P, 1.0 - P.sum(axis=1))
    return P


def _with_rejection(proposal: np.ndarray, acc: np.ndarray) -> np.ndarray:
    # Diagonal = proposal diagonal + rejected mass; exact when every move is accepted.
    P = proposal * acc
    off = proposal * (1.0 - acc)
    np.fill_diagonal(off, 0.0)
    np.fill_diagonal(P, np.diag(proposal) + off.sum(axis=1))
    return P


def metropolis_matrix(m: FiniteStateModel, lam, proposal: Optional[np.ndarray] = None) -> np.ndarray:
    """``P(i->j) = proposal(i,j) min(1, exp(-beta (E_j - E_i)))``, diagonal takes the rest."""
    proposal = uniform_proposal(m.n_states) if proposal is None else _check_proposal(proposal, m.n_states)
    e = m.table(lam)
    de = e[None, :] - e[:, None]
    acc = np.exp(-m.beta * np.maximum(de, 0.0))
    return _with_rejection(proposal, acc)


def broken_metropolis_matrix(m: FiniteStateModel, lam, proposal: Optional[np.ndarray] = None,
                             bias: float = 0.1) -> np.ndarray:
    """Metropolis with acceptance skewed by ``1 +/- bias`` toward higher state indices.

    Violates detailed balance and, for ``bias != 0``, stationarity of the Gibbs law.
    """
    proposal = uniform_proposal(m.n_states) if proposal is None else _check_proposal(proposal, m.n_states)
    e = m.table(lam)
    de = e[None, :] - e[:, None]
    acc = np.exp(-m.beta * np.maximum(de, 0.0))
    idx = np.arange(m.n_states)
    skew = 1.0 + bias * np.sign(idx[None, :] - idx[:, None])
    return _with_rejection(proposal, np.clip(acc * skew, 0.0, 1.0))


def is_stochastic(P: np.ndarray, tol: float = 1e-14) -> bool:
    return bool(np.all(P >= 0) and np.max(np.abs(P.sum(axis=1) - 1.0)) <= tol)


def check_stationarity(P: np.ndarray, m: FiniteStateModel, lam) -> float:
    """``max_y |sum_x q(x) P(x, y) - q(y)|``."""
    q = m.canonical_probs(lam)
    return float(np.max(np.abs(q @ P - q)))


def check_unit_ratio(P: np.ndarray, m: FiniteStateModel, lam) -> float:
    """``max_y |sum_x exp(-beta (E(x) - E(y))) P(x, y) - 1|``."""
    e = m.table(lam)
    ratio = np.exp(-m.beta * (e[:, None] - e[None, :]))
    return float(np.max(np.abs(np.sum(ratio * P, axis=0) - 1.0)))


def partition_ratio(m: FiniteStateModel, sp: StepProtocol) -> float:
    return math.exp(m.log_partition(sp.values[-1]) - m.log_partition(sp.values[0]))


def _matrix_fn(m, proposal, matrix_fn):
    if matrix_fn is not None:
        return matrix_fn
    return lambda lam: metropolis_matrix(m, lam, proposal)


def _telescope(m: FiniteStateModel, sp: StepProtocol, terminal: np.ndarray, matrix_fn, substeps: int,
               dynamics: Optional[StepProtocol] = None) -> float:
    if substeps < 1:
        raise ConfigError("substeps must be >= 1")
    dyn = sp if dynamics is None else dynamics
    if not np.array_equal(dyn.breakpoints, sp.breakpoints):
        raise ConfigError("dynamics protocol must share the work protocol's breakpoints")
    v = m.canonical_probs(sp.values[0])
    for i in range(sp.n_segments):
        P = matrix_fn(dyn.values[i])
        for _ in range(substeps):
            v = v @ P
        v = v * np.exp(-m.beta * (m.table(sp.values[i + 1]) - m.table(sp.values[i])))
    return float(v @ terminal)


def exact_exponential_work_average(m: FiniteStateModel, sp: StepProtocol, proposal=None, substeps: int = 1,
                                   *, matrix_fn: Optional[Callable] = None) -> float:
    """``E[exp(-beta W)]`` by the matrix product; equals ``Z_T / Z_0`` for stationary kernels."""
    return _telescope(m, sp, np.ones(m.n_states), _matrix_fn(m, proposal, matrix_fn), substeps)


def exact_weighted_observable(m: FiniteStateModel, sp: StepProtocol, proposal=None, substeps: int = 1,
                              f: Callable = None, *, matrix_fn: Optional[Callable] = None,
                              dynamics: Optional[StepProtocol] = None):
    """``(E[f(x_T) exp(-beta W)], E_{lam(T)}[f] Z_T / Z_0)``.

    ``dynamics`` optionally drives the kernels with a different protocol on the
    same breakpoints while ``W`` keeps using ``sp``.
    """
    if f is None:
        f = lambda s: 1.0
    fv = np.array([float(f(s)) for s in range(m.n_states)])
    lhs = _telescope(m, sp, fv, _matrix_fn(m, proposal, matrix_fn), substeps, dynamics)
    rhs = float(m.canonical_probs(sp.values[-1]) @ fv) * partition_ratio(m, sp)
    return lhs, rhs


def exact_bk_average(m: FiniteStateModel, sp: StepProtocol, proposal=None, substeps: int = 1,
                     *, matrix_fn: Optional[Callable] = None) -> float:
    """``E[exp(-beta W0)]`` with ``W0 = W - (E(x_T, lam_T) - E(x_T, lam_0))``."""
    terminal = np.exp(-m.beta * (m.table(sp.values[0]) - m.table(sp.values[-1])))
    return _telescope(m, sp, terminal, _matrix_fn(m, proposal, matrix_fn), substeps)


def brute_force_path_enumeration(m: FiniteStateModel, sp: StepProtocol, proposal=None, substeps: int = 1,
                                 *, matrix_fn: Optional[Callable] = None, terminal: Optional[Callable] = None,
                                 guard: int = PATH_GUARD, chunk: int = 1 << 18) -> float:
    """Sum of ``probability(path) * exp(-beta W(path)) * terminal(x_T)`` over every state path."""
    ns = m.n_states
    n_seg = sp.n_segments
    length = 1 + n_seg * substeps
    if ns ** length > guard:
        raise SizeError(f"{ns}^{length} paths exceed the enumeration guard {guard}")
    matrix_fn = _matrix_fn(m, proposal, matrix_fn)
    mats = [matrix_fn(sp.values[i]) for i in range(n_seg)]
    q0 = m.canonical_probs(sp.values[0])
    tables = [m.table(v) for v in sp.values]
    term = np.ones(ns) if terminal is None else np.array([float(terminal(s)) for s in range(ns)])
    total = 0.0
    n_paths = ns ** length
    for start in range(0, n_paths, chunk):
        codes = np.arange(start, min(start + chunk, n_paths))
        paths = np.stack(np.unravel_index(codes, (ns,) * length), axis=1)
        prob = q0[paths[:, 0]]
        work = np.zeros(codes.size)
        for k in range(1, length):
            seg = (k - 1) // substeps
            prob = prob * mats[seg][paths[:, k - 1], paths[:, k]]
            if k % substeps == 0:
                i = k // substeps
                x = paths[:, k]
                work += tables[i][x] - tables[i - 1][x]
        total += float(np.sum(prob * np.exp(-m.beta * work) * term[paths[:, -1]]))
    return total


def random_instance(seed: int, n_states=(2, 5), n_jumps=(1, 6), beta: float = 1.0):
    """Random table model, step protocol and symmetric proposal.

    Energies are uniform on [-2, 2]; the control takes the values ``0..n_jumps``
    with jump times uniform on (0, 1) and the last jump at ``T = 1``.
    """
    rng = np.random.default_rng(seed)
    ns = int(rng.integers(n_states[0], n_states[1] + 1))
    nj = int(rng.integers(n_jumps[0], n_jumps[1] + 1))
    energies = rng.uniform(-2.0, 2.0, size=(ns, nj + 1))
    model = energy_table(np.arange(nj + 1, dtype=float), energies, beta)
    times = np.concatenate([[0.0], np.sort(rng.uniform(0.0, 1.0, nj - 1)), [1.0]])
    sp = StepProtocol(times, np.arange(nj + 1, dtype=float))
    r = rng.random((ns, ns))
    sym = 0.5 * (r + r.T)
    np.fill_diagonal(sym, 0.0)
    sym *= 0.9 / sym.sum(axis=1).max()
    proposal = _fill_diagonal(sym)
    proposal = 0.5 * (proposal + proposal.T)
    return model, sp, proposal
