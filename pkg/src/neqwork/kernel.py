"""Fixed-parameter Markov kernels and trajectory sampling.

A step protocol is simulated by applying the kernel frozen at ``lam_i`` on each
constancy interval ``[t_i, t_{i+1})`` and recording the state at ``t_{i+1}``.
The control jumps instantaneously: no kernel step happens at a jump, so both
``H(., lam_{i+1})`` and ``H(., lam_i)`` are later evaluated at the same state.

Seeding contract: trajectory ``k`` of a run with master seed ``s`` draws all of
its randomness, in a fixed order, from
``Generator(PCG64(SeedSequence(s, spawn_key=(k,))))``. Results therefore do not
depend on how trajectories are grouped into blocks or spread over workers.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .errors import ConfigError, EvaluationError
from .hamiltonian import FiniteStateModel, HamiltonianModel, as_control, categorical_from_uniform
from .oracle import broken_metropolis_matrix, metropolis_matrix, uniform_proposal, _check_proposal
from .protocol import Protocol, StepProtocol, step_approximation

WORKERS_ENV = "NEQWORK_WORKERS"
BLOCK_SIZE = 4096


# ------------------------------------------------------------------ kernels

class MetropolisKernel:
    """Symmetric Gaussian-proposal Metropolis, ``substeps`` proposals per kernel step."""

    kind = "metropolis"
    conserves_canonical = True
    drift = 0.0

    def __init__(self, model: HamiltonianModel, sigma: float, substeps: int = 1):
        if model.is_finite:
            raise ConfigError("metropolis kernel needs a continuous model; use finite_metropolis")
        if not (isinstance(sigma, (int, float)) and math.isfinite(sigma) and sigma > 0):
            raise ConfigError(f"metropolis step size must be positive, got {sigma}")
        if int(substeps) != substeps or substeps < 1:
            raise ConfigError(f"substeps must be a positive integer, got {substeps}")
        self.model = model
        self.sigma = float(sigma)
        self.substeps = int(substeps)

    def spec(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma, "substeps": self.substeps}


class BrokenMetropolisKernel(MetropolisKernel):
    """Metropolis whose proposal carries a constant ``bias`` drift but is accepted as if symmetric.

    Does not conserve the canonical law. For negative tests only.
    """

    kind = "broken"
    conserves_canonical = False

    def __init__(self, model, bias: float, sigma: float = 0.5, substeps: int = 1):
        super().__init__(model, sigma, substeps)
        self.bias = float(bias)
        self.drift = self.bias

    def spec(self) -> dict:
        return {"kind": self.kind, "bias": self.bias, "sigma": self.sigma, "substeps": self.substeps}


class FiniteMatrixKernel:
    """Finite-state kernel given by ``matrix_fn(lam) -> row-stochastic matrix``."""

    kind = "finite_matrix"

    def __init__(self, model: FiniteStateModel, matrix_fn: Callable, conserves_canonical: bool = True):
        if not model.is_finite:
            raise ConfigError("finite-state kernel needs a finite-state model")
        self.model = model
        self._matrix_fn = matrix_fn
        self.conserves_canonical = conserves_canonical
        self.substeps = 1

    def matrix(self, lam) -> np.ndarray:
        return np.asarray(self._matrix_fn(as_control(lam, self.model.lambda_dim)), dtype=float)

    def spec(self) -> dict:
        return {"kind": self.kind}


class FiniteMetropolisKernel(FiniteMatrixKernel):
    kind = "finite_metropolis"

    def __init__(self, model: FiniteStateModel, proposal=None):
        if not model.is_finite:
            raise ConfigError("finite_metropolis kernel needs a finite-state model")
        self.proposal = (uniform_proposal(model.n_states) if proposal is None
                         else _check_proposal(proposal, model.n_states))
        super().__init__(model, lambda lam: metropolis_matrix(model, lam, self.proposal))

    def spec(self) -> dict:
        return {"kind": self.kind, "proposal": self.proposal.tolist()}


class BrokenFiniteKernel(FiniteMatrixKernel):
    kind = "broken"

    def __init__(self, model: FiniteStateModel, bias: float, proposal=None):
        self.bias = float(bias)
        self.proposal = (uniform_proposal(model.n_states) if proposal is None
                         else _check_proposal(proposal, model.n_states))
        super().__init__(model, lambda lam: broken_metropolis_matrix(model, lam, self.proposal, self.bias),
                         conserves_canonical=False)

    def spec(self) -> dict:
        return {"kind": self.kind, "bias": self.bias}


def identity_kernel(model: FiniteStateModel) -> FiniteMatrixKernel:
    """The kernel that never moves; trivially conserves every law."""
    return FiniteMatrixKernel(model, lambda lam: np.eye(model.n_states))


def build_kernel(spec: dict, model):
    """Kernel from ``{"kind": "metropolis", "sigma", "substeps"}``, ``{"kind": "finite_metropolis"}``
    or ``{"kind": "broken", "bias"}``."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("kernel spec must be an object with a 'kind' field")
    kind = spec["kind"]
    if kind == "metropolis":
        if "sigma" not in spec:
            raise ConfigError("kernel.sigma: required for metropolis")
        return MetropolisKernel(model, spec["sigma"], spec.get("substeps", 1))
    if kind == "finite_metropolis":
        return FiniteMetropolisKernel(model, spec.get("proposal"))
    if kind == "broken":
        if "bias" not in spec:
            raise ConfigError("kernel.bias: required for broken kernel")
        if model.is_finite:
            return BrokenFiniteKernel(model, spec["bias"], spec.get("proposal"))
        return BrokenMetropolisKernel(model, spec["bias"], spec.get("sigma", 0.5), spec.get("substeps", 1))
    raise ConfigError(f"unknown kernel kind '{kind}'")


# ------------------------------------------------------------ configuration

@dataclass
class SamplerConfig:
    kernel: object
    grid_steps: int = 100
    master_seed: int = 0
    substeps_per_segment: int = 1
    burn_in: Optional[int] = 10_000
    burn_in_start: Optional[np.ndarray] = None
    backend: Optional[str] = None

    def __post_init__(self):
        if int(self.grid_steps) != self.grid_steps or self.grid_steps < 1:
            raise ConfigError(f"grid_steps must be >= 1, got {self.grid_steps}")
        if int(self.substeps_per_segment) != self.substeps_per_segment or self.substeps_per_segment < 1:
            raise ConfigError("substeps_per_segment must be >= 1")
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")


@dataclass
class Trajectory:
    """States recorded at ``times``; ``states[j]`` is the state at ``times[j]``."""

    times: np.ndarray
    states: np.ndarray
    index: int = -1

    @property
    def final_state(self):
        return self.states[-1]

    def state_at(self, t: float):
        j = int(np.searchsorted(self.times, t))
        if j >= self.times.size or self.times[j] != t:
            raise KeyError(t)
        return self.states[j]


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))))


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    return max(1, n)


# ---------------------------------------------------------- initial states

def _burn_in(model: HamiltonianModel, lam, rng, cfg: SamplerConfig, kernel) -> np.ndarray:
    if not cfg.burn_in or cfg.burn_in < 1:
        raise ConfigError(f"{model.name} has no exact sampler; configure a positive burn_in length")
    sigma = getattr(kernel, "sigma", 0.5)
    start = np.zeros(model.dim) if cfg.burn_in_start is None else np.asarray(cfg.burn_in_start, float)
    normals = rng.standard_normal((1, cfg.burn_in, model.dim))
    uniforms = rng.random((1, cfg.burn_in))
    out = _kernels.metropolis_numpy(start[None, :], lam[None, :], cfg.burn_in, model.energies,
                                    model.beta, sigma, 0.0, normals, uniforms)
    return out[0, -1]


def sample_initial(model, lam0, rng: np.random.Generator, cfg: Optional[SamplerConfig] = None):
    """One draw from the canonical law at ``lam0``.

    Exact for finite-state models and models with a sampler; otherwise the end of
    a Metropolis burn-in chain of ``cfg.burn_in`` steps (approximate).
    """
    lam0 = as_control(lam0, model.lambda_dim)
    if model.is_finite:
        return int(model.sample_canonical(rng, lam0, 1)[0])
    if model.sampler is not None:
        return model.sample_canonical(rng, lam0, 1)[0]
    if cfg is None:
        raise ConfigError(f"{model.name} has no exact sampler; a SamplerConfig with burn_in is required")
    return _burn_in(model, lam0, rng, cfg, cfg.kernel)


def initial_is_exact(model) -> bool:
    return model.is_finite or model.sampler is not None


# -------------------------------------------------------------- propagation

def _cumulative(kernel: FiniteMatrixKernel, values: np.ndarray) -> np.ndarray:
    cums = []
    for lam in values:
        P = kernel.matrix(lam)
        if P.shape != (kernel.model.n_states,) * 2 or np.any(P < 0):
            raise ConfigError("kernel matrix is not a valid stochastic matrix")
        cums.append(np.cumsum(P, axis=1))
    return np.asarray(cums)


def _propagate_block(kernel, sp: StepProtocol, reps: int, x0, rngs, backend=None) -> np.ndarray:
    """Propagate initial states ``x0`` (one per generator in ``rngs``) through ``sp``."""
    n_seg = sp.n_segments
    n_draw = n_seg * reps
    model = kernel.model
    if model.is_finite:
        uniforms = np.empty((len(rngs), n_draw))
        for i, g in enumerate(rngs):
            uniforms[i] = g.random(n_draw)
        cum = _cumulative(kernel, sp.values[:-1])
        return _kernels.run_finite(np.asarray(x0, dtype=np.int64), cum, reps, uniforms, backend)
    normals = np.empty((len(rngs), n_draw, model.dim))
    uniforms = np.empty((len(rngs), n_draw))
    for i, g in enumerate(rngs):
        normals[i] = g.standard_normal((n_draw, model.dim))
        uniforms[i] = g.random(n_draw)
    try:
        return _kernels.run_metropolis(np.asarray(x0, dtype=float).reshape(len(rngs), model.dim),
                                       np.ascontiguousarray(sp.values[:-1]), reps, model, model.beta,
                                       kernel.sigma, kernel.drift, normals, uniforms, backend)
    except FloatingPointError as exc:
        raise EvaluationError(f"{model.name}: {exc}") from exc


def kernel_step(k, x, lam, rng: np.random.Generator, backend=None):
    """One transition of kernel ``k`` frozen at ``lam``."""
    lam = as_control(lam, k.model.lambda_dim)
    sp = StepProtocol([0.0, 1.0], np.stack([lam, lam]))
    out = _propagate_block(k, sp, k.substeps, [x], [rng], backend)
    return out[0, -1] if not k.model.is_finite else int(out[0, -1])


def propagate_step_protocol(k, x0, sp: StepProtocol, substeps_per_segment: int,
                            rng: np.random.Generator, backend=None) -> Trajectory:
    """Apply ``substeps_per_segment`` kernel steps at ``lam_i`` on each ``[t_i, t_{i+1})``."""
    if int(substeps_per_segment) != substeps_per_segment or substeps_per_segment < 1:
        raise ConfigError("substeps_per_segment must be >= 1")
    reps = int(substeps_per_segment) * k.substeps
    out = _propagate_block(k, sp, reps, [x0], [rng], backend)
    return Trajectory(sp.breakpoints.copy(), out[0])


def discretize(p, cfg: SamplerConfig) -> StepProtocol:
    return p if isinstance(p, StepProtocol) else step_approximation(p, cfg.grid_steps)


def simulate_block(model, p, cfg: SamplerConfig, start: int, stop: int, sp: Optional[StepProtocol] = None):
    """States at every breakpoint for trajectories ``start..stop-1``.

    Returns ``(sp, states)`` with ``states`` of shape ``(stop-start, S+1[, dim])``.
    """
    kernel = cfg.kernel
    if kernel.model is not model:
        raise ConfigError("kernel is bound to a different model")
    sp = discretize(p, cfg) if sp is None else sp
    if sp.lambda_dim != model.lambda_dim:
        raise ConfigError(f"protocol control dimension {sp.lambda_dim} != model's {model.lambda_dim}")
    rngs = [trajectory_rng(cfg.master_seed, k) for k in range(start, stop)]
    lam0 = sp.values[0]
    if model.is_finite:
        # Same draw as sample_initial: one uniform per trajectory through the canonical CDF.
        cdf = np.cumsum(model.canonical_probs(lam0))
        x0 = categorical_from_uniform(cdf, np.array([g.random(1)[0] for g in rngs]))
    else:
        if model.sampler is not None:
            x0 = np.concatenate([model.sampler(g, lam0, 1) for g in rngs]).reshape(-1, model.dim)
        else:
            x0 = np.array([_burn_in(model, lam0, g, cfg, kernel) for g in rngs]).reshape(-1, model.dim)
    reps = cfg.substeps_per_segment * kernel.substeps
    return sp, _propagate_block(kernel, sp, reps, x0, rngs, cfg.backend)


def sample_trajectory(model, p, cfg: SamplerConfig, index: int) -> Trajectory:
    """Trajectory number ``index`` of the run defined by ``cfg`` (deterministic in ``(master_seed, index)``)."""
    sp, states = simulate_block(model, p, cfg, index, index + 1)
    return Trajectory(sp.breakpoints.copy(), states[0], index)


def map_blocks(fn: Callable, n: int, block: int = BLOCK_SIZE, workers: Optional[int] = None) -> list:
    """Apply ``fn(start, stop)`` over fixed index blocks; results are returned in index order."""
    spans = [(a, min(a + block, n)) for a in range(0, n, block)]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(spans) <= 1:
        return [fn(a, b) for a, b in spans]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: fn(*s), spans))
