"""Monte Carlo estimators for exponential work averages.

Exponential averages are accumulated in log space: with ``a_k = -beta W_k`` and
``m = max_k a_k`` every statistic is computed on ``exp(a_k - m)`` and shifted
back by ``m`` at the end, so a single extreme trajectory cannot overflow.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import (ConfigError, KernelRefusedError, NeqworkError, ObservableError,
                     StatisticsError)
from .hamiltonian import canonical_expectation, free_energy_difference
from .kernel import SamplerConfig, discretize, initial_is_exact, map_blocks, simulate_block
from .work import batch_work
from ._accel import backend as _backend

log = logging.getLogger(__name__)

BAND_SIGMAS = 4.0


def jackknife_stderr(values) -> float:
    """Delete-one jackknife standard error of the sample mean."""
    x = np.asarray(values, dtype=float).ravel()
    n = x.size
    if n < 2:
        raise StatisticsError("jackknife needs at least two values")
    loo = (x.sum() - x) / (n - 1)
    return float(math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))


def batch_means_stderr(values, n_batches: int = 32) -> float:
    """Standard error of the mean from ``n_batches`` contiguous batch means."""
    x = np.asarray(values, dtype=float).ravel()
    if x.size < 2 * n_batches:
        raise StatisticsError(f"need at least {2 * n_batches} values for {n_batches} batches")
    size = x.size // n_batches
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return float(np.std(means, ddof=1) / math.sqrt(n_batches))


def _stderr(values, method: str) -> float:
    if method == "jackknife":
        return jackknife_stderr(values)
    if method == "batch_means":
        return batch_means_stderr(values)
    raise ConfigError(f"unknown stderr method '{method}'")


def _exp(x: float) -> Optional[float]:
    """``exp(x)``, or ``None`` when it is not representable as a finite double."""
    if x > 709.78:
        return None
    return math.exp(x)


@dataclass
class ExpAverage:
    """Log-space exponential average of ``exp(a_k)``."""

    log_mean: float
    log_stderr: float
    shift: float
    scaled: np.ndarray = field(repr=False)

    @classmethod
    def of(cls, a: np.ndarray, method: str = "jackknife") -> "ExpAverage":
        a = np.asarray(a, dtype=float)
        shift = float(np.max(a))
        scaled = np.exp(a - shift)
        log_mean = float(logsumexp(a) - math.log(a.size))
        se = _stderr(scaled, method)
        log_se = math.log(se) + shift if se > 0 else -math.inf
        return cls(log_mean, log_se, shift, scaled)

    @property
    def mean(self) -> Optional[float]:
        return _exp(self.log_mean)

    @property
    def stderr(self) -> Optional[float]:
        return 0.0 if self.log_stderr == -math.inf else _exp(self.log_stderr)

    def z_score(self, log_target: float) -> float:
        """``(mean - target) / stderr`` computed without leaving log space."""
        if self.log_stderr == -math.inf:
            return 0.0 if self.log_mean == log_target else math.copysign(math.inf, self.log_mean - log_target)
        return math.exp(self.log_mean - self.log_stderr) - math.exp(log_target - self.log_stderr)


@dataclass
class WorkBatch:
    w: np.ndarray
    w0: np.ndarray
    final_states: np.ndarray


@dataclass
class EstimatorReport:
    n_samples: int
    beta: float
    log_mean_exp_w: float
    mean_exp_w: Optional[float]
    stderr_exp_w: Optional[float]
    delta_f_estimate: float
    stderr_delta_f: float
    mean_w: float
    stderr_w: float
    log_mean_exp_w0: float
    mean_exp_w0: Optional[float]
    stderr_exp_w0: Optional[float]
    delta_f_exact: Optional[float] = None
    z_score: Optional[float] = None
    z_score_w0: Optional[float] = None
    max_weight_fraction: float = 0.0
    top1pct_weight_fraction: float = 0.0
    effective_sample_size: float = 0.0
    second_law_ok: bool = True
    initial_exact: bool = True
    mode: str = "estimate"
    seed: Optional[int] = None
    grid_steps: Optional[int] = None
    config_digest: Optional[str] = None
    backend: str = field(default_factory=_backend)
    samples: Optional[WorkBatch] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("samples")
        return d

    def bands(self, sigmas: float = BAND_SIGMAS) -> dict:
        """Named acceptance bands and whether each passes."""
        out = {"second_law": self.second_law_ok}
        if self.z_score is not None:
            out["jarzynski_z"] = abs(self.z_score) <= sigmas
        if self.z_score_w0 is not None and self.mode == "bk":
            out["bk_z"] = abs(self.z_score_w0) <= sigmas
        return out


def report_from_works(w, w0, beta: float, *, delta_f_exact: Optional[float] = None,
                      stderr_method: str = "jackknife", **meta) -> EstimatorReport:
    """Summaries of per-trajectory works ``w`` (Jarzynski) and ``w0`` (Bochkov-Kuzovlev)."""
    w = np.asarray(w, dtype=float)
    w0 = np.asarray(w0, dtype=float)
    n = w.size
    if n < 2:
        raise StatisticsError("need at least two trajectories")
    ew = ExpAverage.of(-beta * w, stderr_method)
    ew0 = ExpAverage.of(-beta * w0, stderr_method)
    delta_f = -ew.log_mean / beta
    se_df = (math.exp(ew.log_stderr - ew.log_mean) / beta) if ew.log_stderr > -math.inf else 0.0
    mean_w = float(np.mean(w))
    se_w = _stderr(w, stderr_method)
    weights = ew.scaled / ew.scaled.sum()
    top = max(1, n // 100)
    top_frac = float(np.sort(weights)[-top:].sum())
    ess = float(1.0 / np.sum(weights ** 2))
    z = ew.z_score(-beta * delta_f_exact) if delta_f_exact is not None else None
    z0 = ew0.z_score(0.0)
    second_law = mean_w >= delta_f - BAND_SIGMAS * (se_w + se_df)
    return EstimatorReport(
        n_samples=n, beta=beta, log_mean_exp_w=ew.log_mean, mean_exp_w=ew.mean, stderr_exp_w=ew.stderr,
        delta_f_estimate=delta_f, stderr_delta_f=se_df, mean_w=mean_w, stderr_w=se_w,
        log_mean_exp_w0=ew0.log_mean, mean_exp_w0=ew0.mean, stderr_exp_w0=ew0.stderr,
        delta_f_exact=delta_f_exact, z_score=z, z_score_w0=z0,
        max_weight_fraction=float(weights.max()), top1pct_weight_fraction=top_frac,
        effective_sample_size=ess, second_law_ok=bool(second_law), **meta)


def _refuse_broken(cfg: SamplerConfig, allow_broken: bool):
    if not getattr(cfg.kernel, "conserves_canonical", False) and not allow_broken:
        raise KernelRefusedError(
            f"kernel '{cfg.kernel.kind}' does not conserve the canonical distribution; "
            "set allow_broken (CLI: --allow-broken) to run it anyway")


def sample_works(model, p, cfg: SamplerConfig, n: int, *, allow_broken: bool = False,
                 workers: Optional[int] = None) -> WorkBatch:
    """``(W, W0, x_T)`` for trajectories ``0..n-1`` of the run defined by ``cfg``."""
    _refuse_broken(cfg, allow_broken)
    if int(n) != n or n < 1:
        raise ConfigError(f"number of trajectories must be a positive integer, got {n}")
    sp = discretize(p, cfg)

    def block(a, b):
        _, states = simulate_block(model, p, cfg, a, b, sp=sp)
        w, w0 = batch_work(states, sp, model)
        return w, w0, states[:, -1]

    parts = map_blocks(block, int(n), workers=workers)
    return WorkBatch(np.concatenate([x[0] for x in parts]), np.concatenate([x[1] for x in parts]),
                     np.concatenate([x[2] for x in parts]))


def exact_delta_f(model, p) -> Optional[float]:
    """Reference free-energy difference when the model can supply it, else ``None``."""
    try:
        return free_energy_difference(model, p.value_at(0.0), p.value_at(p.T))
    except NeqworkError as exc:
        log.warning("no reference free energy: %s", exc)
        return None


def jarzynski_estimate(model, p, cfg: SamplerConfig, N: int, *, allow_broken: bool = False,
                       stderr_method: str = "jackknife", workers: Optional[int] = None,
                       mode: str = "estimate", config_digest: Optional[str] = None) -> EstimatorReport:
    """Estimate ``<exp(-beta W)>`` (and ``<exp(-beta W0)>``) from ``N`` trajectories."""
    if N < 2:
        raise StatisticsError("need N >= 2 trajectories")
    batch = sample_works(model, p, cfg, N, allow_broken=allow_broken, workers=workers)
    exact = initial_is_exact(model)
    if not exact:
        log.warning("initial states come from a %s-step burn-in chain; the initial law is approximate",
                    cfg.burn_in)
    rep = report_from_works(batch.w, batch.w0, model.beta, delta_f_exact=exact_delta_f(model, p),
                            stderr_method=stderr_method, initial_exact=exact, mode=mode,
                            seed=int(cfg.master_seed), grid_steps=int(cfg.grid_steps),
                            config_digest=config_digest)
    rep.samples = batch
    return rep


def bk_estimate(model, p, cfg: SamplerConfig, N: int, **kw) -> EstimatorReport:
    """Same sampling as :func:`jarzynski_estimate`; the target is ``<exp(-beta W0)> = 1``."""
    kw.setdefault("mode", "bk")
    return jarzynski_estimate(model, p, cfg, N, **kw)


def _apply_observable(f, states, model, vectorized: bool) -> np.ndarray:
    if model.is_finite:
        table = np.array([float(f(s)) for s in range(model.n_states)])
        return table[states]
    xs = states[:, 0] if model.dim == 1 else states
    if vectorized:
        return np.asarray(f(xs), dtype=float).reshape(states.shape[0])
    return np.array([float(f(x)) for x in xs])


def weighted_observable_estimate(model, p, cfg: SamplerConfig, N: int, f: Callable, bound: float, *,
                                 vectorized: bool = False, allow_broken: bool = False,
                                 workers: Optional[int] = None):
    """``(lhs, rhs, stderr)`` with ``lhs = mean f(x_T) exp(-beta W)`` and
    ``rhs = E_{lam(T)}[f] * mean exp(-beta W)``; ``stderr`` is that of ``lhs - rhs``.
    """
    batch = sample_works(model, p, cfg, N, allow_broken=allow_broken, workers=workers)
    fx = _apply_observable(f, batch.final_states, model, vectorized)
    worst = float(np.max(np.abs(fx)))
    if worst > bound:
        raise ObservableError(f"|f(x_T)| reached {worst}, above the declared bound {bound}")
    e_f = canonical_expectation(model, p.value_at(p.T), f)
    a = -model.beta * batch.w
    shift = float(np.max(a))
    v = np.exp(a - shift)
    scale = math.exp(shift)
    lhs = float(np.mean(fx * v)) * scale
    rhs = e_f * float(np.mean(v)) * scale
    se = jackknife_stderr((fx - e_f) * v) * scale
    return lhs, rhs, se


def convergence_study(model, p, cfg: SamplerConfig, N: int, grids: Sequence[int], **kw) -> list:
    """Estimates at several grid resolutions; every row targets the same ``Z_T / Z_0``."""
    if not grids:
        raise ConfigError("grids must be non-empty")
    rows = []
    for g in grids:
        rep = jarzynski_estimate(model, p, dataclasses.replace(cfg, grid_steps=int(g)), N, **kw)
        rows.append({"grid": int(g), "mean_exp_w": rep.mean_exp_w, "stderr_exp_w": rep.stderr_exp_w,
                     "log_mean_exp_w": rep.log_mean_exp_w, "delta_f_estimate": rep.delta_f_estimate,
                     "z_score": rep.z_score})
    return rows
