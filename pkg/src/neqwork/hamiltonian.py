"""Parametrized Hamiltonians, canonical densities and partition functions.

Two model families share one surface:

* :class:`HamiltonianModel` on a continuous phase space ``R^n``. States are
  float arrays whose last axis has length ``dim``.
* :class:`FiniteStateModel` on ``{0, ..., n_states-1}``. States are integers.

Both expose ``energies(x, lam)`` (vectorized, unchecked, used by the hot paths),
``energy``/``dlambda_energy`` (checked, scalar), ``log_partition`` and
``sample_canonical``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from .errors import (ConfigError, DomainError, EstimationError, EvaluationError,
                     IntegrabilityError)

# Guard for the shifted Boltzmann integral; anything larger is treated as divergent.
_OVERFLOW_GUARD = 1e300
_FD_STEP = 1e-5


def as_control(lam, lambda_dim: int) -> np.ndarray:
    """Coerce ``lam`` to a finite float vector of length ``lambda_dim``."""
    arr = np.atleast_1d(np.asarray(lam, dtype=float))
    if arr.ndim != 1 or arr.shape[0] != lambda_dim:
        raise ConfigError(f"control parameter has shape {arr.shape}, expected ({lambda_dim},)")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"control parameter {arr.tolist()} is not finite")
    return arr


class _ModelBase:
    beta: float
    lambda_dim: int
    name: str
    is_finite: bool = False

    def __init__(self):
        self._logz_cache = {}

    def _point(self, x):
        raise NotImplementedError

    def energies(self, x, lam):
        raise NotImplementedError

    def dlambda_energies(self, x, lam):
        raise NotImplementedError

    def _compute_log_partition(self, lam: np.ndarray) -> float:
        raise NotImplementedError

    def energy(self, x, lam) -> float:
        xp = self._point(x)
        lp = as_control(lam, self.lambda_dim)
        val = float(self.energies(xp, lp))
        if not math.isfinite(val):
            raise EvaluationError(f"non-finite energy at x={np.asarray(x).tolist()}, lambda={lp.tolist()}")
        return val

    def dlambda_energy(self, x, lam) -> np.ndarray:
        xp = self._point(x)
        lp = as_control(lam, self.lambda_dim)
        val = np.asarray(self.dlambda_energies(xp, lp), dtype=float).reshape(self.lambda_dim)
        if not np.all(np.isfinite(val)):
            raise EvaluationError(
                f"non-finite d(energy)/d(lambda) at x={np.asarray(x).tolist()}, lambda={lp.tolist()}")
        return val

    def log_partition(self, lam) -> float:
        lp = as_control(lam, self.lambda_dim)
        key = tuple(lp.tolist())
        cached = self._logz_cache.get(key)
        if cached is None:
            cached = self._compute_log_partition(lp)
            self._logz_cache[key] = cached
        return cached

    def free_energy(self, lam) -> float:
        return -self.log_partition(lam) / self.beta

    def _spot_check_gradient(self, points, lams, rtol: float):
        for x, lam in zip(points, lams):
            analytic = np.asarray(self.dlambda_energies(x, lam), dtype=float).reshape(self.lambda_dim)
            fd = finite_difference_dlambda(self, x, lam)
            scale = max(1.0, float(np.max(np.abs(analytic))))
            if np.max(np.abs(analytic - fd)) > rtol * scale:
                raise ConfigError(
                    f"{self.name}: supplied d(energy)/d(lambda) {analytic.tolist()} disagrees with "
                    f"finite difference {fd.tolist()} at x={np.asarray(x).tolist()}, lambda={lam.tolist()}")


def finite_difference_dlambda(model, x, lam, h: float = _FD_STEP) -> np.ndarray:
    """Central finite difference of the energy in each control component."""
    lam = as_control(lam, model.lambda_dim)
    out = np.empty(model.lambda_dim)
    for k in range(model.lambda_dim):
        step = h * max(1.0, abs(lam[k]))
        up, dn = lam.copy(), lam.copy()
        up[k] += step
        dn[k] -= step
        out[k] = (float(model.energies(x, up)) - float(model.energies(x, dn))) / (2 * step)
    return out


class HamiltonianModel(_ModelBase):
    """Energy ``H(x, lam)`` on ``R^dim`` at inverse temperature ``beta``.

    ``energy_fn(x, lam)`` and ``dlambda_fn(x, lam)`` must broadcast over leading
    axes of ``x`` (shape ``(..., dim)``) and return shapes ``(...)`` and
    ``(..., lambda_dim)``. ``log_partition_fn(lam, beta)`` gives ``ln Z`` in
    closed form; without it the partition function is integrated numerically
    (``dim <= 2`` only). ``sampler(rng, lam, size)`` draws exactly from the
    canonical law; models without one are initialised by a burn-in chain.

    ``code``/``params`` identify catalog energies that have compiled kernels.
    """

    def __init__(self, energy_fn: Callable, dlambda_fn: Optional[Callable], beta: float, *,
                 dim: int = 1, lambda_dim: int = 1,
                 log_partition_fn: Optional[Callable] = None,
                 quadrature: Optional[dict] = None,
                 sampler: Optional[Callable] = None,
                 lambda_range: Optional[Sequence] = None,
                 code: Optional[int] = None,
                 name: str = "custom",
                 check: bool = True):
        super().__init__()
        if not (beta > 0 and math.isfinite(beta)):
            raise ConfigError(f"beta must be positive and finite, got {beta}")
        if dim < 1 or lambda_dim < 1:
            raise ConfigError("dim and lambda_dim must be >= 1")
        self.beta = float(beta)
        self.dim = int(dim)
        self.lambda_dim = int(lambda_dim)
        self._energy_fn = energy_fn
        self._dlambda_fn = dlambda_fn
        self._log_partition_fn = log_partition_fn
        self.quadrature = dict(quadrature or {})
        self.sampler = sampler
        self.code = code
        self.name = name
        if log_partition_fn is None and self.dim > 2:
            raise ConfigError("numeric quadrature is limited to dim <= 2; supply log_partition_fn")
        if check:
            rng = np.random.default_rng(20240601)
            if lambda_range is not None:
                lo, hi = (as_control(v, self.lambda_dim) for v in lambda_range)
                for lam in (lo, 0.5 * (lo + hi), hi):
                    if not math.isfinite(self.log_partition(lam)):
                        raise IntegrabilityError(f"{name}: log-partition not finite at lambda={lam.tolist()}")
                lams = [lo + (hi - lo) * rng.random(self.lambda_dim) for _ in range(16)]
            else:
                lams = [np.ones(self.lambda_dim) + 0.5 * rng.random(self.lambda_dim) for _ in range(16)]
            pts = [rng.standard_normal(self.dim) for _ in lams]
            if dlambda_fn is not None:
                self._spot_check_gradient(pts, lams, rtol=1e-6)

    def _point(self, x):
        arr = np.asarray(x, dtype=float)
        if arr.ndim == 0 and self.dim == 1:
            arr = arr.reshape(1)
        if arr.shape != (self.dim,):
            raise ConfigError(f"phase point has shape {arr.shape}, expected ({self.dim},)")
        if not np.all(np.isfinite(arr)):
            raise ConfigError(f"phase point {arr.tolist()} is not finite")
        return arr

    def energies(self, x, lam):
        return self._energy_fn(x, lam)

    def dlambda_energies(self, x, lam):
        if self._dlambda_fn is None:
            x = np.asarray(x, dtype=float)
            if x.ndim == 1:
                return finite_difference_dlambda(self, x, lam)
            flat = x.reshape(-1, self.dim)
            out = np.array([finite_difference_dlambda(self, p, lam) for p in flat])
            return out.reshape(x.shape[:-1] + (self.lambda_dim,))
        return self._dlambda_fn(x, lam)

    def _compute_log_partition(self, lam):
        if self._log_partition_fn is not None:
            val = float(self._log_partition_fn(lam, self.beta))
            if not math.isfinite(val):
                raise IntegrabilityError(f"{self.name}: log-partition diverges at lambda={lam.tolist()}")
            return val
        return _quadrature_log_partition(self, lam)

    def shifted(self, c: float) -> "HamiltonianModel":
        """Same model with ``c`` added to every energy."""
        base = self
        logz = None
        if self._log_partition_fn is not None:
            def logz(lam, beta):
                return base._log_partition_fn(lam, beta) - beta * c
        return HamiltonianModel(
            lambda x, lam: base._energy_fn(x, lam) + c, self._dlambda_fn, self.beta,
            dim=self.dim, lambda_dim=self.lambda_dim, log_partition_fn=logz,
            quadrature=self.quadrature, sampler=self.sampler, code=None,
            name=f"{self.name}+{c}", check=False)

    def sample_canonical(self, rng: np.random.Generator, lam, size: int) -> np.ndarray:
        if self.sampler is None:
            raise ConfigError(f"{self.name} has no exact canonical sampler")
        return self.sampler(rng, as_control(lam, self.lambda_dim), size)


def _bounds(model: HamiltonianModel):
    b = model.quadrature.get("bounds")
    if b is None:
        return [(-np.inf, np.inf)] * model.dim
    b = [tuple(map(float, pair)) for pair in b]
    if len(b) != model.dim:
        raise ConfigError("quadrature bounds must have one (lo, hi) pair per dimension")
    return b


def _energy_offset(model: HamiltonianModel, lam):
    """Approximate minimizer and minimum energy from a coarse grid; used to shift the integrand."""
    axes = []
    for lo, hi in _bounds(model):
        lo_f = lo if math.isfinite(lo) else -50.0
        hi_f = hi if math.isfinite(hi) else 50.0
        axes.append(np.linspace(lo_f, hi_f, 2001 if model.dim == 1 else 201))
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.dim)
    with np.errstate(all="ignore"):
        e = np.asarray(model.energies(mesh, lam), dtype=float)
    e = np.where(np.isfinite(e), e, np.inf)
    k = int(np.argmin(e))
    if not math.isfinite(e[k]):
        raise EvaluationError(f"{model.name}: energy not finite anywhere on the probe grid")
    return mesh[k], float(e[k])


def _integrate(model, lam, weight_fn, epsabs, epsrel=0.0):
    """Integrate ``weight_fn`` over the model's bounds, splitting at the energy minimum."""
    bounds = _bounds(model)
    x_star, _ = _energy_offset(model, lam)
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            if model.dim == 1:
                lo, hi = bounds[0]
                pieces = [(lo, x_star[0]), (x_star[0], hi)] if lo < x_star[0] < hi else [(lo, hi)]
                total, err = 0.0, 0.0
                for a, b in pieces:
                    v, e = integrate.quad(lambda t: weight_fn(np.array([t])), a, b,
                                          epsabs=epsabs / len(pieces), epsrel=epsrel, limit=400)
                    total += v
                    err += e
            else:
                total, err = integrate.nquad(lambda u, v: weight_fn(np.array([u, v])), bounds,
                                             opts={"epsabs": epsabs, "epsrel": epsrel, "limit": 200})
        except integrate.IntegrationWarning as exc:
            raise EstimationError(f"{model.name}: quadrature did not converge at lambda={lam.tolist()}: {exc}",
                                  achieved=None) from exc
    return total, err


def _quadrature_log_partition(model: HamiltonianModel, lam) -> float:
    tol = float(model.quadrature.get("tol", 1e-10))
    _, e0 = _energy_offset(model, lam)
    beta = model.beta

    def weight(x):
        return math.exp(-beta * (float(model.energies(x, lam)) - e0))

    try:
        total, err = _integrate(model, lam, weight, tol)
    except OverflowError as exc:
        raise IntegrabilityError(f"{model.name}: Boltzmann weight overflows at lambda={lam.tolist()}") from exc
    if not math.isfinite(total) or total > _OVERFLOW_GUARD:
        raise IntegrabilityError(f"{model.name}: partition integral diverges at lambda={lam.tolist()}")
    if total <= 0:
        raise EstimationError(f"{model.name}: non-positive partition integral", achieved=err)
    if err > tol:
        raise EstimationError(
            f"{model.name}: quadrature error {err:.3g} exceeds tolerance {tol:.3g}", achieved=err)
    return math.log(total) - beta * e0


class FiniteStateModel(_ModelBase):
    """Energy table ``E(s, lam)`` over ``n_states`` states.

    ``table_fn(lam)`` returns the length-``n_states`` energy vector;
    ``dtable_fn(lam)`` its derivative, shape ``(n_states, lambda_dim)``.
    """

    is_finite = True

    def __init__(self, table_fn: Callable, n_states: int, beta: float, *,
                 dtable_fn: Optional[Callable] = None, lambda_dim: int = 1,
                 lambda_range: Optional[Sequence] = None, name: str = "finite"):
        super().__init__()
        if n_states < 2:
            raise ConfigError("a finite-state model needs at least 2 states")
        if not (beta > 0 and math.isfinite(beta)):
            raise ConfigError(f"beta must be positive and finite, got {beta}")
        self.n_states = int(n_states)
        self.beta = float(beta)
        self.lambda_dim = int(lambda_dim)
        self._table_fn = table_fn
        self._dtable_fn = dtable_fn
        self.name = name
        self.dim = 0
        if lambda_range is not None:
            for lam in lambda_range:
                t = self.table(lam)
                if not np.all(np.isfinite(t)):
                    raise ConfigError(f"{name}: non-finite energies at lambda={np.asarray(lam).tolist()}")

    def table(self, lam) -> np.ndarray:
        lam = as_control(lam, self.lambda_dim)
        t = np.asarray(self._table_fn(lam), dtype=float)
        if t.shape != (self.n_states,):
            raise ConfigError(f"{self.name}: energy table has shape {t.shape}, expected ({self.n_states},)")
        return t

    def dtable(self, lam) -> np.ndarray:
        lam = as_control(lam, self.lambda_dim)
        if self._dtable_fn is not None:
            return np.asarray(self._dtable_fn(lam), dtype=float).reshape(self.n_states, self.lambda_dim)
        return np.stack([finite_difference_dlambda(self, s, lam) for s in range(self.n_states)])

    def _point(self, x):
        s = np.asarray(x)
        if s.ndim != 0 or not np.issubdtype(s.dtype, np.integer) or not 0 <= int(s) < self.n_states:
            raise ConfigError(f"state {x!r} is not an integer in [0, {self.n_states})")
        return int(s)

    def energies(self, x, lam):
        return self._table_fn(lam)[x]

    def dlambda_energies(self, x, lam):
        return self.dtable(lam)[x]

    def _compute_log_partition(self, lam):
        return float(logsumexp(-self.beta * self.table(lam)))

    def canonical_probs(self, lam) -> np.ndarray:
        w = -self.beta * self.table(lam)
        return np.exp(w - logsumexp(w))

    def shifted(self, c: float) -> "FiniteStateModel":
        base = self
        return FiniteStateModel(lambda lam: base._table_fn(lam) + c, self.n_states, self.beta,
                                dtable_fn=self._dtable_fn, lambda_dim=self.lambda_dim,
                                name=f"{self.name}+{c}")

    def sample_canonical(self, rng: np.random.Generator, lam, size: int) -> np.ndarray:
        cdf = np.cumsum(self.canonical_probs(lam))
        return categorical_from_uniform(cdf, rng.random(size))


def categorical_from_uniform(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw: the number of CDF entries <= u, clipped to the last index."""
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, cdf.shape[-1] - 1).astype(np.int64)


@dataclass(frozen=True)
class CanonicalDensity:
    """The Gibbs law ``exp(-beta H(., lam)) / Z_lam`` with cached ``log_z``."""

    model: _ModelBase
    lam: np.ndarray
    log_z: float

    @classmethod
    def of(cls, model, lam):
        lam = as_control(lam, model.lambda_dim)
        return cls(model, lam, model.log_partition(lam))

    def log_density(self, x):
        return -self.model.beta * np.asarray(self.model.energies(x, self.lam), dtype=float) - self.log_z

    def density(self, x):
        return np.exp(self.log_density(x))


# Functional surface ---------------------------------------------------------

def energy(model, x, lam) -> float:
    return model.energy(x, lam)


def dlambda_energy(model, x, lam) -> np.ndarray:
    return model.dlambda_energy(x, lam)


def log_partition(model, lam) -> float:
    return model.log_partition(lam)


def free_energy_difference(model, lam0, lamT) -> float:
    """``F(lamT) - F(lam0)`` with ``F = -ln Z / beta``."""
    return -(model.log_partition(lamT) - model.log_partition(lam0)) / model.beta


def canonical_expectation(model, lam, f: Callable, *, tol: float = 1e-14) -> float:
    """``E_lam[f]`` by finite sum or deterministic quadrature (dim <= 2)."""
    lam = as_control(lam, model.lambda_dim)
    if model.is_finite:
        states = np.arange(model.n_states)
        vals = np.asarray([f(int(s)) for s in states], dtype=float)
        return float(np.dot(model.canonical_probs(lam), vals))
    if model.dim > 2:
        raise ConfigError("canonical_expectation by quadrature is limited to dim <= 2")
    _, e0 = _energy_offset(model, lam)
    beta = model.beta
    log_z = model.log_partition(lam)
    shift = math.exp(-beta * e0 - log_z)

    def weighted(x):
        return float(f(x if model.dim > 1 else x[0])) * math.exp(-beta * (float(model.energies(x, lam)) - e0))

    total, _ = _integrate(model, lam, weighted, epsabs=tol, epsrel=1e-13)
    return total * shift


# Catalog --------------------------------------------------------------------

CODE_STIFFNESS = 0
CODE_CENTER = 1


def harmonic_stiffness(beta: float = 1.0, dim: int = 1, **kw) -> HamiltonianModel:
    """``H = lam |x|^2 / 2`` with scalar stiffness ``lam > 0``."""

    def e(x, lam):
        return 0.5 * lam[0] * np.sum(np.square(x), axis=-1)

    def de(x, lam):
        return (0.5 * np.sum(np.square(x), axis=-1))[..., None]

    def logz(lam, b):
        if lam[0] <= 0:
            return math.inf
        return 0.5 * dim * math.log(2 * math.pi / (b * lam[0]))

    def sample(rng, lam, size):
        if lam[0] <= 0:
            raise IntegrabilityError("harmonic_stiffness needs lambda > 0")
        return rng.standard_normal((size, dim)) / math.sqrt(beta * lam[0])

    return HamiltonianModel(e, de, beta, dim=dim, lambda_dim=1, log_partition_fn=logz,
                            sampler=sample, code=CODE_STIFFNESS, name="harmonic_stiffness", **kw)


def harmonic_center(beta: float = 1.0, dim: int = 1, **kw) -> HamiltonianModel:
    """``H = |x - lam|^2 / 2``; the control is the trap centre (``lambda_dim == dim``)."""

    def e(x, lam):
        return 0.5 * np.sum(np.square(x - lam), axis=-1)

    def de(x, lam):
        return lam - x

    def logz(lam, b):
        return 0.5 * dim * math.log(2 * math.pi / b)

    def sample(rng, lam, size):
        return lam + rng.standard_normal((size, dim)) / math.sqrt(beta)

    return HamiltonianModel(e, de, beta, dim=dim, lambda_dim=dim, log_partition_fn=logz,
                            sampler=sample, code=CODE_CENTER, name="harmonic_center", **kw)


def two_state(beta: float = 1.0) -> FiniteStateModel:
    """Energies ``(0, lam)``."""
    return FiniteStateModel(lambda lam: np.array([0.0, lam[0]]), 2, beta,
                            dtable_fn=lambda lam: np.array([[0.0], [1.0]]), name="two_state")


def energy_table(lambdas: Sequence[float], energies, beta: float = 1.0) -> FiniteStateModel:
    """Finite-state model from ``energies[state][k]`` given at control values ``lambdas[k]``.

    Energies are piecewise linear in the (scalar) control between table columns.
    """
    grid = np.asarray(lambdas, dtype=float)
    tab = np.asarray(energies, dtype=float)
    if tab.ndim != 2 or tab.shape[1] != grid.shape[0]:
        raise ConfigError(f"energy table must be [state][lambda] with {grid.shape[0]} columns, got {tab.shape}")
    if grid.shape[0] >= 2 and np.any(np.diff(grid) <= 0):
        raise ConfigError("table lambdas must be strictly increasing")
    if not np.all(np.isfinite(tab)):
        raise ConfigError("energy table contains non-finite entries")
    span = max(1.0, float(np.ptp(grid))) if grid.size else 1.0
    eps = 1e-12 * span

    def locate(lam):
        v = lam[0]
        if v < grid[0] - eps or v > grid[-1] + eps:
            raise DomainError(f"lambda={v} outside table range [{grid[0]}, {grid[-1]}]")
        if grid.shape[0] == 1:
            return 0, 0.0
        k = int(np.clip(np.searchsorted(grid, v, side="right") - 1, 0, grid.shape[0] - 2))
        return k, (v - grid[k]) / (grid[k + 1] - grid[k])

    def table(lam):
        k, w = locate(lam)
        if grid.shape[0] == 1:
            return tab[:, 0].copy()
        if w == 0.0:
            return tab[:, k].copy()
        if w == 1.0:
            return tab[:, k + 1].copy()
        return (1 - w) * tab[:, k] + w * tab[:, k + 1]

    def dtable(lam):
        if grid.shape[0] == 1:
            return np.zeros((tab.shape[0], 1))
        k, _ = locate(lam)
        return ((tab[:, k + 1] - tab[:, k]) / (grid[k + 1] - grid[k]))[:, None]

    return FiniteStateModel(table, tab.shape[0], beta, dtable_fn=dtable, name="table")


CATALOG = ("harmonic_stiffness", "harmonic_center", "two_state", "table")


def build_model(spec: dict):
    """Instantiate a catalog model from a config mapping."""
    if not isinstance(spec, dict) or "name" not in spec:
        raise ConfigError("model spec must be an object with a 'name' field")
    name = spec["name"]
    beta = spec.get("beta", 1.0)
    if not isinstance(beta, (int, float)) or isinstance(beta, bool):
        raise ConfigError("model.beta must be a number")
    beta = float(beta)
    if name == "harmonic_stiffness":
        return harmonic_stiffness(beta, dim=int(spec.get("dim", 1)))
    if name == "harmonic_center":
        return harmonic_center(beta, dim=int(spec.get("dim", 1)))
    if name == "two_state":
        return two_state(beta)
    if name == "table":
        if "energies" not in spec or "lambdas" not in spec:
            raise ConfigError("table model needs 'lambdas' and 'energies'")
        return energy_table(spec["lambdas"], spec["energies"], beta)
    raise ConfigError(f"unknown model '{name}'; catalog: {', '.join(CATALOG)}")
