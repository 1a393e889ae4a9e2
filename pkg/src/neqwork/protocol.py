"""Control protocols ``lam(t) = lam_c(t) + lam_step(t)`` on ``[0, T]``.

The continuous part is piecewise linear between nodes, which makes its total
variation and its Stieltjes measure exact. The step part is right continuous.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DomainError, EvaluationError

# Grid points closer than this (relative to T) to a jump time are snapped onto it.
_SNAP = 1e-12


def _as_times(ts, what: str) -> np.ndarray:
    arr = np.asarray(ts, dtype=float)
    if arr.ndim != 1 or arr.size < 2:
        raise ConfigError(f"{what}: need at least two time points")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{what}: times must be finite")
    if arr[0] != 0.0:
        raise ConfigError(f"{what}: first time must be 0, got {arr[0]}")
    bad = np.nonzero(np.diff(arr) <= 0)[0]
    if bad.size:
        raise ConfigError(f"{what}[{bad[0] + 1}]: times must be strictly increasing")
    return arr


def _as_values(vals, n: int, what: str) -> np.ndarray:
    arr = np.asarray(vals, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != n:
        raise ConfigError(f"{what}: expected {n} values, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{what}: values must be finite")
    return arr


class StepProtocol:
    """``sum_i values[i] 1[t_i, t_{i+1}) + values[n] 1{T}`` over ``breakpoints`` ``t_0 = 0 < ... < t_n = T``."""

    def __init__(self, breakpoints, values):
        self.breakpoints = _as_times(breakpoints, "step breakpoints")
        self.values = _as_values(values, self.breakpoints.size, "step values")
        self.breakpoints.flags.writeable = False
        self.values.flags.writeable = False

    @property
    def T(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def lambda_dim(self) -> int:
        return self.values.shape[1]

    @property
    def n_segments(self) -> int:
        return self.breakpoints.size - 1

    def _check(self, t):
        if not 0.0 <= t <= self.T:
            raise DomainError(f"t={t} outside [0, {self.T}]")

    def value_at(self, t: float) -> np.ndarray:
        self._check(t)
        i = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return self.values[min(i, self.n_segments)].copy()

    def left_limit_at(self, t: float) -> np.ndarray:
        if t <= 0:
            raise DomainError(f"left limit undefined at t={t} <= 0")
        self._check(t)
        i = int(np.searchsorted(self.breakpoints, t, side="left")) - 1
        return self.values[i].copy()

    def jumps(self) -> np.ndarray:
        """``values[i] - values[i-1]`` for ``i = 1..n``."""
        return np.diff(self.values, axis=0)

    def total_variation(self) -> float:
        return float(np.abs(self.jumps()).sum())

    def shifted(self, offset) -> "StepProtocol":
        return StepProtocol(self.breakpoints, self.values + np.asarray(offset, dtype=float))

    def __eq__(self, other):
        return (isinstance(other, StepProtocol)
                and np.array_equal(self.breakpoints, other.breakpoints)
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"StepProtocol(breakpoints={self.breakpoints.tolist()}, values={self.values.tolist()})"


class ContinuousBVProtocol:
    """Piecewise-linear continuous path through ``(nodes[k], node_values[k])``."""

    def __init__(self, nodes, node_values):
        self.nodes = _as_times(nodes, "continuous nodes")
        self.node_values = _as_values(node_values, self.nodes.size, "continuous values")
        self.nodes.flags.writeable = False
        self.node_values.flags.writeable = False

    @classmethod
    def constant(cls, value, T: float) -> "ContinuousBVProtocol":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls([0.0, T], [v, v])

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def lambda_dim(self) -> int:
        return self.node_values.shape[1]

    def value_at(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.nodes, self.node_values[:, k]) for k in range(self.lambda_dim)])

    def values_at(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        return np.stack([np.interp(ts, self.nodes, self.node_values[:, k]) for k in range(self.lambda_dim)],
                        axis=-1)

    def total_variation(self) -> float:
        return float(np.abs(np.diff(self.node_values, axis=0)).sum())

    def is_constant(self) -> bool:
        return bool(np.all(self.node_values == self.node_values[0]))


class Protocol:
    """``lam = continuous + step`` on a shared horizon ``[0, T]``."""

    def __init__(self, continuous: Optional[ContinuousBVProtocol] = None,
                 step: Optional[StepProtocol] = None):
        if continuous is None and step is None:
            raise ConfigError("protocol needs a continuous part, a step part, or both")
        if continuous is None:
            continuous = ContinuousBVProtocol.constant(np.zeros(step.lambda_dim), step.T)
        if step is None:
            step = StepProtocol([0.0, continuous.T], np.zeros((2, continuous.lambda_dim)))
        if continuous.T != step.T:
            raise ConfigError(f"continuous part ends at {continuous.T} but step part at {step.T}")
        if continuous.lambda_dim != step.lambda_dim:
            raise ConfigError("continuous and step parts have different control dimensions")
        self.continuous = continuous
        self.step = step

    # constructors ----------------------------------------------------------
    @classmethod
    def constant(cls, value, T: float = 1.0) -> "Protocol":
        return cls(ContinuousBVProtocol.constant(value, T))

    @classmethod
    def linear(cls, start, end, T: float = 1.0) -> "Protocol":
        a = np.atleast_1d(np.asarray(start, dtype=float))
        b = np.atleast_1d(np.asarray(end, dtype=float))
        return cls(ContinuousBVProtocol([0.0, T], [a, b]))

    @classmethod
    def piecewise_linear(cls, nodes, values) -> "Protocol":
        return cls(ContinuousBVProtocol(nodes, values))

    @classmethod
    def steps(cls, breakpoints, values) -> "Protocol":
        return cls(step=StepProtocol(breakpoints, values))

    @classmethod
    def from_json(cls, obj: dict, where: str = "protocol") -> "Protocol":
        """Parse ``{"T": T, "continuous": [[t, lam...], ...], "steps": [[t, lam...], ...]}``."""
        if not isinstance(obj, dict):
            raise ConfigError(f"{where}: expected an object")
        if "T" not in obj:
            raise ConfigError(f"{where}.T: missing")
        T = obj["T"]
        if not isinstance(T, (int, float)) or isinstance(T, bool) or not T > 0:
            raise ConfigError(f"{where}.T: must be a positive number")
        T = float(T)
        parts = {}
        for key in ("continuous", "steps"):
            rows = obj.get(key)
            if rows is None:
                continue
            if not isinstance(rows, list) or not rows:
                raise ConfigError(f"{where}.{key}: must be a non-empty list of [t, lambda...] rows")
            ts, vs = [], []
            for i, row in enumerate(rows):
                if (not isinstance(row, list) or len(row) < 2
                        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in row)):
                    raise ConfigError(f"{where}.{key}[{i}]: expected [t, lambda...] of numbers")
                t = float(row[0])
                if not 0.0 <= t <= T:
                    raise ConfigError(f"{where}.{key}[{i}]: time {t} outside [0, {T}]")
                if ts and t <= ts[-1]:
                    raise ConfigError(f"{where}.{key}[{i}]: times must be strictly increasing")
                ts.append(t)
                vs.append([float(v) for v in row[1:]])
            if ts[0] != 0.0:
                raise ConfigError(f"{where}.{key}[0]: first time must be 0")
            if len({len(v) for v in vs}) != 1:
                raise ConfigError(f"{where}.{key}: rows have inconsistent control dimension")
            if ts[-1] < T:
                ts.append(T)
                vs.append(vs[-1])
            if len(ts) == 1:
                raise ConfigError(f"{where}.{key}: T must be positive")
            parts[key] = (ts, vs)
        if not parts:
            raise ConfigError(f"{where}: needs 'continuous' and/or 'steps'")
        cont = ContinuousBVProtocol(*parts["continuous"]) if "continuous" in parts else None
        step = StepProtocol(*parts["steps"]) if "steps" in parts else None
        return cls(cont, step)

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "continuous": [[float(t), *map(float, v)] for t, v in zip(self.continuous.nodes,
                                                                       self.continuous.node_values)],
            "steps": [[float(t), *map(float, v)] for t, v in zip(self.step.breakpoints, self.step.values)],
        }

    # evaluation ------------------------------------------------------------
    @property
    def T(self) -> float:
        return self.step.T

    @property
    def lambda_dim(self) -> int:
        return self.step.lambda_dim

    def value_at(self, t: float) -> np.ndarray:
        if not 0.0 <= t <= self.T:
            raise DomainError(f"t={t} outside [0, {self.T}]")
        return self.continuous.value_at(t) + self.step.value_at(t)

    def left_limit_at(self, t: float) -> np.ndarray:
        if t <= 0:
            raise DomainError(f"left limit undefined at t={t} <= 0")
        if t > self.T:
            raise DomainError(f"t={t} outside [0, {self.T}]")
        return self.continuous.value_at(t) + self.step.left_limit_at(t)

    def jump_times(self) -> np.ndarray:
        """Times of nonzero jumps of the step part."""
        jumps = self.step.jumps()
        nz = np.any(jumps != 0, axis=1)
        return self.step.breakpoints[1:][nz]

    def discontinuity_points(self) -> np.ndarray:
        """Nonzero jump times plus ``T``, which is always an evaluation point."""
        pts = self.jump_times()
        if pts.size == 0 or pts[-1] != self.T:
            pts = np.append(pts, self.T)
        return pts

    def total_variation(self) -> float:
        return self.continuous.total_variation() + self.step.total_variation()

    def is_step(self) -> bool:
        return self.continuous.is_constant()


def value_at(p: Protocol, t: float) -> np.ndarray:
    return p.value_at(t)


def left_limit_at(p: Protocol, t: float) -> np.ndarray:
    return p.left_limit_at(t)


def total_variation(p) -> float:
    return p.total_variation()


def _with_jump_points(grid: np.ndarray, jumps: np.ndarray, T: float) -> np.ndarray:
    if jumps.size:
        tol = _SNAP * T
        near = np.any(np.abs(grid[:, None] - jumps[None, :]) <= tol, axis=1)
        grid = np.concatenate([grid[~near], jumps])
    return np.unique(grid)


def step_approximation(p, n: int) -> StepProtocol:
    """Piecewise-constant ``lam^n`` sampling ``p`` at the left end of each cell.

    The grid is the uniform ``n``-cell grid refined by every jump time of ``p``;
    endpoint values are preserved. Protocols whose continuous part is constant
    are already step functions and are returned on their own breakpoints.
    """
    if isinstance(p, StepProtocol):
        return p
    if int(n) != n or n < 1:
        raise ConfigError(f"grid steps must be a positive integer, got {n}")
    if p.is_step():
        return p.step.shifted(p.continuous.node_values[0])
    grid = _with_jump_points(np.linspace(0.0, p.T, int(n) + 1), p.jump_times(), p.T)
    return sample_on_grid(p, grid)


def sample_on_grid(p: Protocol, grid) -> StepProtocol:
    """The step function taking ``p(t_k)`` on ``[t_k, t_{k+1})`` and ``p(T)`` at ``T``."""
    grid = np.asarray(grid, dtype=float)
    vals = p.continuous.values_at(grid) + np.stack([p.step.value_at(t) for t in grid])
    return StepProtocol(grid, vals)


def sup_distance(p: Protocol, sp: StepProtocol) -> float:
    """Exact ``sup_t |p(t) - sp(t)|`` (max-norm over components).

    Both functions are affine between the union of their nodes, so the supremum
    is attained at a node or at a one-sided limit into it.
    """
    pts = np.unique(np.concatenate([p.continuous.nodes, p.step.breakpoints, sp.breakpoints]))
    best = 0.0
    for t in pts:
        best = max(best, float(np.max(np.abs(p.value_at(t) - sp.value_at(t)))))
        if t > 0:
            best = max(best, float(np.max(np.abs(p.left_limit_at(t) - sp.left_limit_at(t)))))
    return best


_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(5)


def stieltjes_integrate(g: Callable, p: Protocol, grid=None, *, rule: str = "midpoint",
                        t0: float = 0.0, t1: Optional[float] = None,
                        refine: int = 256) -> float:
    """``int_{t0}^{t1} <g(t), d lam_c(t)>`` against the continuous part of ``p``.

    Cells are the continuous nodes merged with ``grid`` (default: ``refine``
    uniform cells). On each cell ``d lam_c = slope dt`` exactly and the time
    integral uses ``rule``: ``"midpoint"``, ``"left"``, ``"right"`` or ``"gauss"``.
    """
    T = p.T
    t1 = T if t1 is None else t1
    if not 0.0 <= t0 <= t1 <= T:
        raise DomainError(f"integration range [{t0}, {t1}] not inside [0, {T}]")
    if t0 == t1:
        return 0.0
    cont = p.continuous
    if grid is None:
        grid = np.linspace(0.0, T, refine + 1)
    pts = np.concatenate([cont.nodes, np.asarray(grid, dtype=float), [t0, t1]])
    pts = np.unique(pts[(pts >= t0) & (pts <= t1)])
    vals = cont.values_at(pts)
    total = 0.0
    for k in range(pts.size - 1):
        a, b = pts[k], pts[k + 1]
        dlam = vals[k + 1] - vals[k]
        if not np.any(dlam):
            continue
        if rule == "midpoint":
            ts, ws = [0.5 * (a + b)], [1.0]
        elif rule == "left":
            ts, ws = [a], [1.0]
        elif rule == "right":
            ts, ws = [b], [1.0]
        elif rule == "gauss":
            ts, ws = 0.5 * (a + b) + 0.5 * (b - a) * _GAUSS_X, 0.5 * _GAUSS_W
        else:
            raise ConfigError(f"unknown quadrature rule '{rule}'")
        avg = np.zeros(p.lambda_dim)
        for t, w in zip(ts, ws):
            gv = np.atleast_1d(np.asarray(g(t), dtype=float))
            if not np.all(np.isfinite(gv)):
                raise EvaluationError(f"integrand is not finite at t={t}")
            avg += w * gv
        total += float(np.dot(avg, dlam))
    return total
