"""Work functionals along sampled trajectories.

The continuous-part integral is evaluated cell by cell on the trajectory's time
grid as the energy change ``H(x_k, lam(t_k - 0)) - H(x_k, lam(t_{k-1}))`` at the
state recorded at the right end of the cell; jumps contribute
``H(x_k, lam(t_k)) - H(x_k, lam(t_k - 0))``. The two sums telescope into the
work of the step approximation on that grid, so the exponential average stays
exact at any resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError
from .protocol import Protocol, StepProtocol, stieltjes_integrate


@dataclass(frozen=True)
class WorkSample:
    w: float
    w0: float
    trajectory_index: int


def _align(times: np.ndarray, required) -> np.ndarray:
    idx = np.searchsorted(times, required)
    for t, j in zip(np.atleast_1d(required), np.atleast_1d(idx)):
        if j >= times.size or times[j] != t:
            raise AlignmentError(f"trajectory has no state recorded at t={t}")
    return idx


def work_step_protocol(traj, sp: StepProtocol, model) -> float:
    """``sum_i H(x(t_i), lam_i) - H(x(t_i), lam_{i-1})`` over the breakpoints of ``sp``."""
    idx = _align(traj.times, sp.breakpoints[1:])
    total = 0.0
    for i, j in enumerate(idx, start=1):
        if np.array_equal(sp.values[i], sp.values[i - 1]):
            continue
        x = traj.states[j]
        total += float(model.energies(x, sp.values[i])) - float(model.energies(x, sp.values[i - 1]))
    return total


def work_components(traj, p, model):
    """``(continuous_part_work, jump_work)`` for protocol ``p`` along ``traj``."""
    if isinstance(p, StepProtocol):
        return 0.0, work_step_protocol(traj, p, model)
    if p.total_variation() == 0.0:
        return 0.0, 0.0
    times = traj.times
    if times[0] != 0.0 or times[-1] != p.T:
        raise AlignmentError(f"trajectory must span [0, {p.T}], got [{times[0]}, {times[-1]}]")
    _align(times, p.discontinuity_points())
    cont = jump = 0.0
    lam_prev = p.value_at(times[0])
    for k in range(1, times.size):
        t = times[k]
        x = traj.states[k]
        lam_left = p.left_limit_at(t)
        lam_now = p.value_at(t)
        h_left = float(model.energies(x, lam_left))
        if not np.array_equal(lam_left, lam_prev):
            cont += h_left - float(model.energies(x, lam_prev))
        if not np.array_equal(lam_now, lam_left):
            jump += float(model.energies(x, lam_now)) - h_left
        lam_prev = lam_now
    return cont, jump


def work_jarzynski(traj, p, model) -> float:
    """Continuous-part integral plus jump terms."""
    cont, jump = work_components(traj, p, model)
    return cont + jump


def endpoint_term(x_T, p, model) -> float:
    """``H(x_T, lam(T)) - H(x_T, lam(0))``."""
    lam_T = p.value_at(p.T)
    lam_0 = p.value_at(0.0)
    return float(model.energies(x_T, lam_T)) - float(model.energies(x_T, lam_0))


def work_bochkov_kuzovlev(traj, p, model) -> float:
    """``W - (H(x_T, lam(T)) - H(x_T, lam(0)))``."""
    return work_jarzynski(traj, p, model) - endpoint_term(traj.final_state, p, model)


def work_sample(traj, p, model) -> WorkSample:
    w = work_jarzynski(traj, p, model)
    return WorkSample(w, w - endpoint_term(traj.final_state, p, model), getattr(traj, "index", -1))


def stieltjes_work(traj, p: Protocol, model, rule: str = "midpoint") -> float:
    """Work with the continuous part computed as an explicit ``d lam_c`` integral of ``dH/dlam``.

    The state on each cell ``(t_{k-1}, t_k]`` is the one recorded at ``t_k``.
    Differs from :func:`work_jarzynski` by at most ``O(mesh * total_variation)``.
    """
    times = traj.times

    def state_at(t):
        j = min(int(np.searchsorted(times, t, side="left")), times.size - 1)
        return traj.states[j]

    def integrand(t):
        return model.dlambda_energies(state_at(t), p.value_at(t) if t < p.T else p.left_limit_at(t))

    cont = stieltjes_integrate(integrand, p, grid=times, rule=rule)
    jump = 0.0
    for t in p.jump_times():
        x = state_at(t)
        jump += float(model.energies(x, p.value_at(t))) - float(model.energies(x, p.left_limit_at(t)))
    return cont + jump


def batch_work(states: np.ndarray, sp: StepProtocol, model):
    """Vectorized ``(W, W0)`` for a block of trajectories recorded on ``sp``'s breakpoints."""
    n = states.shape[0]
    w = np.zeros(n)
    vals = sp.values
    for i in range(1, vals.shape[0]):
        if np.array_equal(vals[i], vals[i - 1]):
            continue
        x = states[:, i]
        w += model.energies(x, vals[i]) - model.energies(x, vals[i - 1])
    x_T = states[:, -1]
    w0 = w - (model.energies(x_T, vals[-1]) - model.energies(x_T, vals[0]))
    return w, w0
