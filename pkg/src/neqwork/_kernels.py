"""Inner loops for propagating batches of trajectories through a step protocol.

Every routine takes its randomness as pre-drawn arrays so that the numba and
numpy implementations consume identical streams. Layout for a batch of ``N``
trajectories, ``S`` constancy segments and ``R`` kernel substeps per segment:

* continuous: ``normals (N, S*R, dim)``, ``uniforms (N, S*R)``
* finite:     ``uniforms (N, S*R)``

Outputs hold the state at every breakpoint: ``out[:, 0]`` is the initial state
and ``out[:, s+1]`` the state after the ``R`` substeps of segment ``s``.
"""
import math

import numpy as np

from ._accel import HAVE_NUMBA, njit

# Catalog energy codes understood by the compiled path (see hamiltonian.CODE_*).
_STIFFNESS = 0
_CENTER = 1


# ---------------------------------------------------------------- numpy path

def metropolis_numpy(x0, seg_lams, reps, energy_fn, beta, sigma, drift, normals, uniforms):
    n_traj, dim = x0.shape
    n_seg = seg_lams.shape[0]
    out = np.empty((n_traj, n_seg + 1, dim))
    out[:, 0] = x0
    x = x0.copy()
    for s in range(n_seg):
        lam = seg_lams[s]
        e = energy_fn(x, lam)
        for r in range(reps):
            j = s * reps + r
            y = x + sigma * normals[:, j, :] + drift
            ey = energy_fn(y, lam)
            dh = ey - e
            if not np.all(np.isfinite(ey)):
                raise FloatingPointError("non-finite proposal energy")
            acc = (dh <= 0.0) | (uniforms[:, j] < np.exp(-beta * np.maximum(dh, 0.0)))
            x = np.where(acc[:, None], y, x)
            e = np.where(acc, ey, e)
        out[:, s + 1] = x
    return out


def finite_numpy(s0, cum, reps, uniforms):
    n_traj = s0.shape[0]
    n_seg, n_states, _ = cum.shape
    out = np.empty((n_traj, n_seg + 1), dtype=np.int64)
    out[:, 0] = s0
    s = s0.astype(np.int64).copy()
    for seg in range(n_seg):
        rows_all = cum[seg]
        for r in range(reps):
            rows = rows_all[s]
            nxt = np.sum(rows <= uniforms[:, seg * reps + r][:, None], axis=1)
            s = np.minimum(nxt, n_states - 1)
        out[:, seg + 1] = s
    return out


# ---------------------------------------------------------------- numba path

def _energy_py(code, x, lam):
    acc = 0.0
    if code == 0:
        for d in range(x.shape[0]):
            acc += x[d] * x[d]
        return 0.5 * lam[0] * acc
    for d in range(x.shape[0]):
        diff = x[d] - lam[d]
        acc += diff * diff
    return 0.5 * acc


def _metropolis_py(x0, seg_lams, reps, code, beta, sigma, drift, normals, uniforms, out):
    n_traj, dim = x0.shape
    n_seg = seg_lams.shape[0]
    y = np.empty(dim)
    for i in range(n_traj):
        x = x0[i].copy()
        for d in range(dim):
            out[i, 0, d] = x[d]
        for s in range(n_seg):
            lam = seg_lams[s]
            e = _energy(code, x, lam)
            for r in range(reps):
                j = s * reps + r
                for d in range(dim):
                    y[d] = x[d] + sigma * normals[i, j, d] + drift
                ey = _energy(code, y, lam)
                if not math.isfinite(ey):
                    return False
                dh = ey - e
                if dh <= 0.0 or uniforms[i, j] < math.exp(-beta * dh):
                    for d in range(dim):
                        x[d] = y[d]
                    e = ey
            for d in range(dim):
                out[i, s + 1, d] = x[d]
    return True


def _finite_py(s0, cum, reps, uniforms, out):
    n_traj = s0.shape[0]
    n_seg, n_states, _ = cum.shape
    for i in range(n_traj):
        s = s0[i]
        out[i, 0] = s
        for seg in range(n_seg):
            for r in range(reps):
                u = uniforms[i, seg * reps + r]
                k = 0
                for j in range(n_states):
                    if cum[seg, s, j] <= u:
                        k += 1
                s = min(k, n_states - 1)
            out[i, seg + 1] = s


if HAVE_NUMBA:
    _energy = njit(_energy_py)
    _metropolis_nb = njit(_metropolis_py)
    _finite_nb = njit(_finite_py)
else:
    _energy = _energy_py
    _metropolis_nb = None
    _finite_nb = None


def metropolis_numba(x0, seg_lams, reps, code, beta, sigma, drift, normals, uniforms):
    if _metropolis_nb is None:
        raise RuntimeError("numba backend unavailable")
    out = np.empty((x0.shape[0], seg_lams.shape[0] + 1, x0.shape[1]))
    ok = _metropolis_nb(np.ascontiguousarray(x0, dtype=np.float64),
                        np.ascontiguousarray(seg_lams, dtype=np.float64), int(reps), int(code),
                        float(beta), float(sigma), float(drift),
                        np.ascontiguousarray(normals), np.ascontiguousarray(uniforms), out)
    if not ok:
        raise FloatingPointError("non-finite proposal energy")
    return out


def finite_numba(s0, cum, reps, uniforms):
    if _finite_nb is None:
        raise RuntimeError("numba backend unavailable")
    out = np.empty((s0.shape[0], cum.shape[0] + 1), dtype=np.int64)
    _finite_nb(np.ascontiguousarray(s0, dtype=np.int64), np.ascontiguousarray(cum), int(reps),
               np.ascontiguousarray(uniforms), out)
    return out


def run_metropolis(x0, seg_lams, reps, model, beta, sigma, drift, normals, uniforms, backend=None):
    """Dispatch: compiled loop for catalog energies, numpy otherwise."""
    use_nb = (backend or ("numba" if HAVE_NUMBA else "numpy")) == "numba"
    if use_nb and getattr(model, "code", None) is not None:
        return metropolis_numba(x0, seg_lams, reps, model.code, beta, sigma, drift, normals, uniforms)
    return metropolis_numpy(x0, seg_lams, reps, model.energies, beta, sigma, drift, normals, uniforms)


def run_finite(s0, cum, reps, uniforms, backend=None):
    use_nb = (backend or ("numba" if HAVE_NUMBA else "numpy")) == "numba"
    if use_nb:
        return finite_numba(s0, cum, reps, uniforms)
    return finite_numpy(s0, cum, reps, uniforms)
