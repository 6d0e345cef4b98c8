"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time.  Set ``COIN_NO_NUMBA=1`` to force
the numpy path (useful for debugging and for the kernel benchmark).  Both
implementations are always importable under their private names so tests can
check them against each other.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("COIN_NO_NUMBA", "0") not in ("1", "true", "yes")

__all__ = [
    "USE_NUMBA",
    "best_fit_decreasing",
    "pm_usage",
    "mean_cost_paths",
]


# --------------------------------------------------------------------------
# best-fit decreasing placement
# --------------------------------------------------------------------------

def _bfd_python(sizes, remaining):
    # ties broken by PM index; items taken largest-first, stable on index
    order = np.argsort(-sizes, kind="mergesort")
    rem = remaining.copy()
    out = np.full(sizes.shape[0], -1, dtype=np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        best = -1
        best_left = np.inf
        for p in range(rem.shape[0]):
            left = rem[p] - sizes[i]
            if left >= -1e-9 and left < best_left:
                best_left = left
                best = p
        if best >= 0:
            out[i] = best
            rem[best] -= sizes[i]
    return out, rem


def _bfd_numpy(sizes, remaining):
    order = np.argsort(-sizes, kind="mergesort")
    rem = remaining.astype(np.float64).copy()
    out = np.full(sizes.shape[0], -1, dtype=np.int64)
    for i in order:
        left = rem - sizes[i]
        left[left < -1e-9] = np.inf
        p = int(np.argmin(left))
        if np.isfinite(left[p]):
            out[i] = p
            rem[p] -= sizes[i]
    return out, rem


# --------------------------------------------------------------------------
# per-PM instantaneous usage
# --------------------------------------------------------------------------

def _pm_usage_loop(vm_pm, vm_load, n_pms):
    out = np.zeros(n_pms)
    for i in range(vm_pm.shape[0]):
        p = vm_pm[i]
        if p >= 0:
            out[p] += vm_load[i]
    return out


def _pm_usage_numpy(vm_pm, vm_load, n_pms):
    mask = vm_pm >= 0
    return np.bincount(vm_pm[mask], weights=vm_load[mask], minlength=n_pms).astype(np.float64)


# --------------------------------------------------------------------------
# Monte-Carlo trajectory-mean cost for a linear-Gaussian system
# --------------------------------------------------------------------------

def _mean_cost_paths_loop(A, drift, h, chol, s0, noise):
    # noise: (n_paths, T, d) standard normals
    n_paths, T, d = noise.shape
    out = np.empty(n_paths)
    s = np.empty(d)
    w = np.empty(d)
    nxt = np.empty(d)
    for n in range(n_paths):
        for j in range(d):
            s[j] = s0[j]
        total = 0.0
        for t in range(T):
            c = 0.0
            for j in range(d):
                c += h[j] * s[j]
            total += c
            for j in range(d):
                acc = 0.0
                for k in range(j + 1):
                    acc += chol[j, k] * noise[n, t, k]
                w[j] = acc
            for j in range(d):
                acc = drift[t, j] + w[j]
                for k in range(d):
                    acc += A[j, k] * s[k]
                nxt[j] = acc
            for j in range(d):
                s[j] = nxt[j]
        out[n] = total / T
    return out


def _mean_cost_paths_numpy(A, drift, h, chol, s0, noise):
    n_paths, T, d = noise.shape
    s = np.broadcast_to(s0, (n_paths, d)).copy()
    total = np.zeros(n_paths)
    for t in range(T):
        total += s @ h
        s = s @ A.T + drift[t] + noise[:, t, :] @ chol.T
    return total / T


if USE_NUMBA:
    _bfd_numba = njit(cache=True)(_bfd_python)
    _pm_usage_numba = njit(cache=True)(_pm_usage_loop)
    _mean_cost_paths_numba = njit(cache=True)(_mean_cost_paths_loop)

    def best_fit_decreasing(sizes, remaining):
        return _bfd_numba(np.ascontiguousarray(sizes, dtype=np.float64),
                          np.ascontiguousarray(remaining, dtype=np.float64))

    def pm_usage(vm_pm, vm_load, n_pms):
        return _pm_usage_numba(np.ascontiguousarray(vm_pm, dtype=np.int64),
                               np.ascontiguousarray(vm_load, dtype=np.float64), int(n_pms))

    def mean_cost_paths(A, drift, h, chol, s0, noise):
        return _mean_cost_paths_numba(*(np.ascontiguousarray(x, dtype=np.float64)
                                        for x in (A, drift, h, chol, s0, noise)))
else:
    def best_fit_decreasing(sizes, remaining):
        return _bfd_numpy(np.asarray(sizes, dtype=np.float64), np.asarray(remaining, dtype=np.float64))

    def pm_usage(vm_pm, vm_load, n_pms):
        return _pm_usage_numpy(np.asarray(vm_pm, dtype=np.int64), np.asarray(vm_load, dtype=np.float64), n_pms)

    def mean_cost_paths(A, drift, h, chol, s0, noise):
        return _mean_cost_paths_numpy(*(np.asarray(x, dtype=np.float64)
                                        for x in (A, drift, h, chol, s0, noise)))


best_fit_decreasing.__doc__ = """Place items largest-first on the bin with least leftover room.

Returns ``(assignment, remaining)`` where ``assignment[i]`` is the bin index
of item ``i`` or -1 when nothing fits.
"""
