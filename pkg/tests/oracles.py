"""Independent reference computations used by the tests."""

import mpmath
import numpy as np

from coin.approximator import Mlp
from coin.chance import LinearGaussianSystem, td_update_backward, td_update_forward


def normal_quantile(p):
    """High-precision standard normal quantile via mpmath (50 digits)."""
    with mpmath.workdps(50):
        return float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(p) - 1))


def nearest_feasible_by_grid(a_raw, q, d, g, c, vbar, step=1e-4):
    """Closest grid action in [0, 1] to ``a_raw`` on ``q + d (a - a_raw) <= g + c - vbar``; None if none."""
    grid = np.linspace(0.0, 1.0, int(round(1 / step)) + 1)
    ok = q + d * (grid - a_raw) <= g + c - vbar + 1e-12
    if not ok.any():
        return None
    cand = grid[ok]
    return float(cand[np.argmin(np.abs(cand - a_raw))])


def backward_chain_values(P, c, gamma):
    """Stationary discounted backward value ``(I - gamma Pbar)^-1 c`` with the time-reversed chain ``Pbar``."""
    eta = stationary(P)
    Pbar = (P * eta[:, None]).T / eta[:, None]
    return np.linalg.solve(np.eye(len(c)) - gamma * Pbar, c)


def forward_chain_values(P, c, gamma):
    return np.linalg.solve(np.eye(len(c)) - gamma * P, c)


def stationary(P):
    w, v = np.linalg.eig(P.T)
    eta = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    return eta / eta.sum()


def tabular_net(n):
    """Linear net on one-hot features: one weight per state."""
    net = Mlp([n, 1])
    net.weights[0][:] = 0.0
    return net


def td_chain_estimates(P, c, gamma, n_chains=2000, steps=400, burn_in=100, seed=0):
    """Backward and forward values from forward-sampled trajectories by TD bootstrapping."""
    rng = np.random.default_rng(seed)
    n = len(c)
    eye = np.eye(n)
    back, fwd = tabular_net(n), tabular_net(n)
    eta = stationary(P)
    s = rng.choice(n, size=n_chains, p=eta)
    cum = np.cumsum(P, axis=1)
    for t in range(steps):
        lr = 0.5 if t < steps // 2 else 0.1
        nxt = (rng.random(n_chains)[:, None] > cum[s]).sum(axis=1)
        nxt = np.minimum(nxt, n - 1)
        prev_v = back.forward(eye[s])
        td_update_backward(back, eye[nxt], c[nxt], prev_v, gamma, lr)
        next_v = fwd.forward(eye[nxt])
        td_update_forward(fwd, eye[s], c[s], next_v, gamma, lr)
        s = nxt
    return back.forward(eye), fwd.forward(eye)


def gaussian_cost_system(seed=0):
    rng = np.random.default_rng(seed)
    A = np.array([[0.8, 0.1], [0.0, 0.7]])
    B = np.array([0.2, 0.1])
    L = rng.normal(scale=0.05, size=(2, 2))
    W = L @ L.T + 0.002 * np.eye(2)
    h = np.array([1.0, 0.5])
    return LinearGaussianSystem(A, B, W, h, np.array([0.1, 0.05]))
