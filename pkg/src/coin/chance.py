"""Chance-constraint machinery.

Covers the Gaussian tightening ``m(delta) = -sigma * Phi^{-1}(delta)``, the
value-function ensemble whose spread supplies ``sigma``, the state-level
feasibility check ``Vbar(s) + V(s) - c(s) <= g - m(delta)``, the closed-form
safety-layer projection, and TD regression steps for the value heads.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .approximator import Mlp
from .errors import DomainError

log = logging.getLogger(__name__)

# Acklam's rational approximation to the standard normal quantile.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p):
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log1p(-p))
        return -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def norm_ppf(p):
    """Standard normal quantile, rational approximation plus one Halley step (~1e-15 abs)."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"quantile undefined at p={p}")
    x = _acklam(p)
    # one Halley refinement against the exact CDF
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def m_delta(sigma, delta):
    """Tightening ``-sigma * Phi^{-1}(delta)``; positive for ``delta < 0.5``."""
    sigma = float(sigma)
    if sigma < 0 or math.isnan(sigma):
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    return -sigma * norm_ppf(delta) + 0.0


def ensemble_sigma(b_values):
    """Sample standard deviation (``n - 1``) of the per-member constraint values."""
    b = np.asarray(b_values, dtype=np.float64).ravel()
    if b.size < 2:
        raise ValueError("need at least two ensemble members")
    return float(np.std(b, ddof=1))


def per_step_budget(g, delta, horizon, bonferroni=False):
    """Local ``(g_t, delta_t)``: uniform split, or ``delta / T`` under Bonferroni."""
    return g, (delta / horizon if bonferroni else delta)


# --------------------------------------------------------------------------
# ensemble
# --------------------------------------------------------------------------

class ValueEnsemble:
    """N backward-value heads, N forward-value heads and one action-value head.

    Backward head ``n`` pairs with forward head ``n`` when forming the
    per-member constraint value ``b_n = Vbar_n(s) + V_n(s) - c``.
    """

    def __init__(self, state_dim, n_members=5, hidden=(64, 64), sync_interval=10, gamma=0.99,
                 rng=None, init_scale=1.0):
        if n_members < 2:
            raise ValueError("ensemble needs N >= 2")
        rng = np.random.default_rng(rng)
        sizes = [state_dim, *hidden, 1]
        self.state_dim = state_dim
        self.hidden = tuple(hidden)
        self.sync_interval = int(sync_interval)
        self.gamma = float(gamma)
        self.backward_heads = [Mlp(sizes, rng=rng, init_scale=init_scale) for _ in range(n_members)]
        self.forward_heads = [Mlp(sizes, rng=rng, init_scale=init_scale) for _ in range(n_members)]
        self.q_head = Mlp([state_dim + 1, *hidden, 1], rng=rng, init_scale=init_scale)

    @property
    def n_members(self):
        return len(self.backward_heads)

    @classmethod
    def zeros(cls, state_dim, n_members=2, hidden=(), **kw):
        ens = cls(state_dim, n_members, hidden, **kw)
        for net in ens.members():
            net.set_flat(np.zeros(net.n_params))
        return ens

    def members(self):
        return [*self.backward_heads, *self.forward_heads, self.q_head]

    def backward_values(self, s):
        return np.array([net.forward(s) for net in self.backward_heads])

    def forward_values(self, s):
        return np.array([net.forward(s) for net in self.forward_heads])

    def q_value(self, s, a):
        """``Q(s, a)`` and ``dQ/da`` for a single state."""
        x = np.append(np.asarray(s, dtype=np.float64), a)
        q = self.q_head.forward(x)
        d = self.q_head.backward(1.0).input_grad[-1]
        return float(q), float(d)

    def q_values(self, S, A):
        X = np.column_stack([S, A])
        return self.q_head.forward(X)

    # ------------------------------------------------------------------
    def to_dict(self):
        return {"version": 1, "n_members": self.n_members, "sync_interval": self.sync_interval,
                "gamma": self.gamma, "state_dim": self.state_dim, "hidden": list(self.hidden),
                "backward": [n.to_dict() for n in self.backward_heads],
                "forward": [n.to_dict() for n in self.forward_heads],
                "q": self.q_head.to_dict()}

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != 1:
            raise ValueError(f"unsupported ensemble manifest version {d.get('version')!r}")
        ens = cls.__new__(cls)
        ens.state_dim = d["state_dim"]
        ens.hidden = tuple(d["hidden"])
        ens.sync_interval = d["sync_interval"]
        ens.gamma = d["gamma"]
        ens.backward_heads = [Mlp.from_dict(x) for x in d["backward"]]
        ens.forward_heads = [Mlp.from_dict(x) for x in d["forward"]]
        ens.q_head = Mlp.from_dict(d["q"])
        if len(ens.backward_heads) != d["n_members"]:
            raise ValueError("manifest member count mismatch")
        return ens

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class ConstraintEvaluation:
    backward_value: float
    forward_value: float
    instantaneous_cost: float
    b: float
    sigma: float
    m_delta: float
    threshold: float
    feasible: bool


def evaluate_constraint(ensemble, s, c, g, delta):
    vb = ensemble.backward_values(s)
    vf = ensemble.forward_values(s)
    b_members = vb + vf - c
    sigma = ensemble_sigma(b_members)
    m = m_delta(sigma, delta)
    b = float(b_members.mean())
    threshold = g - m
    return ConstraintEvaluation(float(vb.mean()), float(vf.mean()), float(c), b, sigma, m, threshold,
                                bool(b <= threshold))


# --------------------------------------------------------------------------
# safety layer
# --------------------------------------------------------------------------

def safety_projection(a_raw, q, d, g, c, vbar, safe_action=1.0, eps=1e-12):
    """Closed-form nearest action on the linearised constraint.

    Returns ``(a_star, lam)`` with ``lam = max(0, -(g + c - vbar - q) / d^2)``
    and ``a_star = clip(a_raw - lam * d, 0, 1)``.  When the constraint is
    violated but ``d^2 < eps`` the linearisation has no direction and
    ``safe_action`` is returned with ``lam = inf``.
    """
    slack = g + c - vbar - q
    if slack >= 0:
        return float(a_raw), 0.0
    dd = d * d
    if dd < eps:
        log.warning("degenerate projection gradient (d^2=%g) under violation; using safe action", dd)
        return float(safe_action), math.inf
    lam = -slack / dd
    return float(min(1.0, max(0.0, a_raw - lam * d))), lam


def project_action(a_raw, s, ensemble, g, c_s, safe_action=1.0):
    """Safety-layer action for state ``s`` using the ensemble's mean backward value and Q."""
    vbar = float(ensemble.backward_values(s).mean())
    q, d = ensemble.q_value(s, a_raw)
    return safety_projection(a_raw, q, d, g, c_s, vbar, safe_action)[0]


# --------------------------------------------------------------------------
# value updates
# --------------------------------------------------------------------------

def _regress(net, states, targets, lr):
    pred = net.forward(states)
    err = np.atleast_1d(pred - targets)
    tape = net.backward(err.reshape(np.shape(pred)) * (2.0 / err.size))
    net.sgd_step(tape, lr)
    return float(np.mean(err**2))


def td_update_backward(member, states, costs, prev_values, gamma, lr):
    """One squared-error step of ``Vbar(s_t)`` toward ``c_t + gamma * prev_value``.

    ``prev_values`` is ``Vbar(s_{t-1})`` (zero at the first step) or any
    running backward return.  Accepts one transition or a batch; returns the
    pre-update loss.
    """
    targets = np.asarray(costs, dtype=np.float64) + gamma * np.asarray(prev_values, dtype=np.float64)
    _regress(member, states, targets, lr)
    return member


def td_update_forward(member, states, costs, next_values, gamma, lr):
    """One squared-error step of ``V(s_t)`` toward ``c_t + gamma * next_value``."""
    targets = np.asarray(costs, dtype=np.float64) + gamma * np.asarray(next_values, dtype=np.float64)
    _regress(member, states, targets, lr)
    return member


def _sync_group(nets, rho):
    flat = np.stack([n.get_flat() for n in nets])
    mean = flat.mean(axis=0)
    for n, p in zip(nets, flat):
        n.set_flat(p + rho * (mean - p))


def sync_ensemble(ensemble, rho=0.5):
    """Pull every member toward its group mean by fraction ``rho``."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    _sync_group(ensemble.backward_heads, rho)
    _sync_group(ensemble.forward_heads, rho)
    return ensemble


def diversity(nets):
    """Mean pairwise parameter distance."""
    flat = [n.get_flat() for n in nets]
    d = [np.linalg.norm(a - b) for i, a in enumerate(flat) for b in flat[i + 1:]]
    return float(np.mean(d)) if d else 0.0


# --------------------------------------------------------------------------
# linear-Gaussian cost streams (used to check the tightening empirically)
# --------------------------------------------------------------------------

@dataclass
class LinearGaussianSystem:
    """``s_{t+1} = A s_t + B a_t + w_t``, ``w_t ~ N(0, W)``, cost ``c_t = h . s_t``."""

    A: np.ndarray
    B: np.ndarray
    W: np.ndarray
    h: np.ndarray
    s0: np.ndarray

    def nominal(self, actions):
        """Expected states ``sbar_t`` for t = 0..T-1."""
        T = len(actions)
        d = self.s0.shape[0]
        out = np.empty((T, d))
        s = self.s0.astype(np.float64)
        for t in range(T):
            out[t] = s
            s = self.A @ s + self.B * actions[t]
        return out

    def step_std(self, T):
        """Per-step std of ``h . s_t`` (action independent)."""
        d = self.s0.shape[0]
        cov = np.zeros((d, d))
        out = np.empty(T)
        for t in range(T):
            out[t] = math.sqrt(max(self.h @ cov @ self.h, 0.0))
            cov = self.A @ cov @ self.A.T + self.W
        return out

    def mean_cost_std(self, T):
        """Std of the trajectory-mean cost ``(1/T) sum_t h . s_t``."""
        d = self.s0.shape[0]
        # c_t - cbar_t = sum_{k<t} h A^{t-1-k} w_k
        coef = np.zeros((T, d))
        for k in range(T):
            v = np.zeros(d)
            M = np.eye(d)
            for t in range(k + 1, T):
                v += self.h @ M
                M = self.A @ M
            coef[k] = v / T
        return float(math.sqrt(sum(c @ self.W @ c for c in coef)))

    def simulate_mean_costs(self, actions, n_paths, rng):
        T = len(actions)
        d = self.s0.shape[0]
        drift = np.outer(np.asarray(actions, dtype=np.float64), self.B)
        chol = np.linalg.cholesky(self.W)
        noise = rng.standard_normal((n_paths, T, d))
        return kernels.mean_cost_paths(self.A, drift, self.h, chol, self.s0, noise)
