"""Training loops: chance-constrained imitation (COIN), plain and hard-clipped
behaviour cloning, and constant-rate grid baselines.

Every method shares one loop.  Each epoch rolls out one episode with the
current policy, then updates:

* the policy on that episode in shuffled minibatches: states whose
  constraint check passed contribute the squared error to the expert label,
  the others the score-function safeguard term ``log pi(a_t|s_t) * Q(s_t, a_t)``
  (COIN only; the baselines use the squared error everywhere);
* the value ensemble (COIN only) on the same episode: backward heads on the
  discounted running cost, forward heads on the discounted cost-to-go and the
  action-value head on one-step TD targets (``q_target = "mc"`` uses the
  cost-to-go instead).  Each member sees its own bootstrap resample of the
  episode so the members disagree where data is thin.

COIN spends its first ``warmup_epochs`` as plain cloning with the safety layer
off while the ensemble trains, and explores around the projected action so the
action-value head can learn its slope.  The logged ``hot_metric`` comes from a
separate greedy rollout per epoch (no exploration, safety layer on).

Costs fed to the ensemble are scaled by ``1/T`` so that
``Vbar(s) + V(s) - c(s)`` estimates the trajectory-mean cost that ``g`` bounds.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .approximator import Adam, Mlp
from .chance import ValueEnsemble, evaluate_constraint, per_step_budget, safety_projection, sync_ensemble
from .config import apply_overrides, read_config
from .errors import ConfigError, EmptyDatasetError, TrainingAborted
from .records import EpisodeRecord

log = logging.getLogger(__name__)

METHODS = ("coin", "bc", "bc_hard", "grid")
PROBE_SEED = 20_000_003  # keeps probe episodes disjoint from training and evaluation seeds
LOG_COLUMNS = ("epoch", "mse", "mean_cost", "hot_metric", "feasibility_rate", "sigma_mean")


@dataclass(frozen=True)
class ChanceConfig:
    g: float = 0.05
    delta: float = 0.05
    gamma: float = 0.99
    n_members: int = 5
    bonferroni: bool = False

    def validate(self):
        if not 0.0 <= self.g:
            raise ConfigError("g must be >= 0")
        if not 0.0 < self.delta <= 0.5:
            raise ConfigError("delta must lie in (0, 0.5]")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.n_members < 2:
            raise ConfigError("n_members must be >= 2")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "coin"
    epochs: int = 200
    batch_size: int = 32
    lr_policy: float = 1e-3
    lr_value: float = 1e-3
    hidden: tuple = (64, 64)
    value_hidden: tuple = (64, 64)
    policy_std: float = 0.05
    policy_passes: int = 1
    safeguard_action: str = "sampled"
    explore_std: float = 0.05
    explore_offset_std: float = 0.2
    warmup_epochs: int = 20
    q_target: str = "td"
    safeguard_samples: int = 8
    value_passes: int = 2
    sync_interval: int = 10
    sync_rho: float = 0.5
    grid_rate: float = 0.5
    seed: int = 0
    mode: str = "cold"
    checkpoint_every: int = 0
    probe_episodes: int = 1
    chance: ChanceConfig = field(default_factory=ChanceConfig)

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_policy <= 0 or self.lr_value <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 <= self.grid_rate <= 1.0:
            raise ConfigError("grid_rate must lie in [0, 1]")
        if self.policy_std <= 0:
            raise ConfigError("policy_std must be positive")
        if not 0.0 < self.sync_rho <= 1.0:
            raise ConfigError("sync_rho must lie in (0, 1]")
        if self.mode not in ("cold", "warm"):
            raise ConfigError("mode must be 'cold' or 'warm'")
        if self.safeguard_action not in ("sampled", "taken"):
            raise ConfigError("safeguard_action must be 'sampled' or 'taken'")
        if self.q_target not in ("td", "mc"):
            raise ConfigError("q_target must be 'td' or 'mc'")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.explore_std < 0:
            raise ConfigError("explore_std must be >= 0")
        if self.probe_episodes < 0:
            raise ConfigError("probe_episodes must be >= 0")
        if self.safeguard_samples < 1:
            raise ConfigError("safeguard_samples must be >= 1")
        self.chance.validate()

    @classmethod
    def from_sections(cls, sections):
        chance = apply_overrides(ChanceConfig(), sections.get("chance", {}), "chance")
        cfg = apply_overrides(cls(), sections.get("train", {}), "train")
        return replace(cfg, chance=chance)

    @classmethod
    def from_file(cls, path):
        return cls.from_sections(read_config(path))

    def to_dict(self):
        return asdict(self)


# --------------------------------------------------------------------------
# policies
# --------------------------------------------------------------------------

class GridPolicy:
    """Constant action, stateless."""

    method = "grid"

    def __init__(self, rate):
        if not 0.0 <= rate <= 1.0:
            raise ConfigError("grid rate must lie in [0, 1]")
        self.rate = float(rate)

    def act(self, env, s):
        return self.rate, self.rate, None

    def to_dict(self):
        return {"method": "grid", "rate": self.rate}


class NetPolicy:
    """Deterministic policy mean, optionally hard-clipped to the worst-case-safe range."""

    def __init__(self, net, method="bc", g=None):
        self.net = net
        self.method = method
        self.g = g

    def act(self, env, s):
        raw = float(self.net.forward(s))
        if self.method == "bc_hard":
            lo, hi = env.hard_bound(self.g)
            return min(hi, max(lo, raw)), raw, None
        return raw, raw, None

    def to_dict(self):
        return {"method": self.method, "g": self.g, "policy": self.net.to_dict()}


class CoinPolicy:
    """Policy mean passed through the safety layer; records the constraint check."""

    method = "coin"

    def __init__(self, net, ensemble, chance, horizon):
        self.net = net
        self.ensemble = ensemble
        self.chance = chance
        self.horizon = horizon
        self.g_t, self.delta_t = per_step_budget(chance.g, chance.delta, horizon, chance.bonferroni)
        self.explore = None  # (rng, std) while training; None acts with the mean
        self.offset = 0.0
        self.enforce = True

    def act(self, env, s):
        raw = float(self.net.forward(s))
        c = env.current_cost() / self.horizon
        ev = evaluate_constraint(self.ensemble, s, c, self.g_t, self.delta_t)
        a = raw
        if self.enforce:
            q, d = self.ensemble.q_value(s, raw)
            a, _ = safety_projection(raw, q, d, self.g_t, c, ev.backward_value, env.safe_action)
        if self.explore is not None:
            # behaviour noise on the executed action so Q sees action variation:
            # a per-episode offset plus independent per-step jitter
            rng, std = self.explore
            a = min(1.0, max(0.0, a + self.offset + std * rng.standard_normal()))
        return a, raw, ev

    def to_dict(self):
        return {"method": "coin", "chance": asdict(self.chance), "horizon": self.horizon,
                "policy": self.net.to_dict(), "ensemble": self.ensemble.to_dict()}


def policy_from_dict(d):
    method = d["method"]
    if method == "grid":
        return GridPolicy(d["rate"])
    if method in ("bc", "bc_hard"):
        return NetPolicy(Mlp.from_dict(d["policy"]), method, d.get("g"))
    if method == "coin":
        return CoinPolicy(Mlp.from_dict(d["policy"]), ValueEnsemble.from_dict(d["ensemble"]),
                          ChanceConfig(**d["chance"]), d["horizon"])
    raise ValueError(f"unknown policy method {method!r}")


def save_policy(policy, path):
    Path(path).write_text(json.dumps(policy.to_dict()))


def load_policy(path):
    return policy_from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# rollouts
# --------------------------------------------------------------------------

def rollout(env, policy, seed, mode=None):
    s = env.reset(mode=mode, seed=seed)
    rec = EpisodeRecord()
    done = False
    hard = getattr(policy, "method", None) == "bc_hard"
    while not done:
        bound = env.hard_bound(policy.g) if hard else None
        a, raw, ev = policy.act(env, s)
        s_next, cost, done, info = env.step(a)
        if hard:
            info["hard_bound"] = bound
        rec.append(s, a, raw, cost, info["expert_action"], ev, info)
        s = s_next
    rec.final_state = s
    return rec


def episode_seed(seed, epoch):
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def evaluate(env, policy, n_episodes=100, seed=0, mode=None):
    """Frozen-policy rollouts on seeds disjoint from any training episode seed."""
    return [rollout(env, policy, episode_seed(10_000_019 + seed, k), mode) for k in range(n_episodes)]


def hot_metric(env, rec):
    """Average hot PMs per step (cloud) or average per-quarter cost (airline)."""
    if env.kind == "cloud":
        return float(np.mean([i["n_hot"] for i in rec.infos]))
    return rec.mean_cost


def state_costs(env, rec):
    """Per-state costs ``c(s_0), ..., c(s_T)``: the cost of ``s_0`` followed by the step costs."""
    c0 = float(env.h @ rec.states[0]) if env.h is not None else 0.0
    return np.concatenate([[c0], rec.costs])


def discounted_returns(costs, gamma):
    """Backward running cost ``Rbar_t = c_t + gamma Rbar_{t-1}`` and cost-to-go ``R_t = c_t + gamma R_{t+1}``."""
    n = len(costs)
    back = np.empty(n)
    fwd = np.empty(n)
    acc = 0.0
    for t in range(n):
        acc = costs[t] + gamma * acc
        back[t] = acc
    acc = 0.0
    for t in range(n - 1, -1, -1):
        acc = costs[t] + gamma * acc
        fwd[t] = acc
    return back, fwd


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    policy: object
    ensemble: ValueEnsemble | None
    log: list
    safeguard_counts: list
    infeasible_counts: list


class _Trainer:
    def __init__(self, env, cfg, checkpoint_dir=None):
        cfg.validate()
        self.env = env
        self.cfg = cfg
        self.T = env.horizon
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.ensemble = None
        if cfg.method == "grid":
            self.policy = GridPolicy(cfg.grid_rate)
            return
        self.net = Mlp([env.state_dim, *cfg.hidden, 1], output="sigmoid", rng=init_rng)
        self.opt = Adam(self.net, cfg.lr_policy)
        if cfg.method == "coin":
            ch = cfg.chance
            self.ensemble = ValueEnsemble(env.state_dim, ch.n_members, cfg.value_hidden, cfg.sync_interval,
                                          ch.gamma, rng=init_rng)
            self.value_opts = {id(n): Adam(n, cfg.lr_value) for n in self.ensemble.members()}
            self.policy = CoinPolicy(self.net, self.ensemble, ch, self.T)
            if cfg.explore_std > 0:
                self.policy.explore = (self.rng, cfg.explore_std)
        else:
            self.policy = NetPolicy(self.net, cfg.method, cfg.chance.g)

    # ------------------------------------------------------------------
    def _policy_update(self, S, y, A, infeasible):
        cfg = self.cfg
        n = S.shape[0]
        losses = []
        for _ in range(cfg.policy_passes):
            order = self.rng.permutation(n)
            for lo in range(0, n, cfg.batch_size):
                idx = order[lo : lo + cfg.batch_size]
                mu = self.net.forward(S[idx])
                err = mu - y[idx]
                up = np.where(infeasible[idx], 0.0, 2.0 * err)
                if infeasible[idx].any():
                    up = up + np.where(infeasible[idx], self._safeguard_upstream(S[idx], A[idx], mu), 0.0)
                    self.net.forward(S[idx])
                tape = self.net.backward(up / idx.shape[0])
                self.opt.step(tape)
                losses.append(float(np.mean(err**2)))
        loss = float(np.mean(losses))
        if not math.isfinite(loss):
            raise FloatingPointError("non-finite policy loss")
        return loss

    def _safeguard_upstream(self, S, A, mu):
        """d/dmu of ``log N(a; mu, std^2) * Q(s, a)``, i.e. ``Q (a - mu) / std^2``.

        ``taken`` scores the executed action; ``sampled`` averages over draws
        from the policy Gaussian, a score-function estimate of the gradient of
        the expected action value.
        """
        cfg = self.cfg
        var = cfg.policy_std**2
        if cfg.safeguard_action == "taken":
            q = self.ensemble.q_values(S, A)
            return q * (A - mu) / var
        k = cfg.safeguard_samples
        draws = mu[None, :] + cfg.policy_std * self.rng.standard_normal((k, mu.shape[0]))
        q = self.ensemble.q_values(np.tile(S, (k, 1)), np.clip(draws, 0.0, 1.0).ravel()).reshape(k, -1)
        return np.mean(q * (draws - mu[None, :]), axis=0) / var

    def _fit(self, net, X, y, idx):
        cfg = self.cfg
        opt = self.value_opts[id(net)]
        loss = 0.0
        for _ in range(cfg.value_passes):
            order = self.rng.permutation(idx)
            for lo in range(0, order.shape[0], cfg.batch_size):
                b = order[lo : lo + cfg.batch_size]
                pred = net.forward(X[b])
                err = pred - y[b]
                opt.step(net.backward(2.0 * err / b.shape[0]))
                loss = float(np.mean(err**2))
        if not math.isfinite(loss):
            raise FloatingPointError("non-finite value loss")
        return loss

    def _value_update(self, rec):
        ens = self.ensemble
        S = rec.state_matrix
        n = S.shape[0]
        costs = state_costs(self.env, rec) / self.T
        back, fwd = discounted_returns(costs, ens.gamma)
        back, fwd = back[:n], fwd[:n]
        A = np.asarray(rec.actions)
        for k in range(ens.n_members):
            boot = self.rng.integers(0, n, size=n)
            self._fit(ens.backward_heads[k], S, back, boot)
            boot = self.rng.integers(0, n, size=n)
            self._fit(ens.forward_heads[k], S, fwd, boot)
        if self.cfg.q_target == "td":
            # Q(s_t, a_t) <- c(s_t) + gamma * V(s_{t+1}); exact c(s_T) at the horizon
            nxt = np.vstack([S[1:], rec.final_state[None, :]])
            v_next = np.mean([h.forward(nxt) for h in ens.forward_heads], axis=0)
            v_next[-1] = costs[n]
            q_target = costs[:n] + ens.gamma * v_next
        else:
            q_target = fwd
        self._fit(ens.q_head, np.column_stack([S, A]), q_target, np.arange(n))

    # ------------------------------------------------------------------
    def checkpoint(self, name):
        if self.checkpoint_dir is None:
            return None
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        path = self.checkpoint_dir / name
        save_policy(self.policy, path)
        return path

    def _probe(self, epoch, rec):
        """Curve metric of the deployed policy: no exploration, safety layer on."""
        cfg = self.cfg
        if cfg.probe_episodes == 0:
            return hot_metric(self.env, rec)
        coin = isinstance(self.policy, CoinPolicy)
        if coin:
            saved = self.policy.explore, self.policy.enforce, self.policy.offset
            self.policy.explore, self.policy.enforce, self.policy.offset = None, True, 0.0
        try:
            return float(np.mean([hot_metric(self.env, rollout(self.env, self.policy,
                                                               episode_seed(PROBE_SEED + cfg.seed, epoch * 1000 + k),
                                                               cfg.mode))
                                  for k in range(cfg.probe_episodes)]))
        finally:
            if coin:
                self.policy.explore, self.policy.enforce, self.policy.offset = saved

    def run(self, log_path=None):
        cfg = self.cfg
        rows, safeguards, infeasibles = [], [], []
        fh = writer = None
        if log_path is not None:
            fh = open(log_path, "w", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
        try:
            for epoch in range(cfg.epochs):
                warm = cfg.method == "coin" and epoch < cfg.warmup_epochs
                if cfg.method == "coin":
                    self.policy.enforce = not warm
                    self.policy.offset = cfg.explore_offset_std * self.rng.standard_normal()
                rec = rollout(self.env, self.policy, episode_seed(cfg.seed, epoch), cfg.mode)
                S = rec.state_matrix
                y = np.asarray(rec.expert_actions)
                A = np.asarray(rec.actions)
                mse = float(np.mean((self.net.forward(S) - y) ** 2)) if cfg.method != "grid" else \
                    float(np.mean((A - y) ** 2))
                evs = rec.evaluations
                infeasible = np.array([ev is not None and not ev.feasible for ev in evs])
                sigma_mean = float(np.mean([ev.sigma for ev in evs])) if evs[0] is not None else 0.0
                try:
                    if cfg.method != "grid":
                        if cfg.method == "bc_hard":
                            lo, hi = np.array([i["hard_bound"] for i in rec.infos]).T
                            y = np.clip(y, lo, hi)
                        self._policy_update(S, y, A, infeasible & ~warm)
                    if self.ensemble is not None:
                        self._value_update(rec)
                        if cfg.sync_interval > 0 and (epoch + 1) % cfg.sync_interval == 0:
                            sync_ensemble(self.ensemble, cfg.sync_rho)
                    if not math.isfinite(mse) or not math.isfinite(rec.mean_cost):
                        raise FloatingPointError("non-finite loss")
                except FloatingPointError as exc:
                    path = self.checkpoint(f"abort_epoch{epoch}.json")
                    raise TrainingAborted(f"epoch {epoch}: {exc}", checkpoint=path) from exc
                row = (epoch, mse, rec.mean_cost, self._probe(epoch, rec),
                       1.0 - float(infeasible.mean()), sigma_mean)
                rows.append(row)
                safeguards.append(int(infeasible.sum()) if cfg.method == "coin" and not warm else 0)
                infeasibles.append(int(infeasible.sum()))
                if writer is not None:
                    writer.writerow(_fmt_row(row))
                    fh.flush()
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    self.checkpoint(f"epoch{epoch + 1}.json")
        finally:
            if fh is not None:
                fh.close()
            if isinstance(self.policy, CoinPolicy):
                self.policy.explore = None
                self.policy.enforce = True
                self.policy.offset = 0.0
        return TrainResult(self.policy, self.ensemble, rows, safeguards, infeasibles)


def _fmt_row(row):
    return [row[0], *(repr(float(v)) for v in row[1:])]


def train(env, cfg, log_path=None, checkpoint_dir=None):
    """Run ``cfg.method`` on ``env``; returns a :class:`TrainResult`."""
    if getattr(env, "dataset", None) is not None and len(env.dataset) == 0:
        raise EmptyDatasetError("training dataset is empty")
    return _Trainer(env, cfg, checkpoint_dir).run(log_path)


def train_coin(env, cfg, **kw):
    return train(env, replace(cfg, method="coin"), **kw)


def train_bc(env, cfg, **kw):
    return train(env, replace(cfg, method="bc"), **kw).policy


def train_bc_hard(env, cfg, **kw):
    return train(env, replace(cfg, method="bc_hard"), **kw).policy


def grid_policy(rate):
    return GridPolicy(rate)
