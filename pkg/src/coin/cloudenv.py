"""Cloud vCPU oversubscription environment.

VM requests from a :class:`~coin.telemetry.TraceDataset` arrive over the
episode.  The per-step action ``a`` is the predicted usage rate of the
arriving requests: each one is promised its full ``requested`` virtual cores
but only ``requested * max(a, a_floor, 1/max_oversub_factor)`` physical cores
are reserved for it.  Requests are placed best-fit decreasing on the
remaining physical capacity; whatever does not fit waits for the next step.

A PM is hot when its instantaneous usage exceeds ``hot_threshold`` of its
capacity, and the per-step cost is ``h . s_{t+1}`` where ``h`` selects the
hot-PM fraction by default.

State vector layout (``d = W + 5 + n_regimes``)::

    [0]            awaiting requested cores / total physical capacity
    [1 .. W]       cluster mean usage rate, last W steps (oldest first)
    [W+1]          hot-PM fraction
    [W+2]          free physical capacity fraction
    [W+3]          episode progress t / T
    [W+4]          reserved / promised cores over running VMs (1 when idle)
    [W+5 ..]       share of awaiting cores per usage regime
"""

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .config import apply_overrides, read_config
from .errors import ConfigError, DomainError
from .records import EpisodeRecord, write_episode_csv

WAITING, PENDING, RUNNING, DONE = 0, 1, 2, 3


@dataclass(frozen=True)
class CloudConfig:
    n_pms: int = 20
    pm_capacity: int = 32
    hot_threshold: float = 0.95
    horizon: int = 100
    warm_fill: float = 0.0
    a_floor: float = 0.1
    max_oversub_factor: float = 5.0
    history_window: int = 10
    arrival_window: float = 0.3
    lifetime: float = 0.0
    mode: str = "cold"

    def validate(self):
        if self.n_pms < 1 or self.pm_capacity < 1:
            raise ConfigError("n_pms and pm_capacity must be positive")
        if not 0.0 < self.hot_threshold < 1.0:
            raise ConfigError("hot_threshold must lie in (0, 1)")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not 0.0 <= self.warm_fill < 1.0:
            raise ConfigError("warm_fill must lie in [0, 1)")
        if not 0.0 < self.a_floor <= 1.0:
            raise ConfigError("a_floor must lie in (0, 1]")
        if self.max_oversub_factor < 1.0:
            raise ConfigError("max_oversub_factor must be >= 1")
        if self.history_window < 1:
            raise ConfigError("history_window must be >= 1")
        if not 0.0 < self.arrival_window <= 1.0:
            raise ConfigError("arrival_window must lie in (0, 1]")
        if self.lifetime < 0:
            raise ConfigError("lifetime must be >= 0")
        if self.mode not in ("cold", "warm"):
            raise ConfigError("mode must be 'cold' or 'warm'")

    @property
    def min_rate(self):
        return max(self.a_floor, 1.0 / self.max_oversub_factor)

    @classmethod
    def from_file(cls, path, section="env"):
        return apply_overrides(cls(), read_config(path).get(section, {}), section)


@dataclass
class PmState:
    capacity: int
    allocated_virtual: float
    reserved: float
    instantaneous_usage: float
    hot: bool


class CloudEnv:
    kind = "cloud"
    safe_action = 1.0  # full reservation, no oversubscription

    def __init__(self, dataset, config=None, h=None):
        self.cfg = config or CloudConfig(horizon=dataset.horizon)
        self.cfg.validate()
        if dataset.horizon < self.cfg.horizon:
            raise ConfigError(f"dataset horizon {dataset.horizon} shorter than env horizon {self.cfg.horizon}")
        if len(dataset) == 0:
            raise ConfigError("dataset has no traces")
        self.dataset = dataset
        self.usage = dataset.usage[:, : self.cfg.horizon]
        self.requested = dataset.requested.astype(np.float64)
        self.regime_of = dataset.regime_index()
        self.n_regimes = len(dataset.regimes)
        self.max_usage = self.usage.max(axis=1)
        W = self.cfg.history_window
        self.state_dim = W + 5 + self.n_regimes
        self.hot_index = W + 1
        if h is None:
            h = np.zeros(self.state_dim)
            h[self.hot_index] = 1.0
        self.h = np.asarray(h, dtype=np.float64)
        if self.h.shape != (self.state_dim,):
            raise ConfigError(f"h must have length {self.state_dim}")
        self.capacity = np.full(self.cfg.n_pms, float(self.cfg.pm_capacity))
        self.done = True

    # ------------------------------------------------------------------
    def reset(self, mode=None, seed=None):
        mode = mode or self.cfg.mode
        if mode not in ("cold", "warm"):
            raise ConfigError("mode must be 'cold' or 'warm'")
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        T = cfg.horizon
        n = len(self.requested)
        last_arrival = max(1, int(math.ceil(cfg.arrival_window * T)))
        arrive = rng.integers(0, last_arrival, size=n)
        if cfg.lifetime > 0:
            life = 1 + rng.geometric(1.0 / max(cfg.lifetime, 1.0), size=n)
            depart = np.minimum(arrive + life, T)
        else:
            depart = np.full(n, T)
        user = np.arange(n)

        warm_users = np.zeros(0, dtype=np.int64)
        if mode == "warm" and cfg.warm_fill > 0:
            target = cfg.warm_fill * cfg.n_pms * cfg.pm_capacity
            picks = []
            total = 0.0
            while total < target:
                k = int(rng.integers(n))
                picks.append(k)
                total += self.requested[k]
            warm_users = np.array(picks, dtype=np.int64)

        n_warm = warm_users.shape[0]
        self.vm_user = np.concatenate([warm_users, user])
        self.vm_req = self.requested[self.vm_user]
        self.vm_arrive = np.concatenate([np.full(n_warm, -1), arrive])
        self.vm_depart = np.concatenate([np.full(n_warm, T), depart])
        self.vm_warm = np.concatenate([np.ones(n_warm, bool), np.zeros(n, bool)])
        self.vm_status = np.full(n_warm + n, WAITING)
        self.vm_pm = np.full(n_warm + n, -1, dtype=np.int64)
        self.vm_rate = np.zeros(n_warm + n)

        self.pm_reserved = np.zeros(cfg.n_pms)
        self.pm_virtual = np.zeros(cfg.n_pms)
        self.pm_usage = np.zeros(cfg.n_pms)
        self.pm_hot = np.zeros(cfg.n_pms, dtype=bool)
        if n_warm:
            idx = np.arange(n_warm)
            self._place(idx, 1.0)
            self.vm_status[idx[self.vm_pm[idx] < 0]] = DONE  # could not fit, dropped
            self._measure(0)
        self.t = 0
        self.history = np.zeros(cfg.history_window)
        self.done = False
        self.state = self._observe()
        return self.state.copy()

    def _place(self, idx, rate):
        if idx.shape[0] == 0:
            return np.zeros(0, dtype=bool)
        sizes = self.vm_req[idx] * rate
        assign, remaining = kernels.best_fit_decreasing(sizes, self.capacity - self.pm_reserved)
        ok = assign >= 0
        placed = idx[ok]
        self.vm_pm[placed] = assign[ok]
        self.vm_rate[placed] = rate
        self.vm_status[placed] = RUNNING
        np.add.at(self.pm_reserved, assign[ok], sizes[ok])
        np.add.at(self.pm_virtual, assign[ok], self.vm_req[placed])
        return ok

    def _measure(self, t):
        run = self.vm_status == RUNNING
        load = np.where(run, self.vm_req * self.usage[self.vm_user, t], 0.0)
        self.pm_usage = kernels.pm_usage(np.where(run, self.vm_pm, -1), load, self.cfg.n_pms)
        self.pm_hot = self.pm_usage / self.capacity > self.cfg.hot_threshold
        req_running = self.vm_req[run].sum()
        return load.sum() / req_running if req_running > 0 else 0.0

    def _awaiting(self):
        return np.flatnonzero((self.vm_status == PENDING)
                              | ((self.vm_status == WAITING) & (self.vm_arrive == self.t)))

    def _observe(self):
        cfg = self.cfg
        W = cfg.history_window
        s = np.zeros(self.state_dim)
        total_cap = self.capacity.sum()
        if self.t < cfg.horizon:
            aw = self._awaiting()
        else:
            aw = np.zeros(0, dtype=np.int64)
        aw_cores = self.vm_req[aw].sum()
        s[0] = aw_cores / total_cap
        s[1 : W + 1] = self.history
        s[W + 1] = self.pm_hot.mean()
        s[W + 2] = 1.0 - self.pm_reserved.sum() / total_cap
        s[W + 3] = self.t / cfg.horizon
        run = self.vm_status == RUNNING
        promised = self.vm_req[run].sum()
        s[W + 4] = (self.vm_req[run] * self.vm_rate[run]).sum() / promised if promised > 0 else 1.0
        if aw_cores > 0:
            s[W + 5 :] = np.bincount(self.regime_of[self.vm_user[aw]], weights=self.vm_req[aw],
                                     minlength=self.n_regimes) / aw_cores
        return s

    # ------------------------------------------------------------------
    def step(self, action):
        if self.done:
            raise RuntimeError("episode is done; call reset()")
        a = float(action)
        if not (0.0 <= a <= 1.0) or math.isnan(a):
            raise DomainError(f"action {action!r} outside [0, 1]")
        cfg = self.cfg
        t = self.t
        rate = max(a, cfg.min_rate)

        leaving = np.flatnonzero((self.vm_status == RUNNING) & (self.vm_depart <= t))
        if leaving.shape[0]:
            np.add.at(self.pm_reserved, self.vm_pm[leaving], -self.vm_req[leaving] * self.vm_rate[leaving])
            np.add.at(self.pm_virtual, self.vm_pm[leaving], -self.vm_req[leaving])
            self.vm_status[leaving] = DONE
            self.vm_pm[leaving] = -1
            np.clip(self.pm_reserved, 0.0, None, out=self.pm_reserved)

        stale = np.flatnonzero((self.vm_status == PENDING) & (self.vm_depart <= t))
        self.vm_status[stale] = DONE
        awaiting = self._awaiting()
        self.vm_status[awaiting] = PENDING
        expert = self._expert_action(awaiting, t)
        placed = self._place(awaiting, rate)
        cluster_rate = self._measure(t)

        self.history = np.roll(self.history, -1)
        self.history[-1] = cluster_rate
        self.t = t + 1
        self.done = self.t >= cfg.horizon
        self.state = self._observe()
        cost = float(self.h @ self.state)

        run_policy = (self.vm_status == RUNNING) & ~self.vm_warm
        promised = self.vm_req[run_policy].sum()
        reserved = (self.vm_req[run_policy] * self.vm_rate[run_policy]).sum()
        info = {
            "expert_action": expert,
            "rate": rate,
            "hot": self.pm_hot.copy(),
            "hot_fraction": float(self.pm_hot.mean()),
            "n_hot": int(self.pm_hot.sum()),
            "promised": float(promised),
            "reserved": float(reserved),
            "admitted": int(placed.sum()),
            "pending": int((self.vm_status == PENDING).sum()),
            "cluster_usage_rate": float(cluster_rate),
        }
        return self.state.copy(), cost, self.done, info

    def _expert_action(self, awaiting, t):
        """Surrogate label: requested-weighted usage rate at step ``t``.

        Taken over the requests being placed now; falls back to running VMs,
        then to the whole dataset when the cluster is idle.
        """
        for idx in (awaiting, np.flatnonzero(self.vm_status == RUNNING)):
            if idx.shape[0]:
                w = self.vm_req[idx]
                return float(w @ self.usage[self.vm_user[idx], t] / w.sum())
        return float(self.requested @ self.usage[:, t] / self.requested.sum())

    # ------------------------------------------------------------------
    def pm_states(self):
        return [PmState(int(c), float(v), float(r), float(u), bool(hh))
                for c, v, r, u, hh in zip(self.capacity, self.pm_virtual, self.pm_reserved,
                                         self.pm_usage, self.pm_hot)]

    @property
    def horizon(self):
        return self.cfg.horizon

    def current_cost(self):
        return float(self.h @ self.state)

    def hard_bound(self, g):
        """Action interval that keeps every PM cool at peak usage; vacuous when ``g >= 1``."""
        return (0.0, 1.0) if g >= 1.0 else (self.worst_case_rate(), 1.0)

    def worst_case_rate(self):
        """Rate at which no awaiting request can drive its PM hot even at peak usage."""
        aw = self._awaiting()
        if aw.shape[0] == 0:
            return 0.0
        peak = self.max_usage[self.vm_user[aw]].max()
        return min(1.0, peak / self.cfg.hot_threshold)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def saved_cores(episode, upto=None):
    """S-Cores: ``100 * (1 - mean_t reserved_t / promised_t)`` over steps with admitted VMs."""
    infos = episode.infos[:upto] if upto is not None else episode.infos
    ratios = [i["reserved"] / i["promised"] for i in infos if i.get("promised", 0.0) > 0]
    if not ratios:
        return 0.0
    return round(100.0 * (1.0 - float(np.mean(ratios))), 9)


def pm_hot_ratio(episodes):
    """PM-Hot-R: per episode ``100 * max_pm(hot steps / steps)``, averaged over episodes."""
    if isinstance(episodes, EpisodeRecord):
        episodes = [episodes]
    if not episodes:
        raise ValueError("need at least one episode")
    vals = []
    for ep in episodes:
        hot = np.array([i["hot"] for i in ep.infos], dtype=bool)
        vals.append(100.0 * hot.mean(axis=0).max() if hot.size else 0.0)
    return float(np.mean(vals))


def average_hot_nodes(episode):
    return float(np.mean([i["n_hot"] for i in episode.infos])) if episode.infos else 0.0


def export_episode(episode, path):
    write_episode_csv(episode, path, saved_cores, ("step", "action", "cost", "hot_fraction", "saved_cores_running"),
                      "hot_fraction")
