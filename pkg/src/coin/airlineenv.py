"""Quarterly airline overbooking environment.

A parametric stand-in for a learned demand simulator.  Each quarter the
airline sells up to ``round(capacity * (1 + a))`` tickets against Poisson
demand with a seasonal multiplier; every ticket holder shows up independently
with probability ``1 - p_q``, where the quarter's no-show probability ``p_q``
jitters around a rate that decays geometrically per year.  Passengers beyond
capacity are offloaded (bumped).  The per-quarter cost is
``offloaded / max(onboard, 1)``.

State vector layout (``d = 5 + 3W``)::

    [0]              season factor of the coming quarter
    [1], [2]         sin / cos of the quarter-of-year phase
    [3]              episode progress q / quarters
    [4]              last quarter's demand / capacity
    [5 .. 5+W)       realised no-show fractions, last W quarters
    [5+W .. 5+2W)    overbooking rates, last W quarters
    [5+2W .. 5+3W)   offload ratios, last W quarters
"""

import math
from dataclasses import dataclass

import numpy as np

from .config import apply_overrides, read_config
from .errors import ConfigError, DomainError
from .records import EpisodeRecord, write_episode_csv


@dataclass(frozen=True)
class AirlineConfig:
    capacity: int = 200
    quarters: int = 40
    base_demand: float = 250.0
    peak_amplitude: float = 0.3
    initial_no_show: float = 0.15
    no_show_decay: float = 0.9
    no_show_floor: float = 0.02
    no_show_noise: float = 0.03
    demand_noise: bool = True
    fare: float = 1.0
    bump_penalty: float = 4.0
    history_window: int = 4
    seed: int = 0

    def validate(self):
        if self.capacity < 1:
            raise ConfigError("capacity must be a positive integer")
        if self.quarters < 1:
            raise ConfigError("quarters must be >= 1")
        if self.base_demand < 0 or self.peak_amplitude < 0:
            raise ConfigError("base_demand and peak_amplitude must be >= 0")
        if not 0.0 <= self.initial_no_show < 1.0:
            raise ConfigError("initial_no_show must lie in [0, 1)")
        if not 0.0 < self.no_show_decay <= 1.0:
            raise ConfigError("no_show_decay must lie in (0, 1]")
        if not 0.0 <= self.no_show_floor < 1.0:
            raise ConfigError("no_show_floor must lie in [0, 1)")
        if self.no_show_noise < 0:
            raise ConfigError("no_show_noise must be >= 0")
        if self.fare <= 0 or self.bump_penalty < 0:
            raise ConfigError("fare must be > 0 and bump_penalty >= 0")
        if self.history_window < 1:
            raise ConfigError("history_window must be >= 1")

    @property
    def horizon(self):
        return self.quarters

    @classmethod
    def from_file(cls, path, section="airline"):
        return apply_overrides(cls(), read_config(path).get(section, {}), section)


@dataclass(frozen=True)
class QuarterState:
    quarter: int
    season: float
    capacity: int
    demand: int
    no_show_rate: float


@dataclass(frozen=True)
class BookingOutcome:
    sold: int
    shows: int
    onboard: int
    offloaded: int
    no_shows: int


def season_factor(quarter, amplitude):
    """Peak multiplier ``>= 1``; highest in the third quarter of each year."""
    return 1.0 + amplitude * 0.5 * (1.0 - math.cos(2.0 * math.pi * (quarter % 4) / 4.0))


def no_show_rate(quarter, cfg):
    year = quarter // 4
    return max(cfg.no_show_floor, cfg.initial_no_show * cfg.no_show_decay**year)


def book(capacity, demand, a, p_no_show, rng):
    """Sell, draw shows binomially and settle one quarter."""
    sold = min(int(demand), int(round(capacity * (1.0 + a))))
    shows = int(rng.binomial(sold, 1.0 - p_no_show)) if sold > 0 else 0
    onboard = min(shows, capacity)
    offloaded = max(shows - capacity, 0)
    return BookingOutcome(sold, shows, onboard, offloaded, sold - shows)


class AirlineEnv:
    kind = "airline"
    safe_action = 0.0  # no overbooking

    def __init__(self, config=None):
        self.cfg = config or AirlineConfig()
        self.cfg.validate()
        W = self.cfg.history_window
        self.state_dim = 5 + 3 * W
        self.h = None  # cost is reported directly, not read off the state
        self.done = True

    @property
    def horizon(self):
        return self.cfg.quarters

    def reset(self, mode=None, seed=None):
        cfg = self.cfg
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.q = 0
        W = cfg.history_window
        self.hist_no_show = np.full(W, cfg.initial_no_show)
        self.hist_rate = np.zeros(W)
        self.hist_offload = np.zeros(W)
        self.last_demand_ratio = cfg.base_demand / cfg.capacity
        self.done = False
        self._draw_quarter()
        return self._observe()

    def _draw_quarter(self):
        cfg = self.cfg
        season = season_factor(self.q, cfg.peak_amplitude)
        lam = cfg.base_demand * season
        demand = int(self.rng.poisson(lam)) if cfg.demand_noise else int(round(lam))
        rate = no_show_rate(self.q, cfg)
        p = rate + cfg.no_show_noise * self.rng.standard_normal() if cfg.no_show_noise > 0 else rate
        self.p_quarter = float(min(max(p, 0.0), 0.95))
        self.quarter_state = QuarterState(self.q, season, cfg.capacity, demand, rate)

    def _observe(self):
        cfg = self.cfg
        W = cfg.history_window
        s = np.zeros(self.state_dim)
        phase = 2.0 * math.pi * (self.q % 4) / 4.0
        s[0] = season_factor(self.q, cfg.peak_amplitude)
        s[1] = math.sin(phase)
        s[2] = math.cos(phase)
        s[3] = self.q / cfg.quarters
        s[4] = self.last_demand_ratio
        s[5 : 5 + W] = self.hist_no_show
        s[5 + W : 5 + 2 * W] = self.hist_rate
        s[5 + 2 * W :] = self.hist_offload
        return s

    def expert_action(self):
        """Rate that fills the cabin in expectation given this quarter's no-show probability."""
        p = self.p_quarter
        return min(1.0, p / (1.0 - p))

    def step(self, action):
        if self.done:
            raise RuntimeError("episode is done; call reset()")
        a = float(action)
        if not (0.0 <= a <= 1.0) or math.isnan(a):
            raise DomainError(f"action {action!r} outside [0, 1]")
        cfg = self.cfg
        qs = self.quarter_state
        expert = self.expert_action()
        out = book(cfg.capacity, qs.demand, a, self.p_quarter, self.rng)
        cost = out.offloaded / max(out.onboard, 1)
        realised = out.no_shows / out.sold if out.sold else self.p_quarter
        self.hist_no_show = np.append(self.hist_no_show[1:], realised)
        self.hist_rate = np.append(self.hist_rate[1:], a)
        self.hist_offload = np.append(self.hist_offload[1:], cost)
        self.last_demand_ratio = qs.demand / cfg.capacity
        info = {
            "expert_action": expert,
            "quarter": qs,
            "outcome": out,
            "offload_ratio": cost,
            "revenue": cfg.fare * out.onboard - cfg.bump_penalty * out.offloaded,
        }
        self.q += 1
        self.done = self.q >= cfg.quarters
        if not self.done:
            self._draw_quarter()
        return self._observe(), float(cost), self.done, info

    def current_cost(self):
        return float(self.hist_offload[-1])

    def hard_bound(self, g):
        """Action interval keeping the offload ratio within ``g`` even if every ticket holder shows."""
        if g >= 1.0:
            return 0.0, 1.0
        cap = self.cfg.capacity
        return 0.0, math.floor(g * cap + 1e-9) / cap


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def profit(episode, cfg, upto=None):
    """``100 * sum(fare*onboard - bump_penalty*offloaded) / (fare*capacity*quarters)``."""
    if cfg.capacity < 1:
        raise ConfigError("capacity must be positive")
    infos = episode.infos[:upto] if upto is not None else episode.infos
    total = sum(i["revenue"] for i in infos)
    n = len(infos) if upto is not None else cfg.quarters
    return 100.0 * total / (cfg.fare * cfg.capacity * max(n, 1))


def ticket_cost_ratio(episodes):
    """Ticket-Cost-R: ``100 * mean over quarters of offloaded / onboard`` (pooled over episodes)."""
    if isinstance(episodes, EpisodeRecord):
        episodes = [episodes]
    ratios = []
    for ep in episodes:
        for i in ep.infos:
            out = i["outcome"]
            if out.onboard == 0 and out.offloaded > 0:
                raise ConfigError("offloads with nobody onboard: capacity must be positive")
            ratios.append(out.offloaded / max(out.onboard, 1))
    if not ratios:
        raise ValueError("need at least one quarter")
    return 100.0 * float(np.mean(ratios))


def export_episode(episode, cfg, path):
    write_episode_csv(episode, path, lambda ep, k: profit(ep, cfg, k),
                      ("step", "action", "cost", "offload_ratio", "profit_running"), "offload_ratio")
