"""Per-episode rollout records shared by both environments."""

import csv
from dataclasses import dataclass, field

import numpy as np


@dataclass
class EpisodeRecord:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    raw_actions: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    expert_actions: list = field(default_factory=list)
    evaluations: list = field(default_factory=list)
    infos: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def append(self, state, action, raw_action, cost, expert_action, evaluation=None, info=None):
        self.states.append(np.asarray(state, dtype=np.float64))
        self.actions.append(float(action))
        self.raw_actions.append(float(raw_action))
        self.costs.append(float(cost))
        self.expert_actions.append(float(expert_action))
        self.evaluations.append(evaluation)
        self.infos.append(info if info is not None else {})

    def __len__(self):
        return len(self.actions)

    @property
    def state_matrix(self):
        return np.stack(self.states) if self.states else np.zeros((0, 0))

    @property
    def mean_cost(self):
        return float(np.mean(self.costs)) if self.costs else 0.0

    def validate(self):
        n = len(self.actions)
        lens = {len(self.states), len(self.raw_actions), len(self.costs), len(self.expert_actions),
                len(self.evaluations), len(self.infos)}
        if lens != {n}:
            raise ValueError("inconsistent episode record lengths")


def write_episode_csv(record, path, running_metric, header, info_key):
    """Write one row per step; the last two columns come from ``info[info_key]``
    and ``running_metric(record, upto)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(len(record)):
            w.writerow((t, f"{record.actions[t]:.10g}", f"{record.costs[t]:.10g}",
                        f"{record.infos[t].get(info_key, 0.0):.10g}",
                        f"{running_metric(record, t + 1):.10g}"))
