"""Constraint verdicts, benchmark tables and convergence-curve files."""

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .airlineenv import profit, ticket_cost_ratio
from .cloudenv import pm_hot_ratio, saved_cores

DEFAULT_GS = (0.75, 0.85, 0.95)

_METRICS = {
    "cloud": ("PM-Hot-R", "S-Cores"),
    "airline": ("Ticket-Cost-R", "Profit"),
}
_CURVE_COLUMN = {"cloud": "average_hot_nodes", "airline": "average_cost"}


def constraint_verdict(episodes, g, delta):
    """True iff at least a ``1 - delta`` fraction of episodes keep their mean cost within ``g``."""
    if not episodes:
        raise ValueError("need at least one episode")
    ok = sum(ep.mean_cost <= g for ep in episodes)
    # integer comparison avoids 0.95 * 100 rounding to 94.99999
    return ok * 1_000_000 >= round((1.0 - delta) * 1_000_000) * len(episodes)


@dataclass
class ReportRow:
    method: str
    safety_mean: float
    safety_std: float
    efficiency_mean: float
    efficiency_std: float
    verdicts: dict


@dataclass
class BenchmarkReport:
    env_kind: str
    gs: tuple
    delta: float
    rows: list

    @property
    def columns(self):
        safety, eff = _METRICS[self.env_kind]
        return ["method", f"{safety}_mean", f"{safety}_std", f"{eff}_mean", f"{eff}_std",
                *(f"g={g:g}" for g in self.gs)]

    def _cells(self, row):
        return [row.method, f"{row.safety_mean:.2f}", f"{row.safety_std:.2f}",
                f"{row.efficiency_mean:.2f}", f"{row.efficiency_std:.2f}",
                *("pass" if row.verdicts[g] else "fail" for g in self.gs)]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow(self._cells(r))
        return buf.getvalue()

    def to_text(self):
        safety, eff = _METRICS[self.env_kind]
        head = ["Method", safety, eff, *(f"{g:g}" for g in self.gs)]
        body = [[r.method, f"{r.safety_mean:.1f} ± {r.safety_std:.1f}",
                 f"{r.efficiency_mean:.1f} ± {r.efficiency_std:.1f}",
                 *("✓" if r.verdicts[g] else "✗" for g in self.gs)] for r in self.rows]
        widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
        lines = ["  ".join(str(c).ljust(w) for c, w in zip(line, widths)).rstrip() for line in [head, *body]]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def _sample_std(x):
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def seed_metrics(episodes, env_kind, env_cfg=None):
    """(safety, efficiency) for one seed's evaluation episodes."""
    if env_kind == "cloud":
        return pm_hot_ratio(episodes), float(np.mean([saved_cores(e) for e in episodes]))
    if env_kind == "airline":
        return ticket_cost_ratio(episodes), float(np.mean([profit(e, env_cfg) for e in episodes]))
    raise ValueError(f"unknown environment kind {env_kind!r}")


def build_report(runs, env_kind, gs=DEFAULT_GS, delta=0.05, env_cfg=None):
    """Aggregate ``{method: [episodes of seed 1, episodes of seed 2, ...]}`` into a report.

    Metrics are averaged over seeds (sample std across seeds); verdicts pool
    every evaluation episode of the method.
    """
    rows = []
    for method, per_seed in runs.items():
        if not per_seed:
            raise ValueError(f"method {method!r} has no runs")
        safety, eff = zip(*(seed_metrics(eps, env_kind, env_cfg) for eps in per_seed))
        pooled = [e for eps in per_seed for e in eps]
        verdicts = {g: constraint_verdict(pooled, g, delta) for g in gs}
        rows.append(ReportRow(method, float(np.mean(safety)), _sample_std(safety), float(np.mean(eff)),
                              _sample_std(eff), verdicts))
    return BenchmarkReport(env_kind, tuple(gs), delta, rows)


def read_log(path):
    """Training log as ``(header, rows)`` with every cell kept as text."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty training log")
    return rows[0], rows[1:]


def emit_curves(logs, out_dir, env_kind):
    """Write ``<method>_curve.csv`` per training log with columns ``epoch,mse,<metric>``.

    ``logs`` maps method name to a training-log CSV path.  Cells are copied
    verbatim so curve values equal the log's text exactly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metric = _CURVE_COLUMN[env_kind]
    written = {}
    for method, path in logs.items():
        header, rows = read_log(path)
        cols = [header.index("epoch"), header.index("mse"), header.index("hot_metric")]
        target = out_dir / f"{method}_curve.csv"
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mse", metric])
            for r in rows:
                w.writerow([r[c] for c in cols])
        written[method] = target
    return written


def tail_mean(values, fraction=0.2):
    """Mean over the final ``fraction`` of a curve (at least one point)."""
    values = np.asarray(values, dtype=np.float64)
    k = max(1, int(round(len(values) * fraction)))
    return float(values[-k:].mean())
