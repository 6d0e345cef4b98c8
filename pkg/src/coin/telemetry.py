"""Synthetic and file-backed resource-usage telemetry.

Each user (a VM request in the cloud setting) carries a usage-rate time series
in [0, 1].  Synthetic series are drawn from a :class:`UsageProcess`: a
per-step Gaussian, optionally a two-component mixture whose second component
is shifted by ``skew``.  Draws are clamped to [0, 1].
"""

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import apply_overrides, read_config
from .errors import ConfigError, DomainError, EmptyDatasetError, SchemaError


@dataclass(frozen=True)
class UsageProcess:
    mean_curve: np.ndarray
    std_curve: np.ndarray
    skew: float = 0.0
    mixture_weight: float | None = None

    def __post_init__(self):
        mean = np.asarray(self.mean_curve, dtype=np.float64)
        std = np.asarray(self.std_curve, dtype=np.float64)
        if mean.ndim != 1 or mean.shape != std.shape:
            raise ConfigError("mean_curve and std_curve must be 1-d with equal length")
        if np.any(mean < 0) or np.any(mean > 1):
            raise ConfigError("mean_curve values must lie in [0, 1]")
        if np.any(std < 0):
            raise ConfigError("std_curve values must be >= 0")
        w = self.mixture_weight
        if w is not None and not 0.0 <= w <= 1.0:
            raise ConfigError("mixture_weight must lie in [0, 1]")
        object.__setattr__(self, "mean_curve", mean)
        object.__setattr__(self, "std_curve", std)

    @property
    def horizon(self):
        return self.mean_curve.shape[0]

    def sample(self, rng):
        """One clamped path of length ``horizon``.

        The normal and uniform draws are taken in a fixed order so that, for
        a fixed generator state, raising ``mean_curve`` never lowers a value.
        """
        z = rng.standard_normal(self.horizon)
        u = rng.random(self.horizon)
        mu = self.mean_curve
        if self.mixture_weight:
            mu = mu + np.where(u < self.mixture_weight, self.skew, 0.0)
        return np.clip(mu + self.std_curve * z, 0.0, 1.0)


@dataclass(frozen=True)
class TelemetryTrace:
    user_id: str
    requested: int
    samples: np.ndarray
    process: UsageProcess | None = None
    regime: str | None = None

    @property
    def max_usage(self):
        return float(self.samples.max())


@dataclass
class TraceDataset:
    traces: list
    horizon: int
    seed: int | None = None

    def __post_init__(self):
        seen = set()
        for tr in self.traces:
            if tr.samples.shape != (self.horizon,):
                raise SchemaError(f"user {tr.user_id}: expected {self.horizon} samples, got {tr.samples.shape[0]}")
            if tr.user_id in seen:
                raise SchemaError(f"duplicate user_id {tr.user_id}")
            seen.add(tr.user_id)

    def __len__(self):
        return len(self.traces)

    @property
    def usage(self):
        """``(n_users, horizon)`` matrix of usage rates."""
        if not self.traces:
            return np.zeros((0, self.horizon))
        return np.stack([tr.samples for tr in self.traces])

    @property
    def requested(self):
        return np.array([tr.requested for tr in self.traces], dtype=np.int64)

    @property
    def regimes(self):
        """Sorted regime names; loaded traces without a regime share ``"default"``."""
        return sorted({tr.regime or "default" for tr in self.traces})

    def regime_index(self):
        names = self.regimes
        lookup = {n: i for i, n in enumerate(names)}
        return np.array([lookup[tr.regime or "default"] for tr in self.traces], dtype=np.int64)


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class UsageRegime:
    """Template for one population of users.

    The mean curve is ``mean + amplitude*sin(2*pi*t/period + phase)`` plus a
    linear ``trend`` across the horizon, clipped to [0, 1].
    """

    name: str = "default"
    proportion: float = 1.0
    mean: float = 0.3
    std: float = 0.1
    amplitude: float = 0.0
    period: float = 24.0
    phase: float = 0.0
    trend: float = 0.0
    skew: float = 0.0
    mixture_weight: float = 0.0
    cores: tuple = (2, 4, 8)

    def process(self, horizon):
        t = np.arange(horizon, dtype=np.float64)
        mean = self.mean + self.amplitude * np.sin(2 * np.pi * t / self.period + self.phase)
        if horizon > 1:
            mean = mean + self.trend * t / (horizon - 1)
        mean = np.clip(mean, 0.0, 1.0)
        std = np.full(horizon, float(self.std))
        return UsageProcess(mean, std, float(self.skew), float(self.mixture_weight) or None)


# default benchmark population: mostly steady users plus a bursty minority
BENCHMARK_REGIMES = (
    UsageRegime(name="steady", proportion=0.7, mean=0.3, std=0.1, cores=(8, 16, 32)),
    UsageRegime(name="bursty", proportion=0.3, mean=0.3, std=0.1, skew=0.4, mixture_weight=0.1,
                cores=(8, 16, 32)),
)


@dataclass(frozen=True)
class DatasetSpec:
    n_users: int = 200
    horizon: int = 100
    regimes: tuple = BENCHMARK_REGIMES
    seed: int = 0

    def validate(self):
        if self.n_users < 1:
            raise ConfigError("n_users must be >= 1")
        if self.horizon < 2:
            raise ConfigError("horizon must be >= 2")
        if not self.regimes:
            raise ConfigError("at least one usage regime is required")
        props = np.array([r.proportion for r in self.regimes], dtype=np.float64)
        if np.any(props < 0) or not math.isclose(props.sum(), 1.0, abs_tol=1e-9):
            raise ConfigError(f"regime proportions must be >= 0 and sum to 1 (got {props.sum():g})")
        names = [r.name for r in self.regimes]
        if len(set(names)) != len(names):
            raise ConfigError("regime names must be unique")
        for r in self.regimes:
            if not r.cores or min(r.cores) < 1:
                raise ConfigError(f"regime {r.name}: cores must be positive integers")

    @classmethod
    def from_config(cls, sections):
        """Build from ``read_config`` output (``[data]`` plus ``[regime.<name>]``)."""
        data = dict(sections.get("data", {}))
        names = data.pop("regimes", None)
        spec = apply_overrides(cls(), data, "data")
        regime_sections = {k[len("regime."):]: v for k, v in sections.items() if k.startswith("regime.")}
        if names is not None:
            order = [n.strip() for n in names.split(",") if n.strip()]
        else:
            order = sorted(regime_sections)
        if order:
            regimes = []
            for name in order:
                if name not in regime_sections:
                    raise ConfigError(f"regime {name!r} listed but no [regime.{name}] section")
                regimes.append(apply_overrides(UsageRegime(name=name), regime_sections[name], f"regime.{name}"))
            spec = DatasetSpec(spec.n_users, spec.horizon, tuple(regimes), spec.seed)
        return spec


def generate_dataset(spec):
    """Draw a :class:`TraceDataset` from ``spec``; identical specs give identical data.

    Regime membership and core sizes come from one stream; every user then
    gets an independent substream keyed on ``(seed, user index)``, so users
    can be generated in any order or in parallel.
    """
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    assign_rng = np.random.default_rng(root.spawn(1)[0])
    props = np.array([r.proportion for r in spec.regimes], dtype=np.float64)
    which = assign_rng.choice(len(spec.regimes), size=spec.n_users, p=props / props.sum())
    processes = [r.process(spec.horizon) for r in spec.regimes]
    width = max(5, len(str(spec.n_users - 1)))
    traces = []
    for i in range(spec.n_users):
        reg = spec.regimes[which[i]]
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i]))
        cores = int(reg.cores[rng.integers(len(reg.cores))])
        samples = processes[which[i]].sample(rng)
        traces.append(TelemetryTrace(f"u{i:0{width}d}", cores, samples, processes[which[i]], reg.name))
    return TraceDataset(traces, spec.horizon, spec.seed)


def empirical_expert_variance(ds):
    """Per-step cross-user sample variance (``n - 1`` denominator) of usage rates."""
    if len(ds) == 0:
        raise EmptyDatasetError("dataset is empty")
    if len(ds) == 1:
        raise ValueError("need at least two users for a sample variance")
    return np.var(ds.usage, axis=0, ddof=1)


# --------------------------------------------------------------------------
# file io
# --------------------------------------------------------------------------

FIELDS = ("user_id", "timestamp", "requested", "usage_rate")


def _records(ds):
    for tr in ds.traces:
        for t, u in enumerate(tr.samples):
            yield tr.user_id, t, int(tr.requested), repr(float(u))


def save_traces(ds, path, format=None):
    path = Path(path)
    fmt = format or _guess_format(path)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(FIELDS)
        for uid, t, req, u in _records(ds):
            w.writerow((uid, t, req, u))
        path.write_text(buf.getvalue())
    elif fmt == "jsonl":
        lines = [json.dumps({"user_id": uid, "timestamp": t, "requested": req, "usage_rate": float(u)})
                 for uid, t, req, u in _records(ds)]
        path.write_text("\n".join(lines) + ("\n" if lines else ""))
    else:
        raise ConfigError(f"unknown trace format {fmt!r}")
    return path


def _guess_format(path):
    return "jsonl" if path.suffix.lower() in (".jsonl", ".json", ".ndjson") else "csv"


def _read_rows(path, fmt):
    if fmt == "csv":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                return []
            missing = [f for f in FIELDS if f not in reader.fieldnames]
            if missing:
                raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
            return list(reader)
    if fmt == "jsonl":
        rows = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
                missing = [f for f in FIELDS if f not in obj]
                if missing:
                    raise SchemaError(f"{path}:{lineno}: missing key(s) {', '.join(missing)}")
                rows.append(obj)
        return rows
    raise ConfigError(f"unknown trace format {fmt!r}")


def load_traces(path, format=None):
    """Read a trace file (``csv`` or ``jsonl``) into a :class:`TraceDataset`.

    Records are grouped by ``user_id`` (first-appearance order) and sorted by
    timestamp.  Every user must cover timestamps ``0..T-1`` for the same T.
    """
    path = Path(path)
    fmt = format or _guess_format(path)
    rows = _read_rows(path, fmt)
    if not rows:
        raise EmptyDatasetError(f"{path}: no records")
    users = {}
    for row in rows:
        uid = str(row["user_id"])
        try:
            t = int(row["timestamp"])
            req = int(row["requested"])
            u = float(row["usage_rate"])
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"user {uid}: malformed record {row!r}") from exc
        if not 0.0 <= u <= 1.0:
            raise DomainError(f"user {uid}: usage_rate {u} at timestamp {t} outside [0, 1]")
        if req < 1:
            raise SchemaError(f"user {uid}: requested must be a positive integer")
        entry = users.setdefault(uid, {"requested": req, "points": {}})
        if entry["requested"] != req:
            raise SchemaError(f"user {uid}: inconsistent requested cores")
        if t in entry["points"]:
            raise SchemaError(f"user {uid}: duplicate timestamp {t}")
        entry["points"][t] = u
    horizon = None
    traces = []
    for uid, entry in users.items():
        pts = entry["points"]
        steps = sorted(pts)
        if steps != list(range(len(steps))):
            raise SchemaError(f"user {uid}: timestamps must be 0-based consecutive step indices")
        if horizon is None:
            horizon = len(steps)
        elif len(steps) != horizon:
            raise SchemaError(f"user {uid}: horizon {len(steps)} differs from {horizon}")
        traces.append(TelemetryTrace(uid, entry["requested"], np.array([pts[t] for t in steps])))
    return TraceDataset(traces, horizon)


def load_dataset_spec(path):
    return DatasetSpec.from_config(read_config(path))
