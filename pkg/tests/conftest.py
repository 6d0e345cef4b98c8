import numpy as np
import pytest
from hypothesis import settings

from coin.cloudenv import CloudConfig, CloudEnv
from coin.telemetry import DatasetSpec, TelemetryTrace, TraceDataset, UsageRegime, generate_dataset

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def constant_dataset(requested, usage, horizon=10):
    """Traces with fixed requested cores and constant usage rates."""
    traces = [TelemetryTrace(f"u{i}", int(r), np.full(horizon, float(u))) for i, (r, u) in
              enumerate(zip(requested, usage))]
    return TraceDataset(traces, horizon)


@pytest.fixture(scope="session")
def small_dataset():
    spec = DatasetSpec(n_users=40, horizon=20, seed=3,
                       regimes=(UsageRegime(name="a", proportion=0.5, cores=(4, 8)),
                                UsageRegime(name="b", proportion=0.5, mean=0.5, std=0.2, cores=(4, 8))))
    return generate_dataset(spec)


@pytest.fixture()
def small_env(small_dataset):
    return CloudEnv(small_dataset, CloudConfig(n_pms=4, pm_capacity=32, horizon=20, history_window=4))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
