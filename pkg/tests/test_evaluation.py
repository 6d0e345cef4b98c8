import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coin.cloudenv import CloudConfig, CloudEnv
from coin.evaluation import build_report, constraint_verdict, emit_curves, read_log, tail_mean
from coin.records import EpisodeRecord
from coin.trainer import ChanceConfig, GridPolicy, TrainConfig, evaluate, train


def episodes_with_costs(costs):
    out = []
    for c in costs:
        ep = EpisodeRecord()
        ep.costs = [float(c)]
        out.append(ep)
    return out


def test_verdict_boundary_96_of_100():
    assert constraint_verdict(episodes_with_costs([0.1] * 96 + [0.9] * 4), g=0.5, delta=0.05)


def test_verdict_boundary_94_of_100():
    assert not constraint_verdict(episodes_with_costs([0.1] * 94 + [0.9] * 6), g=0.5, delta=0.05)


def test_verdict_exactly_95_of_100_passes():
    assert constraint_verdict(episodes_with_costs([0.1] * 95 + [0.9] * 5), g=0.5, delta=0.05)


def test_zero_budget_passes_only_zero_cost():
    assert constraint_verdict(episodes_with_costs([0.0] * 20), g=0.0, delta=0.05)
    assert not constraint_verdict(episodes_with_costs([0.0] * 19 + [0.01] * 1), g=0.0, delta=0.01)


def test_verdict_needs_episodes():
    with pytest.raises(ValueError):
        constraint_verdict([], 0.5, 0.05)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.floats(0, 1), st.floats(0, 1),
       st.floats(0.01, 0.5))
def test_verdict_monotone_in_g(costs, g1, g2, delta):
    eps = episodes_with_costs(costs)
    lo, hi = sorted((g1, g2))
    if constraint_verdict(eps, lo, delta):
        assert constraint_verdict(eps, hi, delta)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.floats(0, 1))
def test_verdict_matches_counting(costs, g):
    ok = sum(c <= g for c in costs)
    assert constraint_verdict(episodes_with_costs(costs), g, 0.05) == (ok >= 0.95 * len(costs) - 1e-9)


@pytest.fixture(scope="module")
def cloud_runs(small_dataset):
    env = CloudEnv(small_dataset, CloudConfig(n_pms=4, horizon=20, history_window=4))
    runs = {}
    for rate in (0.3, 1.0):
        runs[f"grid{rate}"] = [evaluate(env, GridPolicy(rate), 10, seed=s) for s in (1, 2)]
    return runs


def test_report_deterministic_and_consistent(cloud_runs):
    a = build_report(cloud_runs, "cloud")
    b = build_report(cloud_runs, "cloud")
    assert a.to_csv() == b.to_csv() and a.to_text() == b.to_text()
    rows = list(csv.reader(a.to_csv().splitlines()))
    assert rows[0] == ["method", "PM-Hot-R_mean", "PM-Hot-R_std", "S-Cores_mean", "S-Cores_std",
                       "g=0.75", "g=0.85", "g=0.95"]
    assert [r[0] for r in rows[1:]] == ["grid0.3", "grid1.0"]
    full = {r.method: r for r in a.rows}["grid1.0"]
    assert full.efficiency_mean == 0.0 and full.safety_mean == 0.0
    assert all(full.verdicts.values())
    text = a.to_text()
    assert "S-Cores" in text and "grid1.0" in text


def test_single_seed_has_zero_std(cloud_runs):
    rep = build_report({"one": cloud_runs["grid0.3"][:1]}, "cloud")
    assert rep.rows[0].safety_std == 0.0 and rep.rows[0].efficiency_std == 0.0


def test_report_rejects_empty_method():
    with pytest.raises(ValueError):
        build_report({"x": []}, "cloud")


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mse", "policy_loss", "value_loss", "feasibility_rate", "hot_metric"])
        w.writerows(rows)


def test_emit_curves_copies_log_values(tmp_path):
    _write_log(tmp_path / "a.csv", [[1, "0.125", "0", "0", "1", "3.5"], [2, "0.0625", "0", "0", "1", "2.25"]])
    out = emit_curves({"coin": tmp_path / "a.csv"}, tmp_path / "curves", "cloud")
    header, rows = read_log(out["coin"])
    assert header == ["epoch", "mse", "average_hot_nodes"]
    assert rows == [["1", "0.125", "3.5"], ["2", "0.0625", "2.25"]]


def test_emit_curves_single_epoch_and_airline_column(tmp_path):
    _write_log(tmp_path / "a.csv", [[1, "0.5", "0", "0", "1", "0.01"]])
    out = emit_curves({"bc": tmp_path / "a.csv"}, tmp_path, "airline")
    header, rows = read_log(out["bc"])
    assert header[-1] == "average_cost" and len(rows) == 1


def test_emit_curves_from_training_logs_share_epoch_grid(tmp_path, small_dataset):
    env = CloudEnv(small_dataset, CloudConfig(n_pms=4, horizon=20, history_window=4))
    logs = {}
    for m in ("coin", "bc"):
        cfg = TrainConfig(method=m, epochs=4, warmup_epochs=1, hidden=(8,), value_hidden=(8,),
                          chance=ChanceConfig(n_members=2))
        train(env, cfg, log_path=tmp_path / f"{m}.csv")
        logs[m] = tmp_path / f"{m}.csv"
    out = emit_curves(logs, tmp_path / "c", "cloud")
    grids = [[r[0] for r in read_log(p)[1]] for p in out.values()]
    assert grids[0] == grids[1] == ["0", "1", "2", "3"]
    for m, p in out.items():
        src_h, src = read_log(logs[m])
        _, cur = read_log(p)
        assert [r[2] for r in cur] == [r[src_h.index("hot_metric")] for r in src]


def test_read_log_empty(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(ValueError):
        read_log(tmp_path / "e.csv")


@pytest.mark.parametrize("vals,frac,expected", [
    ([1, 2, 3, 4, 5], 0.2, 5.0),
    ([1, 2, 3, 4, 5, 6, 7, 8, 9, 10], 0.2, 9.5),
    ([7.0], 0.2, 7.0),
    ([1, 3], 1.0, 2.0),
])
def test_tail_mean(vals, frac, expected):
    assert tail_mean(vals, frac) == pytest.approx(expected)


def test_airline_report_columns():
    from coin.airlineenv import AirlineEnv
    env = AirlineEnv()
    rep = build_report({"none": [evaluate(env, GridPolicy(0.0), 5)]}, "airline", gs=(0.02,),
                       env_cfg=env.cfg)
    assert rep.columns[:5] == ["method", "Ticket-Cost-R_mean", "Ticket-Cost-R_std", "Profit_mean", "Profit_std"]
    # no overbooking: nothing is ever offloaded
    assert rep.rows[0].safety_mean == 0.0 and rep.rows[0].verdicts[0.02]
    assert np.isfinite(rep.rows[0].efficiency_mean)
