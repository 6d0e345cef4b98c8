import csv
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coin.airlineenv import AirlineEnv
from coin.cloudenv import CloudConfig, CloudEnv, saved_cores
from coin.errors import ConfigError, EmptyDatasetError, TrainingAborted
from coin.telemetry import DatasetSpec, TraceDataset, UsageRegime, generate_dataset
from coin.trainer import (
    LOG_COLUMNS,
    ChanceConfig,
    CoinPolicy,
    GridPolicy,
    TrainConfig,
    _Trainer,
    discounted_returns,
    evaluate,
    grid_policy,
    load_policy,
    rollout,
    save_policy,
    state_costs,
    train,
    train_bc,
    train_bc_hard,
    train_coin,
)

from conftest import constant_dataset

TINY = dict(hidden=(16,), value_hidden=(16,), chance=ChanceConfig(n_members=3))


def tiny_env(n_users=30, usage=None, seed=0):
    if usage is None:
        ds = generate_dataset(DatasetSpec(n_users=n_users, horizon=20, seed=seed,
                                          regimes=(UsageRegime(mean=0.4, std=0.15, cores=(4, 8)),)))
    else:
        rng = np.random.default_rng(seed)
        ds = constant_dataset(rng.choice([4, 8], size=n_users), np.full(n_users, usage), horizon=20)
    return CloudEnv(ds, CloudConfig(n_pms=4, horizon=20, history_window=4, arrival_window=0.5))


def cfg(**kw):
    base = dict(TINY)
    base.update(kw)
    return TrainConfig(**base)


def test_bc_learns_constant_label():
    env = tiny_env(usage=0.4)
    pol = train_bc(env, cfg(epochs=400, lr_policy=1e-2))
    ep = rollout(env, pol, 123)
    assert np.all(np.abs(np.array(ep.raw_actions) - 0.4) < 0.01)


def test_coin_pure_bc_regime_converges():
    # noiseless labels, delta = 0.5 and a generous budget: projection never fires
    env = tiny_env(usage=0.4)
    res = train_coin(env, cfg(epochs=500, lr_policy=1e-2, explore_offset_std=0.0,
                              chance=ChanceConfig(g=10.0, delta=0.5, n_members=3)))
    mse = [r[1] for r in res.log]
    assert min(mse[-50:]) < 1e-3
    assert sum(res.safeguard_counts) == 0


def test_zero_budget_makes_safeguard_dominate():
    env = tiny_env(n_users=60)
    kw = dict(epochs=60, warmup_epochs=5)
    coin = train_coin(env, cfg(chance=ChanceConfig(g=0.0, n_members=3), **kw))
    bc = train(env, cfg(method="bc", **kw))
    feas = [r[4] for r in coin.log[kw["warmup_epochs"]:]]
    assert np.mean(feas) < 0.1
    assert sum(coin.safeguard_counts) > 0.9 * sum(coin.infeasible_counts[kw["warmup_epochs"]:])
    seeds = range(20)
    c_coin = np.mean([e.mean_cost for e in evaluate(env, coin.policy, len(seeds))])
    c_bc = np.mean([e.mean_cost for e in evaluate(env, bc.policy, len(seeds))])
    assert c_coin < c_bc


def test_one_epoch_one_row(tmp_path):
    res = train(tiny_env(), cfg(epochs=1), log_path=tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == list(LOG_COLUMNS)
    assert len(rows) == 2 and len(res.log) == 1


def test_empty_dataset_rejected():
    env = tiny_env()
    env.dataset = TraceDataset([], 20)
    with pytest.raises(EmptyDatasetError):
        train_bc(env, cfg(epochs=1))


@pytest.mark.parametrize("method", ["coin", "bc", "bc_hard", "grid"])
def test_identical_config_identical_log(tmp_path, method):
    env = tiny_env()
    c = cfg(method=method, epochs=8, warmup_epochs=2, seed=5)
    train(env, c, log_path=tmp_path / "a.csv")
    train(env, c, log_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    train(env, replace(c, seed=6), log_path=tmp_path / "c.csv")
    if method != "grid":
        assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "c.csv").read_bytes()


def test_safeguard_fires_iff_infeasible(tmp_path):
    env = tiny_env(n_users=60)
    res = train_coin(env, cfg(epochs=40, warmup_epochs=10, chance=ChanceConfig(g=0.02, n_members=3)),
                     log_path=tmp_path / "log.csv")
    T = env.horizon
    with open(tmp_path / "log.csv") as fh:
        rows = list(csv.DictReader(fh))
    for epoch, (row, sg, inf) in enumerate(zip(rows, res.safeguard_counts, res.infeasible_counts)):
        assert inf == round((1.0 - float(row["feasibility_rate"])) * T)
        assert sg == (inf if epoch >= 10 else 0)
    assert sum(res.safeguard_counts) > 0


def test_bc_hard_worst_case_never_exceeds_budget():
    env = tiny_env(n_users=60)
    pol = train_bc_hard(env, cfg(epochs=20, chance=ChanceConfig(g=0.05, n_members=3)))
    for seed in range(30):
        ep = rollout(env, pol, seed)
        assert max(ep.costs) <= 0.05
        assert all(a >= i["hard_bound"][0] for a, i in zip(ep.actions, ep.infos))


def test_bc_hard_with_loose_budget_equals_bc(tmp_path):
    env = tiny_env()
    c = cfg(epochs=10, chance=ChanceConfig(g=1.0, n_members=3))
    train(env, replace(c, method="bc"), log_path=tmp_path / "bc.csv")
    train(env, replace(c, method="bc_hard"), log_path=tmp_path / "hard.csv")
    assert (tmp_path / "bc.csv").read_bytes() == (tmp_path / "hard.csv").read_bytes()


def test_bc_hard_saves_fewer_cores_than_coin():
    env = CloudEnv(generate_dataset(DatasetSpec()), CloudConfig())
    c = TrainConfig(epochs=60, warmup_epochs=10, chance=ChanceConfig(g=0.1))
    s_coin, s_hard = [], []
    for seed in (1, 2):
        coin = train_coin(env, replace(c, seed=seed)).policy
        hard = train_bc_hard(env, replace(c, seed=seed))
        s_coin.append(np.mean([saved_cores(e) for e in evaluate(env, coin, 5, seed=seed)]))
        s_hard.append(np.mean([saved_cores(e) for e in evaluate(env, hard, 5, seed=seed)]))
    assert all(h < k for h, k in zip(s_hard, s_coin))


@pytest.mark.parametrize("rate,expected", [(0.2, 80.0), (0.4, 60.0), (1.0, 0.0)])
def test_grid_policy(rate, expected):
    env = CloudEnv(generate_dataset(DatasetSpec()), CloudConfig())
    ep = rollout(env, grid_policy(rate), 0)
    assert saved_cores(ep) == expected
    assert set(ep.actions) == {rate}


def test_monotone_safety_knob():
    # paired seeds: a smaller delta must not raise the evaluation violation frequency beyond noise
    env = tiny_env(n_users=60)
    g = 0.05
    viol = {}
    for delta in (0.05, 0.45):
        hits = []
        for seed in range(30):
            res = train_coin(env, cfg(epochs=25, warmup_epochs=5, seed=seed,
                                      chance=ChanceConfig(g=g, delta=delta, n_members=3)))
            hits += [e.mean_cost > g for e in evaluate(env, res.policy, 5, seed=seed)]
        viol[delta] = np.mean(hits)
    se = np.sqrt(viol[0.45] * (1 - viol[0.45]) / 150 + viol[0.05] * (1 - viol[0.05]) / 150)
    assert viol[0.05] <= viol[0.45] + 2 * se + 1e-12, viol


def test_training_abort_writes_checkpoint(tmp_path, monkeypatch):
    def boom(self, *a, **k):
        raise FloatingPointError("non-finite policy loss")

    monkeypatch.setattr(_Trainer, "_policy_update", boom)
    with pytest.raises(TrainingAborted) as info:
        train(tiny_env(), cfg(epochs=3), checkpoint_dir=tmp_path)
    assert info.value.checkpoint is not None and info.value.checkpoint.exists()
    assert isinstance(load_policy(info.value.checkpoint), CoinPolicy)


def test_periodic_checkpoints(tmp_path):
    train(tiny_env(), cfg(method="bc", epochs=4, checkpoint_every=2), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch2.json", "epoch4.json"]


@pytest.mark.parametrize("method", ["coin", "bc", "bc_hard", "grid"])
def test_policy_round_trip(tmp_path, method):
    env = tiny_env()
    res = train(env, cfg(method=method, epochs=3, grid_rate=0.3))
    save_policy(res.policy, tmp_path / "p.json")
    back = load_policy(tmp_path / "p.json")
    a = [rollout(env, p, 9).actions for p in (res.policy, back)]
    assert a[0] == a[1]


def test_coin_on_airline_runs():
    env = AirlineEnv()
    res = train_coin(env, cfg(epochs=5, warmup_epochs=1, chance=ChanceConfig(g=0.02, n_members=3)))
    assert len(res.log) == 5
    assert all(0.0 <= a <= 1.0 for a in rollout(env, res.policy, 0).actions)


def test_config_validation_and_file(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig(method="ddpg").validate()
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(grid_rate=1.5).validate()
    with pytest.raises(ConfigError):
        ChanceConfig(delta=0.7).validate()
    p = tmp_path / "t.ini"
    p.write_text("[train]\nepochs = 7\nhidden = 8,8\n[chance]\ng = 0.2\nbonferroni = true\n")
    c = TrainConfig.from_file(p)
    assert c.epochs == 7 and c.hidden == (8, 8) and c.chance.g == 0.2 and c.chance.bonferroni
    p.write_text("[train]\nepoch = 7\n")
    with pytest.raises(ConfigError, match="epoch"):
        TrainConfig.from_file(p)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0.5, 1.0))
@settings(max_examples=40)
def test_discounted_returns(costs, gamma):
    back, fwd = discounted_returns(np.array(costs), gamma)
    n = len(costs)
    for t in range(n):
        assert back[t] == pytest.approx(sum(gamma ** (t - k) * costs[k] for k in range(t + 1)))
        assert fwd[t] == pytest.approx(sum(gamma ** (k - t) * costs[k] for k in range(t, n)))
    if gamma == 1.0:
        # backward + forward - c counts the whole trajectory once at every step
        assert np.allclose(back + fwd - np.array(costs), sum(costs))


def test_state_costs_prefix():
    env = tiny_env()
    ep = rollout(env, GridPolicy(0.3), 0)
    sc = state_costs(env, ep)
    assert sc[0] == 0.0 and np.array_equal(sc[1:], ep.costs)
