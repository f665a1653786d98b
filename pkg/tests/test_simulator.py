import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skillroute.policy import Batch
from skillroute.simulator import (
    BaselinePolicy, EnvConfig, collect_logs, gen_environment, load_environment, make_baseline_policy,
    optimal_value, save_environment, true_reward,
)

from test_policy import _trained_like


@pytest.fixture(scope="module")
def env():
    return gen_environment(EnvConfig(), seed=3)


def _brute_reward(env, policy):
    total = 0.0
    for c, w in zip(env.contexts, env.context_weights):
        b = Batch([c.candidates], env.config.numeric_dim)
        p = policy.action_probs(b)[0]
        total += w * sum(p[a] * env.p_star(c.context_id, a) for a in range(len(c.candidates)))
    return total


def test_true_reward_matches_enumeration(env):
    base = make_baseline_policy(env)
    assert true_reward(env, base) == pytest.approx(_brute_reward(env, base), abs=1e-12)
    schema = collect_logs(env, base, 500, np.random.default_rng(0)).feature_schema
    pol = _trained_like(schema, seed=2)
    assert true_reward(env, pol) == pytest.approx(_brute_reward(env, pol), abs=1e-12)
    assert true_reward(env, pol) <= optimal_value(env) + 1e-12


def test_structure(env):
    cfg = env.config
    assert len(env.contexts) == cfg.n_segments * cfg.contexts_per_segment
    assert env.context_weights.sum() == pytest.approx(1.0)
    assert np.all((env.reward_table[~np.isnan(env.reward_table)] >= 0) & (env.reward_table[~np.isnan(env.reward_table)] <= 1))
    imp = np.array([c.improvable for c in env.contexts])
    best = env.optimal_actions()
    # the top candidate is optimal exactly where nothing better was planted
    assert np.all(best[~imp] == 0) and np.all(best[imp] != 0)
    for seg in env.segment_ids:
        mask = np.array([c.segment_id == seg for c in env.contexts])
        share = env.context_weights[mask & imp].sum() / env.context_weights[mask].sum()
        assert share == pytest.approx(cfg.improvable_share)
    for c in env.contexts:
        confs = [r.nlu_confidence for r in c.candidates]
        assert confs == sorted(confs, reverse=True)
        assert c.segment_id == c.candidates[0].intent_id


def test_baseline_above_random_below_optimum(env):
    base = true_reward(env, make_baseline_policy(env))
    assert true_reward(env, BaselinePolicy(1 / 3)) < base < optimal_value(env)


def test_deterministic_generation_and_roundtrip(env, tmp_path):
    again = gen_environment(EnvConfig(), seed=3)
    assert np.array_equal(env.reward_table, again.reward_table, equal_nan=True)
    assert env.contexts == again.contexts
    assert not np.array_equal(gen_environment(EnvConfig(), seed=4).reward_table, env.reward_table, equal_nan=True)
    save_environment(env, tmp_path / "e.json")
    loaded = load_environment(tmp_path / "e.json")
    assert np.array_equal(loaded.reward_table, env.reward_table, equal_nan=True)
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_environment(tmp_path / "bad.json")


def test_collected_propensities_replay(env):
    base = make_baseline_policy(env)
    ds = collect_logs(env, base, 2000, np.random.default_rng(5), "x")
    b = Batch.from_dataset(ds)
    p = base.action_probs(b)
    assert np.allclose(p[np.arange(b.n), b.actions], b.propensities)
    assert ds.interactions[0].interaction_id == "x-0000000"
    assert set(ds.segments()) <= set(env.segment_ids)
    again = collect_logs(env, base, 2000, np.random.default_rng(5), "x")
    assert [i.reward for i in again] == [i.reward for i in ds]


def test_empirical_reward_converges(env):
    base = make_baseline_policy(env)
    ds = collect_logs(env, base, 100_000, np.random.default_rng(6))
    emp = np.mean([i.reward for i in ds])
    assert emp == pytest.approx(true_reward(env, base), abs=4 * 0.5 / np.sqrt(100_000))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 1.0))
def test_baseline_probs_valid(top):
    env = gen_environment(EnvConfig(candidates_per_context=(1, 4), n_segments=2, contexts_per_segment=4), seed=1)
    b = env.context_batch()
    p = BaselinePolicy(top).action_probs(b)
    assert np.allclose(p.sum(1), 1.0)
    assert np.all(p[~b.mask] == 0)


def test_flip_and_onboard(env):
    cfg = EnvConfig(flip_at_cycle=2, onboard_after_cycle=0)
    e = gen_environment(cfg, seed=3)
    assert not e.at_cycle(1).flipped and e.at_cycle(2).flipped and e.at_cycle(5).flipped
    before, after = e.at_cycle(1), e.at_cycle(2)
    rows = np.arange(len(before.contexts))
    best = before.optimal_actions()
    drop = before.reward_table[rows, best] - after.reward_table[rows, best]
    assert np.allclose(drop, np.minimum(cfg.flip_drop, before.reward_table[rows, best]))
    assert not e.at_cycle(0).onboarded and e.at_cycle(1).onboarded
    onb = e.at_cycle(1)
    assert sum(len(c.candidates) for c in onb.contexts) > sum(len(c.candidates) for c in e.contexts)
    for c in onb.contexts:
        confs = [r.nlu_confidence for r in c.candidates]
        assert confs == sorted(confs, reverse=True)


@pytest.mark.parametrize("kw", [{"candidates_per_context": (0, 2)}, {"improvable_fraction": 2.0},
                                {"improvable_share": 1.0}, {"baseline_top_prob": 0.0}])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        EnvConfig(**kw)
