from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skillroute.domain import FeatureSchema
from skillroute.hybrid import (
    HybridPolicy,
    build_hp,
    compute_kappa,
    compute_rpdr,
    hp_distribution,
    hp_route,
    load_hp,
    overlap,
    save_hp,
)
from skillroute.policy import Batch, SchemaMismatchError, init_params

from conftest import random_dataset
from test_policy import _trained_like

GRID = ["0.5", "0.8", "0.85", "0.9", "0.95", "0.97", "0.99", "0.999"]


def _rpdr_oracle(kappa: str, target: str) -> float:
    k, t = Fraction(kappa), Fraction(target)
    return 0.0 if k >= t else float((t - k) / (1 - k))


@pytest.mark.parametrize("kappa", GRID + ["0.0", "1.0"])
@pytest.mark.parametrize("target", ["0.5", "0.9", "0.95", "0.99"])
def test_rpdr_grid(kappa, target):
    assert abs(compute_rpdr(float(kappa), float(target)) - _rpdr_oracle(kappa, target)) <= 1e-15


def test_rpdr_worked_example():
    assert compute_rpdr(0.95, 0.99) == 0.8
    assert compute_rpdr(0.99, 0.99) == 0.0
    assert compute_rpdr(1.0, 0.9) == 0.0


def test_rpdr_rejects_bad_inputs():
    for k, t in [(0.5, 1.0), (0.5, 0.0), (-0.1, 0.9), (1.1, 0.9)]:
        with pytest.raises(ValueError):
            compute_rpdr(k, t)


@settings(max_examples=200)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.01, 0.99))
def test_rpdr_properties(k1, k2, target):
    r1, r2 = compute_rpdr(k1, target), compute_rpdr(k2, target)
    assert 0.0 <= r1 <= 1.0
    if k1 <= k2:
        assert r1 >= r2 - 1e-12
    # mixing in an exact replica at rate rho lifts the overlap to the target
    if k1 < target:
        assert r1 + (1 - r1) * k1 == pytest.approx(target, abs=1e-12)


@pytest.fixture
def pair():
    ds = random_dataset(400, seed=21, n_segments=4)
    return ds, _trained_like(ds.feature_schema, seed=1), _trained_like(ds.feature_schema, seed=2)


def test_kappa_is_segment_mean_overlap(pair):
    ds, rp, lp = pair
    b = Batch.from_dataset(ds)
    ov = overlap(lp.action_probs(b), rp.action_probs(b))
    table = compute_kappa(lp, rp, b)
    for seg, idx in ds.segments().items():
        k, n = table[seg]
        assert n == len(idx)
        assert k == pytest.approx(float(np.mean(ov[idx])), rel=1e-12)


def test_hp_meets_target_against_exact_replica(pair):
    ds, rp, lp = pair
    hp = build_hp(rp, lp, ds, kappa_target=0.95, min_support=1)
    b = Batch.from_dataset(ds)
    ov = overlap(hp.action_probs(b), rp.action_probs(b))
    for seg, idx in ds.segments().items():
        assert np.mean(ov[idx]) >= 0.95 - 1e-9


def test_low_support_segments_use_default(pair):
    ds, rp, lp = pair
    hp = build_hp(rp, lp, ds, min_support=10_000, default_rpdr=0.7)
    assert hp.rpdr_table == {}
    assert hp.rpdr_for("anything") == 0.7
    assert set(hp.kappa_table) == set(ds.segments())


def test_mixture_and_routing(pair):
    ds, rp, lp = pair
    hp = HybridPolicy(rp, lp, {"seg0": 0.3, "seg1": 1.0, "seg2": 0.0}, default_rpdr=0.5)
    b = Batch.from_dataset(ds)
    rho = np.array([hp.rpdr_for(s) for s in b.segments])[:, None]
    mix = rho * rp.action_probs(b) + (1 - rho) * lp.action_probs(b)
    np.testing.assert_allclose(hp.action_probs(b), mix)
    actions, props, used_rp = hp.route_batch(b, np.random.default_rng(0))
    np.testing.assert_allclose(props, mix[np.arange(b.n), actions])
    assert not used_rp[b.segments == "seg2"].any()
    assert used_rp[b.segments == "seg1"].all()


def test_hp_route_frequencies(pair):
    ds, rp, lp = pair
    hp = HybridPolicy(rp, lp, {}, default_rpdr=0.4)
    cands = ds.interactions[0].candidates
    dist = hp_distribution(hp, cands).propensities
    rng = np.random.default_rng(1)
    draws = [hp_route(hp, cands, rng) for _ in range(20_000)]
    freq = np.bincount([a for a, _, _ in draws], minlength=len(dist)) / len(draws)
    np.testing.assert_allclose(freq, dist[: len(freq)], atol=0.015)
    assert all(p == pytest.approx(dist[a]) for a, p, _ in draws[:50])
    rp_share = np.mean([src == "RP" for _, _, src in draws])
    assert rp_share == pytest.approx(0.4, abs=0.015)


def test_save_load(tmp_path, pair):
    ds, rp, lp = pair
    hp = build_hp(rp, lp, ds, kappa_target=0.9, min_support=5)
    save_hp(hp, tmp_path / "hp.json")
    back = load_hp(tmp_path / "hp.json")
    b = Batch.from_dataset(ds)
    np.testing.assert_array_equal(back.action_probs(b), hp.action_probs(b))
    assert back.artifact_id == hp.artifact_id and back.rpdr_table == hp.rpdr_table


def test_schema_mismatch_rejected():
    a = init_params(FeatureSchema(2))
    b = init_params(FeatureSchema(3))
    with pytest.raises(SchemaMismatchError):
        HybridPolicy(a, b, {})
    with pytest.raises(ValueError):
        HybridPolicy(a, a, {"x": 1.5})
