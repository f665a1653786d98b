import numpy as np
import pytest

from skillroute.domain import CandidateRecord, Dataset, FeatureSchema, LoggedInteraction
from skillroute.ope import OVERALL, OpeReport, bootstrap, evaluate
from skillroute.policy import Batch, GreedyPolicy

from conftest import random_dataset
from test_policy import _trained_like


class UniformPolicy:
    artifact_id = "uniform"

    def action_probs(self, batch):
        return batch.mask / batch.sizes[:, None]


class FixedPolicy:
    """Puts probability ``p`` on index 0 and spreads the rest."""

    def __init__(self, p):
        self.p = p
        self.artifact_id = f"fixed{p}"

    def action_probs(self, batch):
        out = np.where(batch.mask, (1 - self.p) / np.maximum(batch.sizes - 1, 1)[:, None], 0.0)
        out[:, 0] = np.where(batch.sizes > 1, self.p, 1.0)
        return out


def test_metrics_match_row_formulas():
    ds = random_dataset(300, seed=30)
    pol = _trained_like(ds.feature_schema, seed=4)
    base = UniformPolicy()
    rep = evaluate(pol, ds, baseline=base)
    b = Batch.from_dataset(ds)
    p = pol.action_probs(b)
    q = base.action_probs(b)
    rows = np.arange(b.n)
    o = rep.overall
    assert o.replication_rate == pytest.approx(np.mean(p.argmax(1) == b.actions))
    assert o.expected_match == pytest.approx(np.mean(p[rows, b.actions]))
    assert o.expected_reward == pytest.approx(np.mean(b.rewards * p[rows, b.actions] / b.propensities))
    assert o.stochastic_exploration_rate == pytest.approx(np.mean(1 - p.max(1)))
    l1 = np.abs(p - q).sum(1)
    assert o.l1_mean == pytest.approx(l1.mean()) and o.l1_std == pytest.approx(l1.std())
    assert o.expected_overlap == pytest.approx(np.mean(1 - l1 / 2))
    defect = b.rewards < 0.5
    assert o.replication_rate_defect == pytest.approx(np.mean((p.argmax(1) == b.actions)[defect]))
    assert o.stochastic_exploration_rate_nondefect == pytest.approx(np.mean(1 - p.max(1)[~defect]))
    assert sum(s.n for s in rep.per_segment.values()) == o.n == len(ds)


def test_baseline_metrics_absent_without_baseline():
    ds = random_dataset(50, seed=31)
    o = evaluate(UniformPolicy(), ds).overall
    assert o.l1_mean is None and o.policy_agreement is None


def test_clip_caps_weights():
    ds = random_dataset(200, seed=32)
    pol = GreedyPolicy(_trained_like(ds.feature_schema))
    unclipped = evaluate(pol, ds).overall.expected_ips_weight
    clipped = evaluate(pol, ds, ips_clip=2.0).overall.expected_ips_weight
    assert clipped < unclipped
    assert clipped <= 2.0


def _bandit_logs(n, seed, probs=(0.8, 0.5, 0.2)):
    """Uniform logger over three fixed candidates with Bernoulli rewards."""
    rng = np.random.default_rng(seed)
    cands = tuple(CandidateRecord(f"i{k}", f"s{k}", 0.9 - 0.3 * k, (0.0,), ()) for k in range(3))
    out = []
    for k in range(n):
        a = int(rng.integers(3))
        out.append(LoggedInteraction(cands, a, 1 / 3, float(rng.random() < probs[a]), "i0", f"r{k}"))
    return Dataset(out, FeatureSchema.from_interactions(out, 1))


def test_ips_recovers_known_value():
    probs = (0.8, 0.5, 0.2)
    ds = _bandit_logs(60_000, seed=3, probs=probs)
    target = FixedPolicy(0.7)
    truth = 0.7 * probs[0] + 0.15 * probs[1] + 0.15 * probs[2]
    est = evaluate(target, ds).overall.expected_reward
    assert est == pytest.approx(truth, abs=0.01)


def test_self_evaluation_identities():
    ds = _bandit_logs(5000, seed=4)
    rep = evaluate(UniformPolicy(), ds)
    rewards = np.array([it.reward for it in ds])
    assert abs(rep.overall.expected_ips_weight - 1.0) <= 1e-9
    assert rep.overall.expected_reward == float(rewards.mean())
    greedy = GreedyPolicy(FixedPolicy(0.6))
    assert evaluate(greedy, ds).overall.stochastic_exploration_rate == 0.0


def test_bootstrap_protocol():
    ds = random_dataset(400, seed=33)
    pol = _trained_like(ds.feature_schema)
    a = bootstrap(ds, pol, n_resamples=8, level=0.95, seed=7, baseline=UniformPolicy())
    b = bootstrap(ds, pol, n_resamples=8, level=0.95, seed=7, baseline=UniformPolicy())
    assert a.to_dict() == b.to_dict()
    for _, bundle in a.bundles():
        for m in bundle.metric_names():
            lo, hi = bundle.ci[m]
            assert lo <= getattr(bundle, m) <= hi
    const = bootstrap(ds, UniformPolicy(), n_resamples=8, seed=1)
    lo, hi = const.overall.ci["expected_ips_weight"]
    assert lo == hi == const.overall.expected_ips_weight
    with pytest.raises(ValueError):
        bootstrap(ds, pol, n_resamples=1)


def test_report_roundtrip(tmp_path):
    ds = random_dataset(120, seed=34)
    rep = bootstrap(ds, UniformPolicy(), n_resamples=4, seed=0, baseline=UniformPolicy())
    rep.write_json(tmp_path / "r.json")
    back = OpeReport.read_json(tmp_path / "r.json")
    assert back.to_dict() == rep.to_dict()
    rep.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[1].startswith(OVERALL)
    assert len(lines) == 2 + len(rep.per_segment)


def test_rejects_empty_and_zero_propensity():
    ds = random_dataset(10, seed=35)
    with pytest.raises(ValueError):
        evaluate(UniformPolicy(), Dataset([], ds.feature_schema))
    b = Batch.from_dataset(ds)
    b.propensities[0] = 0.0
    with pytest.raises(ValueError):
        evaluate(UniformPolicy(), b)
