import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skillroute.domain import CandidateRecord, FeatureSchema
from skillroute.policy import (
    Batch,
    GreedyPolicy,
    SchemaMismatchError,
    adapt_to_schema,
    argmax_action,
    featurize,
    init_params,
    load_policy,
    sample_from,
    sample_rows,
    save_policy,
    score,
)

from conftest import make_candidates, random_dataset


def _trained_like(schema, seed=0):
    """Random parameters with a non-zero output layer."""
    rng = np.random.default_rng(seed)
    p = init_params(schema, rng=rng)
    p.weights["w2"] = rng.normal(0, 1.0, p.weights["w2"].shape)
    p.weights["b2"] = np.array(0.3)
    return p


def _naive_probs(params, cands):
    w = params.weights
    s = params.feature_schema
    scores = []
    for c in cands:
        def row(table, vocab, tok):
            return table[vocab.index(tok) + 1] if tok in vocab else table[0]
        x = np.concatenate([
            row(w["intent_emb"], s.intents, c.intent_id),
            row(w["skill_emb"], s.skills, c.skill_id),
            sum((row(w["context_emb"], s.context_tokens, t) for t in c.categorical_context),
                np.zeros(w["context_emb"].shape[1])),
            np.asarray(c.numeric_context),
            [c.nlu_confidence],
        ])
        h = np.maximum(0.0, w["W1"] @ x + w["b1"])
        scores.append(float(w["w2"] @ h + w["b2"]))
    e = np.exp(np.array(scores) - max(scores))
    return e / e.sum()


def test_action_probs_match_naive_scorer():
    ds = random_dataset(60, seed=4)
    params = _trained_like(ds.feature_schema)
    probs = params.action_probs(Batch.from_dataset(ds))
    for i, it in enumerate(ds):
        t = len(it.candidates)
        np.testing.assert_allclose(probs[i, :t], _naive_probs(params, it.candidates), rtol=1e-10, atol=1e-14)
        assert np.all(probs[i, t:] == 0.0)


def test_featurize_layout():
    ds = random_dataset(5, seed=1)
    params = _trained_like(ds.feature_schema)
    c = ds.interactions[0].candidates[0]
    x = featurize(c, params)
    e = params.embedding_dim
    assert x.shape == (3 * e + 2 + 1,)
    assert x[-1] == c.nlu_confidence
    np.testing.assert_allclose(x[3 * e:3 * e + 2], c.numeric_context)


def test_initial_policy_is_uniform():
    ds = random_dataset(30, seed=2)
    for init in ("zeros", "scaled-random"):
        p = init_params(ds.feature_schema, init=init).action_probs(Batch.from_dataset(ds))
        sizes = np.array([len(it.candidates) for it in ds])
        np.testing.assert_allclose(p.max(axis=1), 1.0 / sizes)


def test_unknown_tokens_use_oov_row():
    schema = FeatureSchema(2, ("a",), ("s",), ("d",))
    params = _trained_like(schema)
    known = CandidateRecord("a", "s", 0.5, (0.1, 0.2), ("d",))
    unseen = CandidateRecord("zzz", "s", 0.5, (0.1, 0.2), ("d",))
    params.weights["intent_emb"][0] = params.weights["intent_emb"][1]
    np.testing.assert_allclose(featurize(known, params), featurize(unseen, params))


def test_numeric_dim_mismatch_raises():
    schema = FeatureSchema(3)
    params = init_params(schema)
    with pytest.raises(SchemaMismatchError):
        params.action_probs(Batch([make_candidates([0.9, 0.1])], 2))


def test_save_load_roundtrip(tmp_path):
    ds = random_dataset(20, seed=3)
    params = _trained_like(ds.feature_schema)
    params.artifact_id = "rp-test"
    save_policy(params, tmp_path / "p.json")
    back = load_policy(tmp_path / "p.json")
    b = Batch.from_dataset(ds)
    np.testing.assert_array_equal(back.action_probs(b), params.action_probs(b))
    assert back.fingerprint() == params.fingerprint()
    assert back.artifact_id == "rp-test"


def test_adapt_to_schema_keeps_known_tokens():
    ds = random_dataset(40, seed=5)
    params = _trained_like(ds.feature_schema)
    s = ds.feature_schema
    bigger = FeatureSchema(2, s.intents + ("new_intent",), ("aaa",) + s.skills, s.context_tokens)
    adapted = adapt_to_schema(params, bigger)
    b = Batch.from_dataset(ds)
    np.testing.assert_allclose(adapted.action_probs(b), params.action_probs(b))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=1, max_size=6), st.floats(0.0, 0.999999))
def test_sample_rows_matches_scalar_sampler(weights, u):
    p = np.array(weights) / sum(weights)
    padded = np.zeros(8)
    padded[: len(p)] = p
    a = sample_rows(padded[None, :], np.array([u]))[0]
    assert a == sample_from(padded, u)
    assert padded[a] > 0


def test_sampling_frequencies():
    p = np.array([0.6, 0.3, 0.1, 0.0])
    rng = np.random.default_rng(0)
    a = sample_rows(np.tile(p, (200_000, 1)), rng.random(200_000))
    freq = np.bincount(a, minlength=4) / len(a)
    np.testing.assert_allclose(freq, p, atol=0.005)


def test_greedy_and_argmax():
    ds = random_dataset(30, seed=6)
    params = _trained_like(ds.feature_schema)
    b = Batch.from_dataset(ds)
    g = GreedyPolicy(params).action_probs(b)
    assert np.all(g.sum(axis=1) == 1.0)
    assert np.all(g.argmax(axis=1) == params.action_probs(b).argmax(axis=1))
    it = ds.interactions[0]
    assert argmax_action(params, it.candidates) == int(np.argmax(score(params, it.candidates).propensities))
