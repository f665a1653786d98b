"""Softmax routing policy over a variable-length candidate set.

Each candidate is featurized independently (embedding lookups plus the shared
numeric signals), scored by a shared two-layer network, and the per-candidate
logits are normalized with a softmax. Because candidates never interact before
the softmax, the policy is permutation-equivariant.

Everything operates on padded :class:`Batch` arrays so training and evaluation
over hundreds of thousands of interactions stay vectorized.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .domain import CandidateRecord, Dataset, FeatureSchema, LoggedInteraction

POLICY_FORMAT = "skillroute.policy"
POLICY_FORMAT_VERSION = 1

WEIGHT_NAMES = ("intent_emb", "skill_emb", "context_emb", "W1", "b1", "w2", "b2")
_VOCAB_FIELDS = {"intent_emb": "intents", "skill_emb": "skills", "context_emb": "context_tokens"}


class SchemaMismatchError(ValueError):
    pass


class Batch:
    """Padded array view of a list of candidate sets (and optionally their log fields)."""

    def __init__(self, candidate_sets: Sequence[Sequence[CandidateRecord]], numeric_dim: int | None = None):
        n = len(candidate_sets)
        t_max = max((len(c) for c in candidate_sets), default=1)
        c_max = max((len(r.categorical_context) for cs in candidate_sets for r in cs), default=0)
        if numeric_dim is None:
            numeric_dim = next((len(r.numeric_context) for cs in candidate_sets for r in cs), 0)
        self.n, self.t_max = n, t_max
        self.mask = np.zeros((n, t_max), dtype=bool)
        self.intents = np.full((n, t_max), None, dtype=object)
        self.skills = np.full((n, t_max), None, dtype=object)
        self.context_tokens = np.full((n, t_max, c_max), None, dtype=object)
        self.context_mask = np.zeros((n, t_max, c_max), dtype=bool)
        self.numeric = np.zeros((n, t_max, numeric_dim))
        self.confidence = np.zeros((n, t_max))
        self.segments = np.empty(n, dtype=object)
        for i, cs in enumerate(candidate_sets):
            self.segments[i] = cs[0].intent_id if cs else None
            for t, r in enumerate(cs):
                self.mask[i, t] = True
                self.intents[i, t] = r.intent_id
                self.skills[i, t] = r.skill_id
                self.confidence[i, t] = r.nlu_confidence
                if len(r.numeric_context) != numeric_dim:
                    raise SchemaMismatchError(
                        f"numeric_context length {len(r.numeric_context)} != {numeric_dim}"
                    )
                self.numeric[i, t] = r.numeric_context
                for k, tok in enumerate(r.categorical_context):
                    self.context_tokens[i, t, k] = tok
                    self.context_mask[i, t, k] = True
        self.sizes = self.mask.sum(axis=1)
        self.actions: np.ndarray | None = None
        self.propensities: np.ndarray | None = None
        self.rewards: np.ndarray | None = None
        self._index_cache: dict = {}

    @classmethod
    def from_interactions(cls, interactions: Sequence[LoggedInteraction], numeric_dim: int | None = None) -> "Batch":
        b = cls([it.candidates for it in interactions], numeric_dim)
        b.segments = np.array([it.segment_id for it in interactions], dtype=object)
        b.actions = np.array([it.chosen_action for it in interactions], dtype=np.int64)
        b.propensities = np.array([it.logging_propensity for it in interactions], dtype=float)
        b.rewards = np.array([it.reward for it in interactions], dtype=float)
        return b

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "Batch":
        return cls.from_interactions(dataset.interactions, dataset.feature_schema.numeric_context_dim)

    @property
    def numeric_dim(self) -> int:
        return self.numeric.shape[-1]

    def take(self, idx: np.ndarray) -> "Batch":
        """Row subset sharing no mutable state with the parent."""
        out = object.__new__(Batch)
        out.n, out.t_max = len(idx), self.t_max
        for name in ("mask", "intents", "skills", "context_tokens", "context_mask", "numeric",
                     "confidence", "segments", "sizes"):
            setattr(out, name, getattr(self, name)[idx])
        for name in ("actions", "propensities", "rewards"):
            v = getattr(self, name)
            setattr(out, name, None if v is None else v[idx])
        out._index_cache = {k: v[idx] for k, v in self._index_cache.items()}
        return out

    def token_indices(self, field_name: str, vocab: tuple[str, ...]) -> np.ndarray:
        """Map tokens to embedding rows: 0 is the OOV slot, vocabulary starts at 1."""
        key = (field_name, vocab)
        hit = self._index_cache.get(key)
        if hit is None:
            lookup = {tok: i + 1 for i, tok in enumerate(vocab)}
            arr = {"intents": self.intents, "skills": self.skills, "context_tokens": self.context_tokens}[field_name]
            flat = np.fromiter((lookup.get(t, 0) for t in arr.ravel()), dtype=np.int64, count=arr.size)
            hit = flat.reshape(arr.shape)
            self._index_cache[key] = hit
        return hit


class Policy(Protocol):
    """Anything that yields a padded (n, T) matrix of action probabilities."""

    artifact_id: str

    def action_probs(self, batch: Batch) -> np.ndarray: ...


@dataclass(frozen=True)
class ActionDistribution:
    propensities: np.ndarray

    def __len__(self) -> int:
        return len(self.propensities)


@dataclass
class PolicyParams:
    feature_schema: FeatureSchema
    weights: dict[str, np.ndarray]
    artifact_id: str = ""
    parent_artifact_id: str | None = None
    trace: list[dict] = field(default_factory=list)

    @property
    def embedding_dim(self) -> int:
        return self.weights["intent_emb"].shape[1]

    @property
    def hidden(self) -> int:
        return self.weights["W1"].shape[0]

    @property
    def input_dim(self) -> int:
        return 3 * self.embedding_dim + self.feature_schema.numeric_context_dim + 1

    def copy(self, **changes) -> "PolicyParams":
        kw = dict(
            feature_schema=self.feature_schema,
            weights={k: v.copy() for k, v in self.weights.items()},
            artifact_id=self.artifact_id,
            parent_artifact_id=self.parent_artifact_id,
            trace=list(self.trace),
        )
        kw.update(changes)
        return PolicyParams(**kw)

    def check_batch(self, batch: Batch) -> None:
        if batch.numeric_dim != self.feature_schema.numeric_context_dim:
            raise SchemaMismatchError(
                f"batch numeric dim {batch.numeric_dim} != policy schema "
                f"{self.feature_schema.numeric_context_dim}"
            )

    def action_probs(self, batch: Batch) -> np.ndarray:
        return np.exp(forward(self, batch).log_probs) * batch.mask

    def fingerprint(self) -> str:
        h = hashlib.sha1()
        for name in WEIGHT_NAMES:
            h.update(np.ascontiguousarray(self.weights[name], dtype=np.float64).tobytes())
        h.update(json.dumps(self.feature_schema.to_dict(), sort_keys=True).encode())
        return h.hexdigest()[:12]


def init_params(
    schema: FeatureSchema,
    embedding_dim: int = 8,
    hidden: int = 32,
    init: str = "scaled-random",
    rng: np.random.Generator | None = None,
    scale: float = 0.3,
) -> PolicyParams:
    """Fresh parameters.

    ``"zeros"`` gives an all-zero network (uniform policy, but a dead ReLU layer
    that SGD cannot leave). ``"scaled-random"`` draws embeddings with standard
    deviation ``scale`` and the hidden layer with ``3 * scale / sqrt(fan_in)``,
    keeping the output layer at zero so the initial policy is still exactly
    uniform while gradients flow.
    """
    d = 3 * embedding_dim + schema.numeric_context_dim + 1
    shapes = {
        "intent_emb": (len(schema.intents) + 1, embedding_dim),
        "skill_emb": (len(schema.skills) + 1, embedding_dim),
        "context_emb": (len(schema.context_tokens) + 1, embedding_dim),
        "W1": (hidden, d),
        "b1": (hidden,),
        "w2": (hidden,),
        "b2": (),
    }
    weights = {k: np.zeros(s) for k, s in shapes.items()}
    if init == "scaled-random":
        rng = rng if rng is not None else np.random.default_rng(0)
        for k in ("intent_emb", "skill_emb", "context_emb"):
            weights[k] = rng.normal(0.0, scale, shapes[k])
        weights["W1"] = rng.normal(0.0, 3.0 * scale / np.sqrt(d), shapes["W1"])
        weights["b1"] = np.full(hidden, 0.1)
    elif init != "zeros":
        raise ValueError(f"unknown init {init!r}")
    return PolicyParams(schema, weights)


def adapt_to_schema(params: PolicyParams, schema: FeatureSchema) -> PolicyParams:
    """Re-key embedding tables onto ``schema``; new tokens start as copies of the OOV row."""
    if not params.feature_schema.compatible_with(schema):
        raise SchemaMismatchError("numeric dimension differs; cannot adapt")
    weights = {k: v.copy() for k, v in params.weights.items()}
    for wname, fname in _VOCAB_FIELDS.items():
        old_vocab = getattr(params.feature_schema, fname)
        new_vocab = getattr(schema, fname)
        if old_vocab == new_vocab:
            continue
        old = params.weights[wname]
        pos = {tok: i + 1 for i, tok in enumerate(old_vocab)}
        rows = [0] + [pos.get(tok, 0) for tok in new_vocab]
        weights[wname] = old[rows].copy()
    return params.copy(feature_schema=schema, weights=weights)


@dataclass
class ForwardCache:
    intent_idx: np.ndarray
    skill_idx: np.ndarray
    context_idx: np.ndarray
    context_mask: np.ndarray
    features: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    logits: np.ndarray
    log_probs: np.ndarray
    mask: np.ndarray


def _features(params: PolicyParams, batch: Batch):
    s = params.feature_schema
    w = params.weights
    ii = batch.token_indices("intents", s.intents)
    si = batch.token_indices("skills", s.skills)
    ci = batch.token_indices("context_tokens", s.context_tokens)
    cm = batch.context_mask
    ctx = (w["context_emb"][ci] * cm[..., None]).sum(axis=2)
    x = np.concatenate(
        [w["intent_emb"][ii], w["skill_emb"][si], ctx, batch.numeric, batch.confidence[..., None]],
        axis=-1,
    )
    return ii, si, ci, cm, x


def forward(params: PolicyParams, batch: Batch) -> ForwardCache:
    params.check_batch(batch)
    w = params.weights
    ii, si, ci, cm, x = _features(params, batch)
    z = x @ w["W1"].T + w["b1"]
    h = np.maximum(z, 0.0)
    logits = h @ w["w2"] + w["b2"]
    masked = np.where(batch.mask, logits, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    shifted = masked - top
    with np.errstate(divide="ignore"):
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = np.where(batch.mask, shifted - lse, -np.inf)
    # keep propensities strictly positive even for extreme logits
    log_probs = np.where(batch.mask, np.maximum(log_probs, -700.0), -np.inf)
    return ForwardCache(ii, si, ci, cm, x, z, h, logits, log_probs, batch.mask)


def backward(params: PolicyParams, cache: ForwardCache, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar whose derivative w.r.t. the logits is ``dlogits`` (zero on padding)."""
    w = params.weights
    de = params.embedding_dim
    g = np.where(cache.mask, dlogits, 0.0)
    grads = {
        "w2": np.einsum("nt,nth->h", g, cache.hidden),
        "b2": np.asarray(g.sum()),
    }
    dz = (g[..., None] * w["w2"]) * (cache.pre > 0)
    flat_dz = dz.reshape(-1, dz.shape[-1])
    grads["W1"] = flat_dz.T @ cache.features.reshape(-1, cache.features.shape[-1])
    grads["b1"] = flat_dz.sum(axis=0)
    dx = dz @ w["W1"]
    gi = np.zeros_like(w["intent_emb"])
    np.add.at(gi, cache.intent_idx.ravel(), dx[..., :de].reshape(-1, de))
    gs = np.zeros_like(w["skill_emb"])
    np.add.at(gs, cache.skill_idx.ravel(), dx[..., de : 2 * de].reshape(-1, de))
    gc = np.zeros_like(w["context_emb"])
    if cache.context_idx.shape[-1]:
        dctx = np.broadcast_to(dx[..., None, 2 * de : 3 * de], cache.context_idx.shape + (de,))
        sel = cache.context_mask
        np.add.at(gc, cache.context_idx[sel], dctx[sel])
    grads["intent_emb"], grads["skill_emb"], grads["context_emb"] = gi, gs, gc
    return grads


def featurize(candidate: CandidateRecord, params: PolicyParams) -> np.ndarray:
    """Feature vector of one candidate: [intent | skill | sum of context tokens | numeric | confidence]."""
    b = Batch([[candidate]], params.feature_schema.numeric_context_dim)
    return _features(params, b)[-1][0, 0]


def score(params: PolicyParams, candidates: Sequence[CandidateRecord]) -> ActionDistribution:
    if len(candidates) < 1:
        raise ValueError("need at least one candidate")
    b = Batch([list(candidates)], params.feature_schema.numeric_context_dim)
    return ActionDistribution(params.action_probs(b)[0])


def argmax_action(params: PolicyParams, candidates: Sequence[CandidateRecord]) -> int:
    # np.argmax returns the first maximum: lowest index wins ties
    return int(np.argmax(score(params, candidates).propensities))


def sample_action(
    params: PolicyParams,
    candidates: Sequence[CandidateRecord],
    rng: np.random.Generator,
    greedy: bool = False,
) -> tuple[int, float]:
    """Draw an action from the softmax (or take the argmax when ``greedy``)."""
    p = score(params, candidates).propensities
    a = int(np.argmax(p)) if greedy else sample_from(p, rng.random())
    return a, float(p[a])


def sample_from(p: np.ndarray, u: float) -> int:
    """Inverse-CDF draw with a single uniform; always lands on a positive-probability entry."""
    cdf = np.cumsum(p)
    a = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    a = min(a, len(p) - 1)
    while p[a] <= 0.0 and a > 0:
        a -= 1
    return a


def sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Vectorized inverse-CDF sampling, one uniform per row."""
    cdf = np.cumsum(probs, axis=1)
    a = (cdf <= (u * cdf[:, -1])[:, None]).sum(axis=1)
    a = np.minimum(a, probs.shape[1] - 1)
    # never land on padding / zero-probability tail entries
    bad = probs[np.arange(len(a)), a] <= 0.0
    if bad.any():
        for i in np.flatnonzero(bad):
            a[i] = sample_from(probs[i], u[i])
    return a


class GreedyPolicy:
    """Deterministic argmax wrapper (ablation of softmax sampling)."""

    def __init__(self, inner: Policy):
        self.inner = inner
        self.artifact_id = f"greedy({inner.artifact_id})"

    def action_probs(self, batch: Batch) -> np.ndarray:
        p = self.inner.action_probs(batch)
        out = np.zeros_like(p)
        out[np.arange(batch.n), p.argmax(axis=1)] = 1.0
        return out


def policy_to_dict(params: PolicyParams) -> dict:
    return {
        "format": POLICY_FORMAT,
        "format_version": POLICY_FORMAT_VERSION,
        "artifact_id": params.artifact_id,
        "parent_artifact_id": params.parent_artifact_id,
        "feature_schema": params.feature_schema.to_dict(),
        "weights": {
            k: {"shape": list(params.weights[k].shape), "data": params.weights[k].ravel().tolist()}
            for k in WEIGHT_NAMES
        },
        "trace": params.trace,
    }


def policy_from_dict(d: dict) -> PolicyParams:
    if d.get("format") != POLICY_FORMAT:
        raise ValueError(f"not a policy artifact (format={d.get('format')!r})")
    if int(d.get("format_version", 0)) != POLICY_FORMAT_VERSION:
        raise ValueError(f"unsupported policy format version {d.get('format_version')}")
    weights = {
        k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d["weights"].items()
    }
    return PolicyParams(
        feature_schema=FeatureSchema.from_dict(d["feature_schema"]),
        weights=weights,
        artifact_id=d["artifact_id"],
        parent_artifact_id=d.get("parent_artifact_id"),
        trace=list(d.get("trace", [])),
    )


def save_policy(params: PolicyParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(policy_to_dict(params)), encoding="utf-8")


def load_policy(path: str | Path) -> PolicyParams:
    return policy_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
