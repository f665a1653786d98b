"""Synthetic routing traffic with exact ground-truth satisfaction probabilities.

Contexts are grouped into segments keyed by their top NLU intent. Each context
carries a fixed candidate list (sorted by NLU confidence), a device token and a
numeric signal vector that is jittered at collection time. A configurable
fraction of contexts has a better candidate than the top-confidence one, which
is what the rule-like baseline picks, so a reward-driven learner has headroom.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .domain import CandidateRecord, Dataset, FeatureSchema, LoggedInteraction, sort_candidates
from .policy import Batch, Policy, sample_rows

ENV_FORMAT = "skillroute.environment"
ENV_FORMAT_VERSION = 1


@dataclass
class EnvConfig:
    n_segments: int = 6
    contexts_per_segment: int = 8
    candidates_per_context: tuple[int, int] = (3, 3)
    n_skills: int = 24
    n_better_skills: int = 2
    n_devices: int = 4
    numeric_dim: int = 2
    improvable_fraction: float = 0.3
    improvable_share: float | None = 0.04
    segment_skew: float = 1.0
    feature_noise: float = 0.05
    baseline_top_prob: float = 0.8
    onboard_after_cycle: int | None = None
    onboard_fraction: float = 0.25
    flip_at_cycle: int | None = None
    flip_drop: float = 0.6

    def __post_init__(self):
        self.candidates_per_context = tuple(self.candidates_per_context)
        lo, hi = self.candidates_per_context
        if not 1 <= lo <= hi:
            raise ValueError("candidates_per_context must satisfy 1 <= lo <= hi")
        if not 0.0 <= self.improvable_fraction <= 1.0:
            raise ValueError("improvable_fraction must be in [0, 1]")
        if self.improvable_share is not None and not 0.0 < self.improvable_share < 1.0:
            raise ValueError("improvable_share must be in (0, 1)")
        if not 0.0 < self.baseline_top_prob <= 1.0:
            raise ValueError("baseline_top_prob must be in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["candidates_per_context"] = list(self.candidates_per_context)
        return d


@dataclass(frozen=True)
class Context:
    context_id: int
    segment_id: str
    candidates: tuple[CandidateRecord, ...]
    improvable: bool


@dataclass
class Environment:
    seed: int
    config: EnvConfig
    contexts: list[Context]
    reward_table: np.ndarray  # (n_contexts, T_max), NaN on padding
    context_weights: np.ndarray
    cycle: int = 0
    flipped: bool = False
    onboarded: bool = False
    _batch: Batch | None = field(default=None, repr=False, compare=False)

    @property
    def n_segments(self) -> int:
        return self.config.n_segments

    @property
    def contexts_per_segment(self) -> int:
        return self.config.contexts_per_segment

    @property
    def feature_noise(self) -> float:
        return self.config.feature_noise

    @property
    def segment_ids(self) -> list[str]:
        return sorted({c.segment_id for c in self.contexts})

    def p_star(self, context_id: int, action: int) -> float:
        return float(self.reward_table[context_id, action])

    def optimal_actions(self) -> np.ndarray:
        return np.nanargmax(self.reward_table, axis=1)

    def context_batch(self) -> Batch:
        """All contexts at zero feature noise."""
        if self._batch is None:
            self._batch = Batch([c.candidates for c in self.contexts], self.config.numeric_dim)
        return self._batch

    def at_cycle(self, cycle: int) -> "Environment":
        """Environment as it looks during refresh cycle ``cycle`` (on-boarding, flips)."""
        env = gen_environment(self.config, self.seed)
        cfg = self.config
        if cfg.onboard_after_cycle is not None and cycle > cfg.onboard_after_cycle:
            env = _onboard(env)
        if cfg.flip_at_cycle is not None and cycle >= cfg.flip_at_cycle:
            env = _flip(env)
        env.cycle = cycle
        return env

    def to_dict(self) -> dict:
        return {
            "format": ENV_FORMAT,
            "format_version": ENV_FORMAT_VERSION,
            "seed": self.seed,
            "config": self.config.to_dict(),
            # informational; regeneration uses (config, seed) only
            "summary": {
                "n_contexts": len(self.contexts),
                "segments": self.segment_ids,
                "improvable_contexts": int(sum(c.improvable for c in self.contexts)),
            },
        }


def _skill(k: int) -> str:
    return f"skill_{k:02d}"


def gen_environment(config: EnvConfig | None = None, seed: int = 0) -> Environment:
    """Deterministic environment from (config, seed)."""
    cfg = config or EnvConfig()
    rng = np.random.default_rng(seed)
    lo, hi = cfg.candidates_per_context
    devices = [f"device_{k}" for k in range(cfg.n_devices)]
    segw = 1.0 / np.arange(1, cfg.n_segments + 1) ** cfg.segment_skew
    segw /= segw.sum()

    contexts: list[Context] = []
    rewards: list[list[float]] = []
    weights: list[float] = []
    n_improvable = int(round(cfg.improvable_fraction * cfg.contexts_per_segment))
    # a small pool of skills that beat the top interpretation wherever they appear
    better_pool = [int(v) for v in rng.choice(cfg.n_skills, cfg.n_better_skills, replace=False)]
    for j in range(cfg.n_segments):
        seg = f"intent_{j:02d}"
        better = better_pool[j % len(better_pool)]
        # the rule-preferred skill; improvable contexts get routed to a weaker one
        primary, weak = (int(v) for v in rng.choice(
            [s for s in range(cfg.n_skills) if s not in better_pool], 2, replace=False))
        others = [s for s in range(cfg.n_skills) if s not in better_pool and s not in (primary, weak)]
        flags = np.zeros(cfg.contexts_per_segment, dtype=bool)
        flags[rng.choice(cfg.contexts_per_segment, n_improvable, replace=False)] = True
        within = rng.dirichlet(np.full(cfg.contexts_per_segment, 4.0))
        if 0 < flags.sum() < len(flags) and cfg.improvable_share is not None:
            # improvable contexts are the rarer requests of a segment
            within[flags] *= cfg.improvable_share / within[flags].sum()
            within[~flags] *= (1.0 - cfg.improvable_share) / within[~flags].sum()
        for k in range(cfg.contexts_per_segment):
            t = int(rng.integers(lo, hi + 1))
            improvable = bool(flags[k]) and t > 1
            device = devices[int(rng.integers(cfg.n_devices))]
            base_numeric = tuple(float(v) for v in rng.uniform(0.0, 1.0, cfg.numeric_dim))
            top_conf = float(rng.uniform(0.55, 0.9))
            rest = rng.dirichlet(np.ones(t - 1)) * (1.0 - top_conf) if t > 1 else np.array([])
            # (alt0 interpretation, better skill) only shows up where it beats the top candidate
            alt = [(f"{seg}_alt{1 + int(rng.integers(2))}", _skill(int(s)))
                   for s in rng.choice(others, t - 1, replace=False)]
            if improvable:
                alt[int(rng.integers(t - 1))] = (f"{seg}_alt0", _skill(better))
            top_skill = _skill(weak if improvable else primary)
            cands = [CandidateRecord(seg, top_skill, top_conf, base_numeric, (device,))]
            cands += [
                CandidateRecord(a_int, a_skill, float(min(rest[m], top_conf - 1e-3)), base_numeric, (device,))
                for m, (a_int, a_skill) in enumerate(alt)
            ]
            cands = list(sort_candidates(cands))
            p = np.empty(t)
            for m, c in enumerate(cands):
                if m == 0:
                    p[m] = rng.uniform(0.55, 0.7) if improvable else rng.uniform(0.8, 0.92)
                elif c.skill_id == _skill(better):
                    p[m] = rng.uniform(0.85, 0.95)
                else:
                    p[m] = rng.uniform(0.2, 0.45) if improvable else rng.uniform(0.2, 0.6)
            contexts.append(Context(len(contexts), seg, tuple(cands), improvable))
            rewards.append(p.tolist())
            weights.append(segw[j] * within[k])
    t_max = max(len(r) for r in rewards)
    table = np.full((len(rewards), t_max), np.nan)
    for i, r in enumerate(rewards):
        table[i, : len(r)] = r
    w = np.asarray(weights)
    return Environment(seed, cfg, contexts, table, w / w.sum())


def _onboard(env: Environment) -> Environment:
    """Append a new, strong skill to a fraction of contexts per segment."""
    rng = np.random.default_rng([env.seed, 7919])
    contexts = list(env.contexts)
    rows = [list(r[~np.isnan(r)]) for r in env.reward_table]
    for i, c in enumerate(contexts):
        if rng.random() >= env.config.onboard_fraction:
            continue
        top = c.candidates[0]
        new = CandidateRecord(
            f"{c.segment_id}_new", f"skill_new_{c.segment_id[-2:]}",
            float(rng.uniform(0.0, 1.0 - top.nlu_confidence) * 0.5),
            top.numeric_context, top.categorical_context,
        )
        order = list(c.candidates) + [new]
        sorted_c = sort_candidates(order)
        perm = [order.index(x) for x in sorted_c]
        r = rows[i] + [float(rng.uniform(0.8, 0.95))]
        rows[i] = [r[k] for k in perm]
        contexts[i] = replace(c, candidates=tuple(sorted_c))
    t_max = max(len(r) for r in rows)
    table = np.full((len(rows), t_max), np.nan)
    for i, r in enumerate(rows):
        table[i, : len(r)] = r
    return replace(env, contexts=contexts, reward_table=table, onboarded=True, _batch=None)


def _flip(env: Environment) -> Environment:
    """Adversarial drift: the best candidate of every context loses ``flip_drop`` reward.

    These are exactly the actions a learner has been shifting traffic towards, so a
    candidate fit mostly on pre-drift logs moves further in a now harmful direction.
    """
    table = env.reward_table.copy()
    best = np.nanargmax(table, axis=1)
    rows = np.arange(len(table))
    table[rows, best] = np.maximum(0.0, table[rows, best] - env.config.flip_drop)
    return replace(env, reward_table=table, flipped=True, _batch=None)


class BaselinePolicy:
    """Rule-like incumbent: top-confidence candidate with high probability, the rest uniform."""

    def __init__(self, top_prob: float = 0.8, artifact_id: str = "baseline"):
        if not 0.0 < top_prob <= 1.0:
            raise ValueError("top_prob must be in (0, 1]")
        self.top_prob = top_prob
        self.artifact_id = artifact_id
        self.parent_artifact_id = None

    def action_probs(self, batch: Batch) -> np.ndarray:
        sizes = batch.sizes
        p = np.zeros((batch.n, batch.t_max))
        others = np.where(sizes > 1, (1.0 - self.top_prob) / np.maximum(sizes - 1, 1), 0.0)
        p[:] = others[:, None]
        p[:, 0] = np.where(sizes > 1, self.top_prob, 1.0)
        return p * batch.mask

    def to_dict(self) -> dict:
        return {"format": "skillroute.baseline", "format_version": 1, "top_prob": self.top_prob,
                "artifact_id": self.artifact_id}


def make_baseline_policy(env: Environment) -> BaselinePolicy:
    return BaselinePolicy(env.config.baseline_top_prob)


def route(policy, batch: Batch, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample actions for a batch; returns (actions, logged propensities).

    Policies exposing ``route_batch`` (the hybrid) use their own two-stage
    dispatch; everything else samples from ``action_probs``.
    """
    if hasattr(policy, "route_batch"):
        actions, props, _ = policy.route_batch(batch, rng)
        return actions, props
    probs = policy.action_probs(batch)
    actions = sample_rows(probs, rng.random(batch.n))
    return actions, probs[np.arange(batch.n), actions]


def collect_logs(
    env: Environment,
    policy: Policy,
    n: int,
    rng: np.random.Generator,
    id_prefix: str = "log",
) -> Dataset:
    """Serve ``n`` requests with ``policy`` and record what happened."""
    dim = env.config.numeric_dim
    if n == 0:
        return Dataset([], FeatureSchema(dim), getattr(policy, "artifact_id", ""))
    ctx_idx = rng.choice(len(env.contexts), size=n, p=env.context_weights)
    noise = rng.normal(0.0, env.config.feature_noise, size=(n, dim)) if env.config.feature_noise > 0 else np.zeros((n, dim))
    candidate_sets = []
    for i, c in enumerate(ctx_idx):
        ctx = env.contexts[c]
        num = tuple((np.asarray(ctx.candidates[0].numeric_context) + noise[i]).tolist())
        candidate_sets.append(tuple(replace(r, numeric_context=num) for r in ctx.candidates))
    batch = Batch(candidate_sets, dim)
    actions, props = route(policy, batch, rng)
    p_true = env.reward_table[ctx_idx, actions]
    rewards = (rng.random(n) < p_true).astype(float)
    interactions = [
        LoggedInteraction(
            candidates=candidate_sets[i],
            chosen_action=int(actions[i]),
            logging_propensity=float(props[i]),
            reward=float(rewards[i]),
            segment_id=candidate_sets[i][0].intent_id,
            interaction_id=f"{id_prefix}-{i:07d}",
        )
        for i in range(n)
    ]
    schema = FeatureSchema.from_interactions(interactions, dim)
    return Dataset(interactions, schema, getattr(policy, "artifact_id", ""))


def true_reward(env: Environment, policy: Policy) -> float:
    """Exact expected satisfaction of ``policy`` by enumerating every (context, candidate)."""
    if env.reward_table.size > 10**6:
        raise ValueError("environment too large to enumerate")
    probs = policy.action_probs(env.context_batch())
    per_context = np.nansum(probs * np.nan_to_num(env.reward_table), axis=1)
    return float(np.dot(env.context_weights, per_context))


def optimal_value(env: Environment) -> float:
    return float(np.dot(env.context_weights, np.nanmax(env.reward_table, axis=1)))


def save_environment(env: Environment, path: str | Path) -> None:
    Path(path).write_text(json.dumps(env.to_dict(), indent=2, sort_keys=True), encoding="utf-8")


def load_environment(path: str | Path) -> Environment:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.get("format") != ENV_FORMAT:
        raise ValueError(f"not an environment file (format={d.get('format')!r})")
    if int(d.get("format_version", 0)) != ENV_FORMAT_VERSION:
        raise ValueError(f"unsupported environment format version {d.get('format_version')}")
    return gen_environment(EnvConfig(**d["config"]), int(d["seed"]))
