"""Logged routing interactions, dataset container, JSONL persistence and splitting."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1


class DataValidationError(ValueError):
    """Raised when a record breaks a dataset invariant."""


@dataclass(frozen=True)
class CandidateRecord:
    """One routing candidate: an (NLU interpretation, skill) pair plus shared signals."""

    intent_id: str
    skill_id: str
    nlu_confidence: float
    numeric_context: tuple[float, ...] = ()
    categorical_context: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "intent_id": self.intent_id,
            "skill_id": self.skill_id,
            "nlu_confidence": self.nlu_confidence,
            "numeric_context": list(self.numeric_context),
            "categorical_context": list(self.categorical_context),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateRecord":
        return cls(
            intent_id=str(d["intent_id"]),
            skill_id=str(d["skill_id"]),
            nlu_confidence=float(d["nlu_confidence"]),
            numeric_context=tuple(float(v) for v in d["numeric_context"]),
            categorical_context=tuple(str(v) for v in d["categorical_context"]),
        )


def sort_candidates(candidates: Iterable[CandidateRecord]) -> tuple[CandidateRecord, ...]:
    """Order by descending NLU confidence, ties broken by intent_id."""
    return tuple(sorted(candidates, key=lambda c: (-c.nlu_confidence, c.intent_id)))


@dataclass(frozen=True)
class LoggedInteraction:
    candidates: tuple[CandidateRecord, ...]
    chosen_action: int
    logging_propensity: float
    reward: float
    segment_id: str
    interaction_id: str

    def validate(self, numeric_dim: int | None = None) -> None:
        """Check the record invariants; raises DataValidationError naming the broken one."""
        cands = self.candidates
        if len(cands) < 1:
            raise DataValidationError("empty candidate set")
        if not 0 <= self.chosen_action < len(cands):
            raise DataValidationError(
                f"chosen_action {self.chosen_action} outside [0, {len(cands)})"
            )
        if not (0.0 < self.logging_propensity <= 1.0):
            raise DataValidationError(
                f"logging_propensity {self.logging_propensity!r} not in (0, 1]"
            )
        if not (0.0 <= self.reward <= 1.0):
            raise DataValidationError(f"reward {self.reward!r} not in [0, 1]")
        for c in cands:
            if not (0.0 <= c.nlu_confidence <= 1.0):
                raise DataValidationError(f"nlu_confidence {c.nlu_confidence!r} not in [0, 1]")
            if numeric_dim is not None and len(c.numeric_context) != numeric_dim:
                raise DataValidationError(
                    f"numeric_context has length {len(c.numeric_context)}, expected {numeric_dim}"
                )
        if tuple(cands) != sort_candidates(cands):
            raise DataValidationError("candidates not sorted by descending nlu_confidence")
        if self.segment_id != cands[0].intent_id:
            raise DataValidationError(
                f"segment_id {self.segment_id!r} != top intent {cands[0].intent_id!r}"
            )

    def to_dict(self) -> dict:
        return {
            "candidates": [c.to_dict() for c in self.candidates],
            "chosen_action": self.chosen_action,
            "logging_propensity": self.logging_propensity,
            "reward": self.reward,
            "segment_id": self.segment_id,
            "interaction_id": self.interaction_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoggedInteraction":
        return cls(
            candidates=tuple(CandidateRecord.from_dict(c) for c in d["candidates"]),
            chosen_action=int(d["chosen_action"]),
            logging_propensity=float(d["logging_propensity"]),
            reward=float(d["reward"]),
            segment_id=str(d["segment_id"]),
            interaction_id=str(d["interaction_id"]),
        )


@dataclass(frozen=True)
class FeatureSchema:
    """Numeric dimension and categorical vocabularies (sorted token tuples)."""

    numeric_context_dim: int
    intents: tuple[str, ...] = ()
    skills: tuple[str, ...] = ()
    context_tokens: tuple[str, ...] = ()
    version: int = SCHEMA_VERSION

    @classmethod
    def from_interactions(
        cls, interactions: Iterable[LoggedInteraction], numeric_context_dim: int
    ) -> "FeatureSchema":
        intents, skills, tokens = set(), set(), set()
        for it in interactions:
            for c in it.candidates:
                intents.add(c.intent_id)
                skills.add(c.skill_id)
                tokens.update(c.categorical_context)
        return cls(numeric_context_dim, tuple(sorted(intents)), tuple(sorted(skills)), tuple(sorted(tokens)))

    def union(self, other: "FeatureSchema") -> "FeatureSchema":
        if other.numeric_context_dim != self.numeric_context_dim:
            raise DataValidationError(
                f"numeric_context_dim mismatch: {self.numeric_context_dim} vs {other.numeric_context_dim}"
            )
        return FeatureSchema(
            self.numeric_context_dim,
            tuple(sorted(set(self.intents) | set(other.intents))),
            tuple(sorted(set(self.skills) | set(other.skills))),
            tuple(sorted(set(self.context_tokens) | set(other.context_tokens))),
        )

    def compatible_with(self, other: "FeatureSchema") -> bool:
        # Vocabularies may differ (unseen tokens map to the OOV slot); dimensions may not.
        return self.numeric_context_dim == other.numeric_context_dim and self.version == other.version

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "numeric_context_dim": self.numeric_context_dim,
            "vocab_sizes": {
                "intents": len(self.intents),
                "skills": len(self.skills),
                "context_tokens": len(self.context_tokens),
            },
            "intents": list(self.intents),
            "skills": list(self.skills),
            "context_tokens": list(self.context_tokens),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(
            numeric_context_dim=int(d["numeric_context_dim"]),
            intents=tuple(d.get("intents", ())),
            skills=tuple(d.get("skills", ())),
            context_tokens=tuple(d.get("context_tokens", ())),
            version=int(d.get("version", SCHEMA_VERSION)),
        )


@dataclass
class Dataset:
    interactions: list[LoggedInteraction]
    feature_schema: FeatureSchema
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.interactions)

    def __iter__(self):
        return iter(self.interactions)

    def validate(self) -> None:
        dim = self.feature_schema.numeric_context_dim
        for i, it in enumerate(self.interactions):
            try:
                it.validate(dim)
            except DataValidationError as exc:
                raise DataValidationError(f"interaction {i} ({it.interaction_id}): {exc}") from None

    def segments(self) -> dict[str, list[int]]:
        """Segment id -> positions of its interactions, in dataset order."""
        out: dict[str, list[int]] = defaultdict(list)
        for i, it in enumerate(self.interactions):
            out[it.segment_id].append(i)
        return dict(out)

    def subset(self, indices: Sequence[int], provenance: str | None = None) -> "Dataset":
        return Dataset(
            [self.interactions[i] for i in indices],
            self.feature_schema,
            self.provenance if provenance is None else provenance,
        )

    @staticmethod
    def concat(parts: Sequence["Dataset"], provenance: str | None = None) -> "Dataset":
        if not parts:
            raise ValueError("nothing to concatenate")
        schema = parts[0].feature_schema
        for p in parts[1:]:
            schema = schema.union(p.feature_schema)
        interactions = [it for p in parts for it in p.interactions]
        if provenance is None:
            provenance = "+".join(dict.fromkeys(p.provenance for p in parts))
        return Dataset(interactions, schema, provenance)


def _header(dataset: Dataset) -> dict:
    head = dataset.feature_schema.to_dict()
    head["provenance"] = dataset.provenance
    return head


def _dumps(obj: dict) -> str:
    # json emits float repr (shortest round-trip, up to 17 significant digits)
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def write_jsonl(dataset: Dataset, path: str | Path) -> None:
    """Schema header on line 1, then one interaction per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(_dumps(_header(dataset)) + "\n")
        for it in dataset.interactions:
            fh.write(_dumps(it.to_dict()) + "\n")


def read_jsonl(path: str | Path) -> Dataset:
    """Load and validate a JSONL log; errors name the offending line."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataValidationError(f"{path}: missing schema header")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"{path}:1: malformed JSON ({exc.msg})") from None
    if "numeric_context_dim" not in head:
        raise DataValidationError(f"{path}:1: schema header lacks numeric_context_dim")
    schema = FeatureSchema.from_dict(head)
    if schema.version != SCHEMA_VERSION:
        raise DataValidationError(f"{path}:1: unsupported schema version {schema.version}")
    interactions = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            it = LoggedInteraction.from_dict(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataValidationError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise DataValidationError(f"{path}:{lineno}: bad record ({exc!r})") from None
        try:
            it.validate(schema.numeric_context_dim)
        except DataValidationError as exc:
            raise DataValidationError(f"{path}:{lineno}: {exc}") from None
        interactions.append(it)
    return Dataset(interactions, schema, str(head.get("provenance", "")))


def split(dataset: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic segment-stratified split into (modeling, validation).

    The modeling side gets ``round(fraction * n)`` interactions in total. Every
    segment with at least two interactions lands in both outputs.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    if n < 2:
        raise ValueError("need at least 2 interactions to split")
    rng = np.random.default_rng(seed)
    segs = sorted(dataset.segments().items())
    sizes = np.array([len(idx) for _, idx in segs])
    exact = fraction * sizes
    lo = np.where(sizes >= 2, 1, 0)
    hi = np.where(sizes >= 2, sizes - 1, sizes)
    alloc = np.clip(np.floor(exact).astype(int), lo, hi)
    target = min(max(int(round(fraction * n)), int(lo.sum())), int(hi.sum()))
    # largest-remainder correction toward the global target, within per-segment bounds
    remainder = exact - alloc
    while alloc.sum() != target:
        if alloc.sum() < target:
            room = alloc < hi
            pick = np.flatnonzero(room)[np.argmax(remainder[room])]
            alloc[pick] += 1
            remainder[pick] -= 1.0
        else:
            room = alloc > lo
            pick = np.flatnonzero(room)[np.argmin(remainder[room])]
            alloc[pick] -= 1
            remainder[pick] += 1.0
    modeling: list[int] = []
    for (_, idx), k in zip(segs, alloc):
        perm = rng.permutation(len(idx))
        modeling.extend(idx[j] for j in perm[:k])
    chosen = np.zeros(n, dtype=bool)
    chosen[modeling] = True
    return (
        dataset.subset(np.flatnonzero(chosen).tolist()),
        dataset.subset(np.flatnonzero(~chosen).tolist()),
    )
