"""Hybrid policy: per-segment stochastic dispatch between a replication and a learning policy."""
from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import CandidateRecord, Dataset
from .policy import (
    ActionDistribution,
    Batch,
    Policy,
    PolicyParams,
    SchemaMismatchError,
    policy_from_dict,
    policy_to_dict,
    sample_from,
    sample_rows,
)

HP_FORMAT = "skillroute.hybrid"
HP_FORMAT_VERSION = 1

SUBMODEL_RP = "RP"
SUBMODEL_LP = "LP"


def overlap(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise 1 - ||p - q||_1 / 2 for padded probability matrices."""
    return 1.0 - 0.5 * np.abs(p - q).sum(axis=-1)


def compute_kappa(
    lp: Policy, rp_reference: Policy, validation: Dataset | Batch
) -> dict[str, tuple[float, int]]:
    """Per-segment mean overlap between ``lp`` and the reference policy.

    Returns ``{segment_id: (kappa, support)}``; segments absent from the
    validation data are simply missing.
    """
    batch = validation if isinstance(validation, Batch) else Batch.from_dataset(validation)
    if batch.n == 0:
        raise ValueError("validation set is empty")
    ov = overlap(lp.action_probs(batch), rp_reference.action_probs(batch))
    groups: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(batch.segments):
        groups[s].append(i)
    return {s: (float(ov[idx].mean()), len(idx)) for s, idx in sorted(groups.items())}


def compute_rpdr(kappa: float, kappa_target: float) -> float:
    """Rate at which to defer to the replication policy so the segment meets ``kappa_target``."""
    if not 0.0 < kappa_target < 1.0:
        raise ValueError(f"kappa_target must be in (0, 1), got {kappa_target}")
    if not 0.0 <= kappa <= 1.0 + 1e-12:
        raise ValueError(f"kappa must be in [0, 1], got {kappa}")
    if kappa >= kappa_target:
        return 0.0
    return (kappa_target - kappa) / (1.0 - kappa)


@dataclass
class HybridPolicy:
    rp: PolicyParams
    lp: PolicyParams
    rpdr_table: dict[str, float]
    default_rpdr: float = 1.0
    kappa_target: float = 0.9
    artifact_id: str = ""
    parent_artifact_id: str | None = None
    kappa_table: dict[str, tuple[float, int]] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.kappa_target < 1.0:
            raise ValueError("kappa_target must be in (0, 1)")
        if not 0.0 <= self.default_rpdr <= 1.0:
            raise ValueError("default_rpdr must be in [0, 1]")
        for seg, v in self.rpdr_table.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"rpdr for {seg!r} outside [0, 1]: {v}")
        if not self.rp.feature_schema.compatible_with(self.lp.feature_schema):
            raise SchemaMismatchError("RP and LP feature schemas differ")

    @property
    def feature_schema(self):
        return self.rp.feature_schema

    def rpdr_for(self, segment_id: str) -> float:
        return self.rpdr_table.get(segment_id, self.default_rpdr)

    def rho(self, batch: Batch) -> np.ndarray:
        return np.array([self.rpdr_for(s) for s in batch.segments], dtype=float)

    def action_probs(self, batch: Batch) -> np.ndarray:
        rho = self.rho(batch)[:, None]
        return rho * self.rp.action_probs(batch) + (1.0 - rho) * self.lp.action_probs(batch)

    def route_batch(self, batch: Batch, rng: np.random.Generator):
        """Two-stage dispatch for a batch: (actions, mixture propensities, used_rp flags)."""
        rho = self.rho(batch)
        p_rp = self.rp.action_probs(batch)
        p_lp = self.lp.action_probs(batch)
        use_rp = rng.random(batch.n) < rho
        sub = np.where(use_rp[:, None], p_rp, p_lp)
        actions = sample_rows(sub, rng.random(batch.n))
        mix = rho[:, None] * p_rp + (1.0 - rho[:, None]) * p_lp
        return actions, mix[np.arange(batch.n), actions], use_rp


def build_hp(
    rp: PolicyParams,
    lp: PolicyParams,
    validation: Dataset | Batch,
    kappa_target: float = 0.9,
    default_rpdr: float = 1.0,
    reference: Policy | None = None,
    min_support: int = 30,
    parent_artifact_id: str | None = None,
) -> HybridPolicy:
    """Assemble a hybrid policy, computing RPDR per segment from LP's overlap with ``reference``.

    ``reference`` defaults to RP itself. Segments with fewer than ``min_support``
    validation samples get no table entry and fall back to ``default_rpdr``.
    """
    if not rp.feature_schema.compatible_with(lp.feature_schema):
        raise SchemaMismatchError("RP and LP feature schemas differ")
    kappas = compute_kappa(lp, reference if reference is not None else rp, validation)
    table = {
        seg: compute_rpdr(min(k, 1.0), kappa_target)
        for seg, (k, support) in kappas.items()
        if support >= min_support
    }
    hp = HybridPolicy(rp, lp, table, default_rpdr, kappa_target,
                      parent_artifact_id=parent_artifact_id, kappa_table=kappas)
    hp.artifact_id = f"hp-{_hp_fingerprint(hp)}"
    return hp


def _hp_fingerprint(hp: HybridPolicy) -> str:
    h = hashlib.sha1()
    h.update(hp.rp.artifact_id.encode())
    h.update(hp.lp.artifact_id.encode())
    h.update(json.dumps(sorted(hp.rpdr_table.items())).encode())
    h.update(repr((hp.default_rpdr, hp.kappa_target)).encode())
    return h.hexdigest()[:12]


def _single(candidates: Sequence[CandidateRecord], hp: HybridPolicy) -> Batch:
    if len(candidates) < 1:
        raise ValueError("need at least one candidate")
    return Batch([list(candidates)], hp.feature_schema.numeric_context_dim)


def hp_distribution(hp: HybridPolicy, candidates: Sequence[CandidateRecord]) -> ActionDistribution:
    """Marginal action distribution of the two-stage dispatch: rho * RP + (1 - rho) * LP."""
    return ActionDistribution(hp.action_probs(_single(candidates, hp))[0])


def hp_route(
    hp: HybridPolicy, candidates: Sequence[CandidateRecord], rng: np.random.Generator
) -> tuple[int, float, str]:
    """Pick RP with probability rho, sample from it, and report the mixture propensity."""
    b = _single(candidates, hp)
    rho = hp.rpdr_for(candidates[0].intent_id)
    p_rp = hp.rp.action_probs(b)[0]
    p_lp = hp.lp.action_probs(b)[0]
    use_rp = rng.random() < rho
    action = sample_from(p_rp if use_rp else p_lp, rng.random())
    mix = rho * p_rp + (1.0 - rho) * p_lp
    return action, float(mix[action]), SUBMODEL_RP if use_rp else SUBMODEL_LP


def hp_to_dict(hp: HybridPolicy) -> dict:
    return {
        "format": HP_FORMAT,
        "format_version": HP_FORMAT_VERSION,
        "artifact_id": hp.artifact_id,
        "parent_artifact_id": hp.parent_artifact_id,
        "kappa_target": hp.kappa_target,
        "default_rpdr": hp.default_rpdr,
        "rpdr_table": {k: hp.rpdr_table[k] for k in sorted(hp.rpdr_table)},
        "kappa_table": {k: list(hp.kappa_table[k]) for k in sorted(hp.kappa_table)},
        "rp": policy_to_dict(hp.rp),
        "lp": policy_to_dict(hp.lp),
    }


def hp_from_dict(d: dict) -> HybridPolicy:
    if d.get("format") != HP_FORMAT:
        raise ValueError(f"not a hybrid policy artifact (format={d.get('format')!r})")
    if int(d.get("format_version", 0)) != HP_FORMAT_VERSION:
        raise ValueError(f"unsupported hybrid format version {d.get('format_version')}")
    return HybridPolicy(
        rp=policy_from_dict(d["rp"]),
        lp=policy_from_dict(d["lp"]),
        rpdr_table={k: float(v) for k, v in d["rpdr_table"].items()},
        default_rpdr=float(d["default_rpdr"]),
        kappa_target=float(d["kappa_target"]),
        artifact_id=d["artifact_id"],
        parent_artifact_id=d.get("parent_artifact_id"),
        kappa_table={k: (float(v[0]), int(v[1])) for k, v in d.get("kappa_table", {}).items()},
    )


def save_hp(hp: HybridPolicy, path: str | Path) -> None:
    Path(path).write_text(json.dumps(hp_to_dict(hp)), encoding="utf-8")


def load_hp(path: str | Path) -> HybridPolicy:
    return hp_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
