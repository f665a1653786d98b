"""Off-policy evaluation of a routing policy against logged interactions."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .domain import Dataset
from .hybrid import overlap
from .policy import Batch, Policy

OVERALL = "__overall__"

# metric name -> per-sample column used by both point estimates and bootstrap
_MEAN_METRICS = (
    "replication_rate",
    "expected_match",
    "expected_reward",
    "expected_ips_weight",
    "stochastic_exploration_rate",
)
_STRATIFIED = ("replication_rate", "stochastic_exploration_rate")
_BASELINE_METRICS = ("policy_agreement", "expected_overlap")


@dataclass
class MetricBundle:
    n: int
    replication_rate: float
    expected_match: float
    expected_reward: float
    expected_ips_weight: float
    stochastic_exploration_rate: float
    replication_rate_defect: float | None = None
    replication_rate_nondefect: float | None = None
    stochastic_exploration_rate_defect: float | None = None
    stochastic_exploration_rate_nondefect: float | None = None
    # present only when the baseline's full distribution is available
    l1_mean: float | None = None
    l1_std: float | None = None
    policy_agreement: float | None = None
    expected_overlap: float | None = None
    ci: dict[str, tuple[float, float]] = field(default_factory=dict)

    def metric_names(self) -> list[str]:
        return [k for k in _field_names() if getattr(self, k) is not None]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci"] = {k: [lo, hi] for k, (lo, hi) in sorted(self.ci.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricBundle":
        d = dict(d)
        d["ci"] = {k: (float(v[0]), float(v[1])) for k, v in d.get("ci", {}).items()}
        return cls(**d)


def _field_names() -> list[str]:
    return [
        "replication_rate", "replication_rate_defect", "replication_rate_nondefect",
        "expected_match", "l1_mean", "l1_std", "policy_agreement", "expected_overlap",
        "expected_reward", "expected_ips_weight",
        "stochastic_exploration_rate", "stochastic_exploration_rate_defect",
        "stochastic_exploration_rate_nondefect",
    ]


@dataclass
class OpeReport:
    per_segment: dict[str, MetricBundle]
    overall: MetricBundle
    n_interactions: int
    policy_artifact_id: str
    baseline_artifact_id: str
    ips_clip: float | None = None
    defect_threshold: float = 0.5

    def bundles(self):
        yield OVERALL, self.overall
        yield from sorted(self.per_segment.items())

    def to_dict(self) -> dict:
        return {
            "policy_artifact_id": self.policy_artifact_id,
            "baseline_artifact_id": self.baseline_artifact_id,
            "n_interactions": self.n_interactions,
            "ips_clip": self.ips_clip,
            "defect_threshold": self.defect_threshold,
            "overall": self.overall.to_dict(),
            "per_segment": {k: v.to_dict() for k, v in sorted(self.per_segment.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OpeReport":
        return cls(
            per_segment={k: MetricBundle.from_dict(v) for k, v in d["per_segment"].items()},
            overall=MetricBundle.from_dict(d["overall"]),
            n_interactions=int(d["n_interactions"]),
            policy_artifact_id=d["policy_artifact_id"],
            baseline_artifact_id=d["baseline_artifact_id"],
            ips_clip=d.get("ips_clip"),
            defect_threshold=float(d.get("defect_threshold", 0.5)),
        )

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def read_json(cls, path: str | Path) -> "OpeReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def csv_rows(self) -> list[list]:
        names = _field_names()
        header = ["segment", "n"]
        for k in names:
            header += [k, f"{k}_lo", f"{k}_hi"]
        rows = [header]
        for seg, b in self.bundles():
            row = [seg, b.n]
            for k in names:
                v = getattr(b, k)
                lo, hi = b.ci.get(k, (None, None))
                row += [_fmt(v), _fmt(lo), _fmt(hi)]
            rows.append(row)
        return rows

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            csv.writer(fh).writerows(self.csv_rows())


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


@dataclass
class _Columns:
    """Per-interaction quantities; every metric is a (possibly stratified) mean of one."""

    segments: np.ndarray
    defect: np.ndarray
    cols: dict[str, np.ndarray]


def _columns(policy: Policy, batch: Batch, ips_clip, defect_threshold, baseline) -> _Columns:
    if batch.propensities is None or np.any(batch.propensities <= 0):
        raise ValueError("logged propensities must all be > 0")
    probs = policy.action_probs(batch)
    rows = np.arange(batch.n)
    p_act = probs[rows, batch.actions]
    ratio = p_act / batch.propensities
    w = ratio if ips_clip is None else np.minimum(ratio, ips_clip)
    cols = {
        "replication_rate": (probs.argmax(axis=1) == batch.actions).astype(float),
        "expected_match": p_act,
        "expected_reward": batch.rewards * w,
        "expected_ips_weight": w,
        "stochastic_exploration_rate": 1.0 - probs.max(axis=1),
    }
    if baseline is not None:
        base = baseline.action_probs(batch)
        l1 = np.abs(probs - base).sum(axis=1)
        cols["l1"] = l1
        cols["policy_agreement"] = (probs.argmax(axis=1) == base.argmax(axis=1)).astype(float)
        cols["expected_overlap"] = overlap(probs, base)
    return _Columns(batch.segments, batch.rewards < defect_threshold, cols)


def _bundle(c: _Columns, idx: np.ndarray) -> MetricBundle:
    def mean(name, sel=None):
        v = c.cols[name][idx]
        if sel is not None:
            v = v[sel]
        return float(v.mean()) if len(v) else None

    d = {k: mean(k) for k in _MEAN_METRICS}
    defect = c.defect[idx]
    for k in _STRATIFIED:
        d[f"{k}_defect"] = mean(k, defect)
        d[f"{k}_nondefect"] = mean(k, ~defect)
    if "l1" in c.cols:
        l1 = c.cols["l1"][idx]
        d["l1_mean"] = float(l1.mean())
        d["l1_std"] = float(l1.std())
        d["policy_agreement"] = mean("policy_agreement")
        d["expected_overlap"] = mean("expected_overlap")
    return MetricBundle(n=int(len(idx)), **d)


def _segment_index(segments: np.ndarray) -> dict[str, np.ndarray]:
    out: dict[str, list[int]] = {}
    for i, s in enumerate(segments):
        out.setdefault(s, []).append(i)
    return {s: np.asarray(v) for s, v in sorted(out.items())}


def _as_batch(logs: Dataset | Batch) -> Batch:
    return logs if isinstance(logs, Batch) else Batch.from_dataset(logs)


def evaluate(
    policy: Policy,
    logs: Dataset | Batch,
    ips_clip: float | None = None,
    defect_threshold: float = 0.5,
    baseline: Policy | None = None,
) -> OpeReport:
    """Per-segment and overall OPE metrics of ``policy`` on ``logs``.

    L1 distance, argmax agreement and overlap with the baseline are reported only
    when ``baseline`` (a policy with a full distribution) is supplied.
    """
    batch = _as_batch(logs)
    if batch.n == 0:
        raise ValueError("cannot evaluate on an empty log")
    cols = _columns(policy, batch, ips_clip, defect_threshold, baseline)
    everything = np.arange(batch.n)
    return OpeReport(
        per_segment={s: _bundle(cols, idx) for s, idx in _segment_index(cols.segments).items()},
        overall=_bundle(cols, everything),
        n_interactions=batch.n,
        policy_artifact_id=getattr(policy, "artifact_id", ""),
        baseline_artifact_id=getattr(baseline, "artifact_id", "") if baseline is not None else "",
        ips_clip=ips_clip,
        defect_threshold=defect_threshold,
    )


def _percentile_ci(point: float, samples: list[float], level: float) -> tuple[float, float]:
    vals = np.asarray([s for s in samples if s is not None], dtype=float)
    if len(vals) == 0:
        return (point, point)
    lo, hi = np.percentile(vals, [50 * (1 - level), 50 * (1 + level)])
    # with few resamples the percentile band can miss the full-sample estimate
    return (float(min(lo, point)), float(max(hi, point)))


def bootstrap(
    logs: Dataset | Batch,
    policy: Policy,
    n_resamples: int = 8,
    level: float = 0.95,
    seed: int = 0,
    ips_clip: float | None = None,
    defect_threshold: float = 0.5,
    baseline: Policy | None = None,
) -> OpeReport:
    """Point estimates plus percentile bootstrap intervals for every metric.

    Interactions are resampled with replacement over the whole log; segment
    metrics are recomputed from each resample's members of that segment.
    """
    if n_resamples < 2:
        raise ValueError("need at least 2 bootstrap resamples")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    batch = _as_batch(logs)
    report = evaluate(policy, batch, ips_clip, defect_threshold, baseline)
    cols = _columns(policy, batch, ips_clip, defect_threshold, baseline)
    rng = np.random.default_rng(seed)
    seg_of = cols.segments
    draws: dict[str, list[MetricBundle]] = {OVERALL: []}
    for _ in range(n_resamples):
        idx = rng.integers(0, batch.n, size=batch.n)
        draws[OVERALL].append(_bundle(cols, idx))
        for s, sidx in _segment_index(seg_of[idx]).items():
            draws.setdefault(s, []).append(_bundle(cols, idx[sidx]))
    for name, bundle in report.bundles():
        samples = draws.get(name, [])
        for metric in bundle.metric_names():
            point = getattr(bundle, metric)
            bundle.ci[metric] = _percentile_ci(point, [getattr(b, metric) for b in samples], level)
    return report
