"""Pre-deployment guardrails over a candidate's and the incumbent's OPE reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .ope import OVERALL, MetricBundle, OpeReport

REPLICATION_BELOW_MIN = "REPLICATION_BELOW_MIN"
REWARD_REGRESSION = "REWARD_REGRESSION"
CRITICAL_SEGMENT_REGRESSION = "CRITICAL_SEGMENT_REGRESSION"
IPS_WEIGHT_OUT_OF_BAND = "IPS_WEIGHT_OUT_OF_BAND"
SEGMENT_MISSING = "SEGMENT_MISSING"


@dataclass
class SegmentOverride:
    min_replication: float | None = None
    max_reward_regression: float | None = None


@dataclass
class GuardrailConfig:
    min_overall_replication: float = 0.95
    max_reward_regression: float = 0.005
    per_segment_overrides: dict[str, SegmentOverride] = field(default_factory=dict)
    critical_segments: frozenset[str] = frozenset()
    min_expected_ips_weight: float = 0.9
    max_expected_ips_weight: float = 1.1

    def __post_init__(self):
        self.critical_segments = frozenset(self.critical_segments)
        self.per_segment_overrides = {
            k: v if isinstance(v, SegmentOverride) else SegmentOverride(**v)
            for k, v in self.per_segment_overrides.items()
        }
        if not 0.0 <= self.min_overall_replication <= 1.0:
            raise ValueError("min_overall_replication must be in [0, 1]")
        if self.max_reward_regression < 0:
            raise ValueError("max_reward_regression must be >= 0")
        if not self.min_expected_ips_weight <= 1.0 <= self.max_expected_ips_weight:
            raise ValueError("IPS weight band must contain 1.0")
        for seg, o in self.per_segment_overrides.items():
            if o.min_replication is not None and not 0.0 <= o.min_replication <= 1.0:
                raise ValueError(f"{seg}: min_replication must be in [0, 1]")
            if o.max_reward_regression is not None and o.max_reward_regression < 0:
                raise ValueError(f"{seg}: max_reward_regression must be >= 0")

    @classmethod
    def from_mapping(cls, d: dict) -> "GuardrailConfig":
        """Build from flat keys; per-segment values use ``segment.<id>.<field>`` keys."""
        kw: dict = {}
        overrides: dict[str, dict] = {}
        for key, value in d.items():
            if key.startswith("segment."):
                _, seg, name = key.split(".", 2)
                overrides.setdefault(seg, {})[name] = float(value)
            elif key == "critical_segments":
                if isinstance(value, str):
                    value = [s.strip() for s in value.split(",") if s.strip()]
                kw[key] = frozenset(value or ())
            elif key == "per_segment_overrides":
                for seg, o in (value or {}).items():
                    overrides.setdefault(seg, {}).update(o)
            else:
                kw[key] = float(value)
        kw["per_segment_overrides"] = overrides
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["critical_segments"] = sorted(self.critical_segments)
        d["per_segment_overrides"] = {k: asdict(v) for k, v in sorted(self.per_segment_overrides.items())}
        return d


def load_guardrails(path: str | Path) -> GuardrailConfig:
    return GuardrailConfig.from_mapping(yaml.safe_load(Path(path).read_text()) or {})


@dataclass(frozen=True)
class Violation:
    code: str
    segment: str
    metric: str
    threshold: float
    observed: float


@dataclass
class Decision:
    violations: list[Violation]

    @property
    def deploy(self) -> bool:
        return not self.violations

    @property
    def verdict(self) -> str:
        return "Deploy" if self.deploy else "Abort"

    def to_dict(self) -> dict:
        return {"decision": self.verdict, "violations": [asdict(v) for v in self.violations]}

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


def replication_metric(b: MetricBundle) -> tuple[str, float]:
    """Agreement with the incumbent's top choice when known, else with the logged action."""
    if b.policy_agreement is not None:
        return "policy_agreement", b.policy_agreement
    return "replication_rate", b.replication_rate


def decide(candidate: OpeReport, incumbent: OpeReport, config: GuardrailConfig) -> Decision:
    """Evaluate every rule; Deploy only when nothing is violated."""
    out: list[Violation] = []

    name, rep = replication_metric(candidate.overall)
    if rep < config.min_overall_replication:
        out.append(Violation(REPLICATION_BELOW_MIN, OVERALL, name, config.min_overall_replication, rep))

    drop = incumbent.overall.expected_reward - candidate.overall.expected_reward
    if drop > config.max_reward_regression:
        out.append(Violation(REWARD_REGRESSION, OVERALL, "expected_reward", config.max_reward_regression, drop))

    w = candidate.overall.expected_ips_weight
    if not config.min_expected_ips_weight <= w <= config.max_expected_ips_weight:
        bound = config.min_expected_ips_weight if w < config.min_expected_ips_weight else config.max_expected_ips_weight
        out.append(Violation(IPS_WEIGHT_OUT_OF_BAND, OVERALL, "expected_ips_weight", bound, w))

    for seg in sorted(set(config.per_segment_overrides) | set(config.critical_segments)):
        cand = candidate.per_segment.get(seg)
        inc = incumbent.per_segment.get(seg)
        if cand is None or inc is None:
            out.append(Violation(SEGMENT_MISSING, seg, "n", 1.0, 0.0))
            continue
        seg_drop = inc.expected_reward - cand.expected_reward
        o = config.per_segment_overrides.get(seg)
        if o is not None and o.min_replication is not None:
            name, rep = replication_metric(cand)
            if rep < o.min_replication:
                out.append(Violation(REPLICATION_BELOW_MIN, seg, name, o.min_replication, rep))
        if o is not None and o.max_reward_regression is not None and seg_drop > o.max_reward_regression:
            out.append(Violation(REWARD_REGRESSION, seg, "expected_reward", o.max_reward_regression, seg_drop))
        if seg in config.critical_segments and seg_drop > 0.0:
            out.append(Violation(CRITICAL_SEGMENT_REGRESSION, seg, "expected_reward", 0.0, seg_drop))
    return Decision(out)
