"""Self-learning refresh loop: collect, split, train, hybridize, evaluate, gate, deploy, measure."""
from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .domain import Dataset, split, write_jsonl
from .gate import Decision, GuardrailConfig, Violation, decide
from .hybrid import HybridPolicy, build_hp, overlap, save_hp
from .ope import OpeReport, bootstrap
from .policy import Batch, PolicyParams, save_policy
from .simulator import BaselinePolicy, Environment, collect_logs, make_baseline_policy, true_reward
from .train import LP, RP, TrainConfig, TrainingError, train

log = logging.getLogger(__name__)

DEPLOYED = "deployed"
ABORTED = "aborted"
TRAIN_FAILED = "train_failed"


def _default_rp() -> TrainConfig:
    return TrainConfig(objective=RP, step_size=0.5, epochs=30)


def _default_lp() -> TrainConfig:
    return TrainConfig(objective=LP, step_size=0.5, epochs=20, l2_penalty=1e-3)


@dataclass
class LoopConfig:
    n_cycles: int = 4
    logs_per_cycle: int = 20000
    rp_update_period: int = 7
    freeze_rp: bool = False
    window_cycles: int = 2
    # RP imitates whatever is serving now, so it only sees the newest logs by default
    rp_window_cycles: int = 1
    kappa_target: float = 0.9
    default_rpdr: float = 1.0
    min_segment_support: int = 30
    kappa_reference: str = "previous"
    split_fraction: float = 0.8
    ips_clip: float | None = 10.0
    defect_threshold: float = 0.5
    bootstrap_resamples: int = 8
    bootstrap_level: float = 0.95
    postdeploy_samples: int = 10000
    seed: int = 0
    out_dir: str | None = None
    archive: bool = True
    rp_train: TrainConfig = field(default_factory=_default_rp)
    lp_train: TrainConfig = field(default_factory=_default_lp)
    guardrails: GuardrailConfig = field(default_factory=GuardrailConfig)

    def __post_init__(self):
        if self.n_cycles < 0 or self.logs_per_cycle < 2:
            raise ValueError("n_cycles must be >= 0 and logs_per_cycle >= 2")
        if self.rp_update_period < 1 or self.window_cycles < 1 or self.rp_window_cycles < 1:
            raise ValueError("rp_update_period and window_cycles must be >= 1")
        if self.kappa_reference not in ("previous", "rp"):
            raise ValueError("kappa_reference must be 'previous' or 'rp'")

    @classmethod
    def from_flat(cls, d: dict) -> "LoopConfig":
        """Build from a flat mapping: ``rp_*``/``lp_*`` go to the train configs, ``gate_*`` to guardrails."""
        own = {f.name for f in fields(cls)} - {"rp_train", "lp_train", "guardrails"}
        train_fields = {f.name for f in fields(TrainConfig)}
        kw, rp, lp, gate = {}, {}, {}, {}
        for key, value in d.items():
            if key in own:
                kw[key] = value
            elif key.startswith("rp_") and key[3:] in train_fields:
                rp[key[3:]] = value
            elif key.startswith("lp_") and key[3:] in train_fields:
                lp[key[3:]] = value
            elif key.startswith("gate_"):
                gate[key[5:]] = value
            elif key.startswith("env_"):
                continue
            else:
                raise ValueError(f"unknown loop config key {key!r}")
        return cls(
            rp_train=replace(_default_rp(), **rp),
            lp_train=replace(_default_lp(), **lp),
            guardrails=GuardrailConfig.from_mapping(gate) if gate else GuardrailConfig(),
            **kw,
        )


@dataclass
class CycleRecord:
    cycle: int
    status: str
    serving_before: str
    serving_after: str
    rp_id: str | None = None
    lp_id: str | None = None
    hp_id: str | None = None
    rp_retrained: bool = False
    n_logs: int = 0
    n_modeling: int = 0
    n_validation: int = 0
    rpdr_table: dict[str, float] = field(default_factory=dict)
    kappa_table: dict[str, tuple[float, int]] = field(default_factory=dict)
    candidate_report: OpeReport | None = None
    incumbent_report: OpeReport | None = None
    decision: Decision | None = None
    incumbent_true_reward: float | None = None
    candidate_true_reward: float | None = None
    post_true_reward: float | None = None
    post_empirical_reward: float | None = None
    post_overlap: float | None = None
    post_agreement: float | None = None
    post_segment_overlap: dict[str, tuple[float, int]] = field(default_factory=dict)
    validation_replication: dict[str, dict[str, float]] = field(default_factory=dict)
    error: str | None = None
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["candidate_report"] = self.candidate_report.to_dict() if self.candidate_report else None
        d["incumbent_report"] = self.incumbent_report.to_dict() if self.incumbent_report else None
        d["decision"] = self.decision.to_dict() if self.decision else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CycleRecord":
        d = dict(d)
        for k in ("candidate_report", "incumbent_report"):
            d[k] = OpeReport.from_dict(d[k]) if d.get(k) else None
        if d.get("decision"):
            d["decision"] = Decision([Violation(**v) for v in d["decision"]["violations"]])
        d["kappa_table"] = {k: (float(v[0]), int(v[1])) for k, v in d.get("kappa_table", {}).items()}
        d["post_segment_overlap"] = {
            k: (float(v[0]), int(v[1])) for k, v in d.get("post_segment_overlap", {}).items()
        }
        return cls(**d)


def substream(root: int, name: str, *keys: int) -> np.random.Generator:
    """Independent, replayable RNG stream for (root seed, purpose, keys)."""
    return np.random.default_rng(np.random.SeedSequence(root, spawn_key=(zlib.crc32(name.encode()), *keys)))


def _subseed(root: int, name: str, *keys: int) -> int:
    return int(substream(root, name, *keys).integers(2**31 - 1))


def _replication_vs(policy, reference, batch: Batch) -> dict[str, float]:
    p, q = policy.action_probs(batch), reference.action_probs(batch)
    return {
        "overlap": float(overlap(p, q).mean()),
        "agreement": float((p.argmax(axis=1) == q.argmax(axis=1)).mean()),
    }


def _segment_overlap(policy, reference, batch: Batch) -> dict[str, tuple[float, int]]:
    ov = overlap(policy.action_probs(batch), reference.action_probs(batch))
    out = {}
    for seg in sorted(set(batch.segments)):
        sel = batch.segments == seg
        out[seg] = (float(ov[sel].mean()), int(sel.sum()))
    return out


class _Archive:
    def __init__(self, root: str | None, enabled: bool):
        self.root = Path(root) if (root and enabled) else None
        if self.root is not None:
            for sub in ("artifacts", "logs", "ope"):
                (self.root / sub).mkdir(parents=True, exist_ok=True)

    def policy(self, p) -> None:
        if self.root is None:
            return
        path = self.root / "artifacts" / f"{p.artifact_id}.json"
        if path.exists():
            return
        if isinstance(p, HybridPolicy):
            save_hp(p, path)
        elif isinstance(p, PolicyParams):
            save_policy(p, path)
        elif isinstance(p, BaselinePolicy):
            path.write_text(json.dumps(p.to_dict()), encoding="utf-8")

    def logs(self, cycle: int, ds: Dataset) -> None:
        if self.root is not None:
            write_jsonl(ds, self.root / "logs" / f"cycle_{cycle:03d}.jsonl")

    def report(self, name: str, rep: OpeReport) -> None:
        if self.root is not None:
            rep.write_json(self.root / "ope" / f"{name}.json")
            rep.write_csv(self.root / "ope" / f"{name}.csv")


def run_loop(env: Environment, config: LoopConfig, baseline=None) -> list[CycleRecord]:
    """Run ``config.n_cycles`` refreshes starting from the baseline policy."""
    serving = baseline if baseline is not None else make_baseline_policy(env)
    archive = _Archive(config.out_dir, config.archive)
    archive.policy(serving)
    root = config.seed
    rp: PolicyParams | None = None
    modeling_window: list[Dataset] = []
    records: list[CycleRecord] = []

    for i in range(config.n_cycles):
        t0 = time.perf_counter()
        env_i = env.at_cycle(i)
        timings: dict[str, float] = {}
        logs = collect_logs(env_i, serving, config.logs_per_cycle, substream(root, "logging", i), f"c{i:03d}")
        archive.logs(i, logs)
        modeling, validation = split(logs, config.split_fraction, _subseed(root, "split", i))
        modeling_window = (modeling_window + [modeling])[-config.window_cycles :]
        window = Dataset.concat(modeling_window, provenance=f"window-c{i:03d}")
        timings["collect"] = time.perf_counter() - t0
        rec = CycleRecord(
            cycle=i,
            status=TRAIN_FAILED,
            serving_before=serving.artifact_id,
            serving_after=serving.artifact_id,
            n_logs=len(logs),
            n_modeling=len(window),
            n_validation=len(validation),
            incumbent_true_reward=true_reward(env_i, serving),
        )
        t1 = time.perf_counter()
        try:
            retrain_rp = rp is None or (not config.freeze_rp and i % config.rp_update_period == 0)
            if retrain_rp:
                rp_cfg = replace(config.rp_train, objective=RP, seed=_subseed(root, "training", i, 0))
                rp_data = Dataset.concat(modeling_window[-config.rp_window_cycles :], provenance=f"rp-c{i:03d}")
                rp = train(rp_data, rp_cfg, parent_artifact_id=serving.artifact_id)
            lp_cfg = replace(config.lp_train, objective=LP, seed=_subseed(root, "training", i, 1))
            lp = train(window, lp_cfg, warm_start=rp if lp_cfg.warm_start_from_rp else None,
                       parent_artifact_id=rp.artifact_id)
        except TrainingError as exc:
            log.warning("cycle %d: training failed: %s", i, exc)
            rec.error = str(exc)
            rec.timings = timings
            records.append(rec)
            continue
        timings["train"] = time.perf_counter() - t1
        rec.rp_retrained = retrain_rp
        rec.rp_id, rec.lp_id = rp.artifact_id, lp.artifact_id

        val_batch = Batch.from_dataset(validation)
        reference = serving if config.kappa_reference == "previous" else rp
        hp = build_hp(rp, lp, val_batch, config.kappa_target, config.default_rpdr, reference,
                      config.min_segment_support, parent_artifact_id=serving.artifact_id)
        rec.hp_id = hp.artifact_id
        rec.rpdr_table = dict(sorted(hp.rpdr_table.items()))
        rec.kappa_table = dict(sorted(hp.kappa_table.items()))
        for p in (rp, lp, hp):
            archive.policy(p)
        rec.validation_replication = {
            name: _replication_vs(p, serving, val_batch) for name, p in (("rp", rp), ("hp", hp), ("lp", lp))
        }

        t2 = time.perf_counter()
        boot_seed = _subseed(root, "bootstrap", i)
        ope_kw = dict(n_resamples=config.bootstrap_resamples, level=config.bootstrap_level, seed=boot_seed,
                      ips_clip=config.ips_clip, defect_threshold=config.defect_threshold, baseline=serving)
        rec.candidate_report = bootstrap(val_batch, hp, **ope_kw)
        rec.incumbent_report = bootstrap(val_batch, serving, **ope_kw)
        archive.report(f"cycle_{i:03d}_candidate", rec.candidate_report)
        archive.report(f"cycle_{i:03d}_incumbent", rec.incumbent_report)
        rec.decision = decide(rec.candidate_report, rec.incumbent_report, config.guardrails)
        rec.candidate_true_reward = true_reward(env_i, hp)
        timings["evaluate"] = time.perf_counter() - t2

        if rec.decision.deploy:
            env_next = env.at_cycle(i + 1)
            fresh = collect_logs(env_next, hp, config.postdeploy_samples, substream(root, "postdeploy", i),
                                 f"post{i:03d}")
            fb = Batch.from_dataset(fresh)
            rep = _replication_vs(hp, serving, fb)
            rec.post_overlap, rec.post_agreement = rep["overlap"], rep["agreement"]
            rec.post_segment_overlap = _segment_overlap(hp, serving, fb)
            rec.post_empirical_reward = float(fb.rewards.mean())
            rec.post_true_reward = true_reward(env_next, hp)
            rec.status = DEPLOYED
            serving = hp
        else:
            rec.status = ABORTED
            log.info("cycle %d: deployment aborted (%d violations)", i, len(rec.decision.violations))
        rec.serving_after = serving.artifact_id
        timings["total"] = time.perf_counter() - t0
        rec.timings = timings
        records.append(rec)
        log.info("cycle %d: %s serving=%s", i, rec.status, serving.artifact_id)

    if archive.root is not None:
        write_records(records, archive.root / "records.json")
    return records


def write_records(records: list[CycleRecord], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in records], indent=1), encoding="utf-8")


def read_records(path: str | Path) -> list[CycleRecord]:
    return [CycleRecord.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
