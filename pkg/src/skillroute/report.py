"""CSV tables and figures summarizing a sequence of refresh cycles."""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .loop import DEPLOYED, CycleRecord

CYCLE_COLUMNS = [
    "cycle", "status", "serving_before", "serving_after", "rp_id", "lp_id", "hp_id", "rp_retrained",
    "n_logs", "n_modeling", "n_validation",
    "ope_expected_reward", "ope_expected_reward_lo", "ope_expected_reward_hi",
    "incumbent_ope_expected_reward", "ope_replication_rate", "ope_policy_agreement",
    "ope_expected_overlap", "ope_l1_mean", "ope_l1_std", "ope_expected_ips_weight",
    "ope_stochastic_exploration_rate", "decision", "violations",
    "incumbent_true_reward", "candidate_true_reward", "post_true_reward", "post_empirical_reward",
    "post_overlap", "post_agreement", "post_min_segment_overlap", "error",
]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def _write(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[_fmt(v) for v in row] for row in rows])


def cycle_rows(records: list[CycleRecord]) -> list[list]:
    rows = []
    for r in records:
        c = r.candidate_report.overall if r.candidate_report else None
        inc = r.incumbent_report.overall if r.incumbent_report else None
        ci = c.ci.get("expected_reward", (None, None)) if c else (None, None)
        post_min = min((v[0] for v in r.post_segment_overlap.values()), default=None)
        rows.append([
            r.cycle, r.status, r.serving_before, r.serving_after, r.rp_id, r.lp_id, r.hp_id, r.rp_retrained,
            r.n_logs, r.n_modeling, r.n_validation,
            c and c.expected_reward, ci[0], ci[1],
            inc and inc.expected_reward, c and c.replication_rate, c and c.policy_agreement,
            c and c.expected_overlap, c and c.l1_mean, c and c.l1_std, c and c.expected_ips_weight,
            c and c.stochastic_exploration_rate,
            r.decision.verdict if r.decision else None,
            ";".join(f"{v.code}@{v.segment}" for v in r.decision.violations) if r.decision else None,
            r.incumbent_true_reward, r.candidate_true_reward, r.post_true_reward, r.post_empirical_reward,
            r.post_overlap, r.post_agreement, post_min, r.error,
        ])
    return rows


def calibration_pairs(records: list[CycleRecord]) -> list[tuple[int, str, float, float, float, float]]:
    """(cycle, artifact, OPE reward, lo, hi, oracle reward) for every deployed artifact."""
    out = []
    for r in records:
        if r.status != DEPLOYED or r.candidate_report is None:
            continue
        b = r.candidate_report.overall
        lo, hi = b.ci.get("expected_reward", (b.expected_reward, b.expected_reward))
        out.append((r.cycle, r.hp_id, b.expected_reward, lo, hi, r.post_true_reward))
    return out


def pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 2 or x.std() == 0 or y.std() == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def trend_rows(records: list[CycleRecord]) -> list[list]:
    """Serving policy after each cycle, as percent change relative to the baseline."""
    if not records:
        return []
    base_true = records[0].incumbent_true_reward
    base_ope = records[0].incumbent_report.overall.expected_reward if records[0].incumbent_report else None
    rows = [[-1, records[0].serving_before, "baseline", base_true, 0.0, base_ope, 0.0, None, None]]
    serving_true = base_true
    for r in records:
        ope = lo = hi = None
        if r.status == DEPLOYED:
            serving_true = r.post_true_reward
            b = r.candidate_report.overall
            ope = b.expected_reward
            lo, hi = b.ci.get("expected_reward", (ope, ope))
        pct = lambda v, ref: None if v is None or not ref else 100.0 * (v - ref) / ref
        rows.append([
            r.cycle, r.serving_after, r.status, serving_true, pct(serving_true, base_true),
            ope, pct(ope, base_ope), pct(lo, base_ope), pct(hi, base_ope),
        ])
    return rows


def replication_rows(records: list[CycleRecord]) -> list[list]:
    rows = []
    for r in records:
        for model in ("rp", "hp", "lp"):
            v = r.validation_replication.get(model)
            if v is not None:
                rows.append([r.cycle, model, v["overlap"], v["agreement"]])
    return rows


def write_report(records: list[CycleRecord], out_dir: str | Path, figures: bool = True) -> dict[str, Path]:
    """Write cycles/calibration/trend/replication/summary CSVs (and PNG figures) to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.csv" for name in ("cycles", "calibration", "trend", "replication", "summary")}

    _write(paths["cycles"], CYCLE_COLUMNS, cycle_rows(records))
    pairs = calibration_pairs(records)
    _write(paths["calibration"],
           ["cycle", "artifact_id", "ope_expected_reward", "ope_lo", "ope_hi", "true_reward"],
           [list(p) for p in pairs])
    trend = trend_rows(records)
    _write(paths["trend"],
           ["cycle", "serving_artifact", "status", "true_reward", "true_pct_change",
            "ope_expected_reward", "ope_pct_change", "ope_pct_lo", "ope_pct_hi"], trend)
    rep = replication_rows(records)
    _write(paths["replication"], ["cycle", "model", "overlap", "agreement"], rep)

    r = pearson([p[2] for p in pairs], [p[5] for p in pairs])
    summary = [
        ["n_cycles", len(records)],
        ["n_deployed", len(pairs)],
        ["n_aborted", sum(rec.status == "aborted" for rec in records)],
        ["calibration_pearson_r", r],
        ["baseline_true_reward", trend[0][3] if trend else None],
        ["final_true_reward", trend[-1][3] if trend else None],
    ]
    _write(paths["summary"], ["key", "value"], summary)

    if figures:
        paths.update(_figures(out, trend, pairs, rep, r))
    return paths


def _figures(out: Path, trend, pairs, rep, r) -> dict[str, Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = {}
    fig, ax = plt.subplots(figsize=(6, 3.5))
    xs = list(range(len(trend)))
    labels = ["base"] + [str(row[0]) for row in trend[1:]]
    ax.plot(xs, [row[4] for row in trend], marker="o", label="oracle")
    ope = [(x, row[6], row[7], row[8]) for x, row in zip(xs, trend) if row[6] is not None and row[7] is not None]
    if ope:
        ax.plot([o[0] for o in ope], [o[1] for o in ope], marker="s", ls="--", label="OPE")
        ax.fill_between([o[0] for o in ope], [o[2] for o in ope], [o[3] for o in ope], alpha=0.2)
    for x, row in zip(xs, trend):
        if row[2] == "aborted":
            ax.axvline(x, color="red", alpha=0.3, lw=4)
    ax.set_xticks(xs, labels)
    ax.set_xlabel("cycle")
    ax.set_ylabel("% change vs baseline")
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.legend()
    fig.tight_layout()
    paths["trend_png"] = out / "trend.png"
    fig.savefig(paths["trend_png"], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4, 4))
    if pairs:
        x = [p[2] for p in pairs]
        y = [p[5] for p in pairs]
        ax.errorbar(x, y, xerr=[[p[2] - p[3] for p in pairs], [p[4] - p[2] for p in pairs]], fmt="o")
        lo, hi = min(x + y), max(x + y)
        ax.plot([lo, hi], [lo, hi], color="grey", lw=0.8)
    ax.set_xlabel("OPE expected reward")
    ax.set_ylabel("oracle reward")
    ax.set_title("r = n/a" if math.isnan(r) else f"r = {r:.3f}")
    fig.tight_layout()
    paths["calibration_png"] = out / "calibration.png"
    fig.savefig(paths["calibration_png"], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for model, marker in (("rp", "o"), ("hp", "s"), ("lp", "^")):
        pts = [(row[0], row[3]) for row in rep if row[1] == model]
        if pts:
            ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker=marker, label=model.upper())
    ax.set_xlabel("cycle")
    ax.set_ylabel("replication vs previous policy (%)")
    ax.legend()
    fig.tight_layout()
    paths["replication_png"] = out / "replication.png"
    fig.savefig(paths["replication_png"], dpi=120)
    plt.close(fig)
    return paths
