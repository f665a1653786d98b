"""Command-line entry point: ``skillroute <command> [options]``."""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import click
import yaml

from .domain import DataValidationError, Dataset, read_jsonl, write_jsonl
from .gate import GuardrailConfig, decide
from .hybrid import HP_FORMAT, build_hp, hp_from_dict, save_hp
from .loop import LoopConfig, read_records, run_loop, substream, write_records
from .ope import OpeReport, bootstrap, evaluate
from .policy import POLICY_FORMAT, policy_from_dict, save_policy
from .report import write_report
from .simulator import (
    BaselinePolicy,
    EnvConfig,
    collect_logs,
    gen_environment,
    load_environment,
    make_baseline_policy,
    optimal_value,
    save_environment,
    true_reward,
)
from .train import LP, RP, TrainConfig, TrainingError, train, write_trace

EXIT_OK, EXIT_ERROR, EXIT_ABORT = 0, 1, 2

log = logging.getLogger("skillroute")


class Settings:
    def __init__(self, config: dict, seed: int | None, out_dir: Path):
        self.config = config
        self.seed = seed if seed is not None else int(config.get("seed", 0))
        self.out_dir = out_dir

    def out(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / name

    def env_config(self) -> EnvConfig:
        names = {f.name for f in fields(EnvConfig)}
        kw = {k[4:]: v for k, v in self.config.items() if k.startswith("env_") and k[4:] in names}
        return EnvConfig(**kw)

    def env_seed(self) -> int:
        return int(self.config.get("env_seed", self.seed))

    def loop_config(self) -> LoopConfig:
        flat = {k: v for k, v in self.config.items() if k != "env_seed"}
        flat.update(seed=self.seed, out_dir=str(self.out_dir))
        return LoopConfig.from_flat(flat)

    def train_config(self, objective: str) -> TrainConfig:
        lc = self.loop_config()
        base = lc.rp_train if objective == RP else lc.lp_train
        return replace(base, objective=objective, seed=self.seed)

    def guardrails(self) -> GuardrailConfig:
        return self.loop_config().guardrails


def read_config(path: str | None) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise click.UsageError(f"{path}: config must be a flat key-value mapping")
    return data


def load_artifact(path: str | Path):
    """Load any policy artifact written by this package."""
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    fmt = d.get("format")
    if fmt == POLICY_FORMAT:
        return policy_from_dict(d)
    if fmt == HP_FORMAT:
        return hp_from_dict(d)
    if fmt == "skillroute.baseline":
        return BaselinePolicy(float(d["top_prob"]), d.get("artifact_id", "baseline"))
    raise ValueError(f"{path}: unknown artifact format {fmt!r}")


def _concat_logs(paths) -> Dataset:
    return Dataset.concat([read_jsonl(p) for p in paths])


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Flat key-value YAML file mirroring LoopConfig (env_*, rp_*, lp_*, gate_* prefixes).")
@click.option("--seed", type=int, default=None, help="Root seed (overrides the config).")
@click.option("--out-dir", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config_path, seed, out_dir, verbose):
    """Self-learning skill routing: simulate, train, evaluate, gate and refresh policies."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    ctx.obj = Settings(read_config(config_path), seed, Path(out_dir))


@main.command()
@click.pass_obj
def simulate(s: Settings):
    """Generate a synthetic environment and write environment.json."""
    env = gen_environment(s.env_config(), s.env_seed())
    path = s.out("environment.json")
    save_environment(env, path)
    base = make_baseline_policy(env)
    s.out("baseline.json").write_text(json.dumps(base.to_dict()), encoding="utf-8")
    click.echo(f"wrote {path}: {len(env.contexts)} contexts, {env.n_segments} segments")
    click.echo(f"baseline true reward {true_reward(env, base):.4f}, optimal {optimal_value(env):.4f}")


@main.command()
@click.option("--env", "env_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--policy", "policy_path", default="baseline",
              help="Policy artifact to serve, or 'baseline' for the environment's incumbent.")
@click.option("-n", "--n-logs", type=int, default=20000, show_default=True)
@click.option("--cycle", type=int, default=0, show_default=True, help="Environment cycle (drift schedule).")
@click.option("--name", default="logs.jsonl", show_default=True)
@click.pass_obj
def collect(s: Settings, env_path, policy_path, n_logs, cycle, name):
    """Serve simulated traffic with a policy and write the interaction log."""
    env = load_environment(env_path).at_cycle(cycle)
    policy = make_baseline_policy(env) if policy_path == "baseline" else load_artifact(policy_path)
    logs = collect_logs(env, policy, n_logs, substream(s.seed, "logging", cycle), f"c{cycle:03d}")
    path = s.out(name)
    write_jsonl(logs, path)
    click.echo(f"wrote {len(logs)} interactions to {path}")


def _train_cmd(s: Settings, objective: str, logs, warm_start, name):
    data = _concat_logs(logs)
    cfg = s.train_config(objective)
    ws = load_artifact(warm_start) if warm_start else None
    params = train(data, cfg, warm_start=ws, parent_artifact_id=ws.artifact_id if ws else None)
    path = s.out(name)
    save_policy(params, path)
    write_trace(params, path.with_suffix(".trace.csv"))
    final = params.trace[-1]
    click.echo(f"wrote {path} ({params.artifact_id}); final objective {final['objective']:.5f}")


@main.command("train-rp")
@click.option("--logs", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--name", default="rp.json", show_default=True)
@click.pass_obj
def train_rp(s: Settings, logs, name):
    """Train a replication policy on one or more logs."""
    _train_cmd(s, RP, logs, None, name)


@main.command("train-lp")
@click.option("--logs", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--warm-start", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--name", default="lp.json", show_default=True)
@click.pass_obj
def train_lp(s: Settings, logs, warm_start, name):
    """Train a learning policy (clipped IPS) on one or more logs."""
    _train_cmd(s, LP, logs, warm_start, name)


@main.command("build-hp")
@click.option("--rp", "rp_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--lp", "lp_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--validation", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--reference", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Policy the LP overlap is measured against (default: the RP).")
@click.option("--name", default="hp.json", show_default=True)
@click.pass_obj
def build_hp_cmd(s: Settings, rp_path, lp_path, validation, reference, name):
    """Combine RP and LP into a hybrid policy with per-segment RPDR."""
    lc = s.loop_config()
    ref = load_artifact(reference) if reference else None
    hp = build_hp(load_artifact(rp_path), load_artifact(lp_path), read_jsonl(validation), lc.kappa_target,
                  lc.default_rpdr, ref, lc.min_segment_support,
                  parent_artifact_id=getattr(ref, "artifact_id", None))
    path = s.out(name)
    save_hp(hp, path)
    click.echo(f"wrote {path} ({hp.artifact_id})")
    for seg, rho in sorted(hp.rpdr_table.items()):
        k, n = hp.kappa_table[seg]
        click.echo(f"  {seg}: kappa={k:.4f} n={n} rpdr={rho:.4f}")


@main.command("evaluate")
@click.option("--policy", "policy_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--logs", multiple=True, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--baseline", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Policy to compare against (L1, agreement, overlap).")
@click.option("--resamples", type=int, default=None, help="Bootstrap resamples (0 disables).")
@click.option("--name", default="ope", show_default=True)
@click.pass_obj
def evaluate_cmd(s: Settings, policy_path, logs, baseline, resamples, name):
    """Off-policy evaluation of a policy on logged interactions."""
    lc = s.loop_config()
    policy = load_artifact(policy_path)
    base = load_artifact(baseline) if baseline else None
    data = _concat_logs(logs)
    n = lc.bootstrap_resamples if resamples is None else resamples
    if n:
        rep = bootstrap(data, policy, n, lc.bootstrap_level, s.seed, lc.ips_clip, lc.defect_threshold, base)
    else:
        rep = evaluate(policy, data, lc.ips_clip, lc.defect_threshold, base)
    rep.write_json(s.out(f"{name}.json"))
    rep.write_csv(s.out(f"{name}.csv"))
    o = rep.overall
    click.echo(f"n={o.n} expected_reward={o.expected_reward:.4f} replication={o.replication_rate:.4f} "
               f"ips_weight={o.expected_ips_weight:.4f}")


@main.command("gate")
@click.option("--candidate", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--incumbent", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--name", default="decision.json", show_default=True)
@click.pass_obj
def gate_cmd(s: Settings, candidate, incumbent, name):
    """Apply guardrails to two OPE reports; exits 2 on Abort."""
    decision = decide(OpeReport.read_json(candidate), OpeReport.read_json(incumbent), s.guardrails())
    decision.write_json(s.out(name))
    click.echo(decision.verdict)
    for v in decision.violations:
        click.echo(f"  {v.code} segment={v.segment} {v.metric}: observed {v.observed:.6f} threshold {v.threshold}")
    if not decision.deploy:
        sys.exit(EXIT_ABORT)


@main.command()
@click.option("--env", "env_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Environment file (default: generate from env_* config keys).")
@click.option("--no-figures", is_flag=True)
@click.pass_obj
def loop(s: Settings, env_path, no_figures):
    """Run the refresh loop and write archives plus the report."""
    env = load_environment(env_path) if env_path else gen_environment(s.env_config(), s.env_seed())
    save_environment(env, s.out("environment.json"))
    records = run_loop(env, s.loop_config())
    write_records(records, s.out("records.json"))
    paths = write_report(records, s.out("report"), figures=not no_figures)
    for r in records:
        extra = f" post_true={r.post_true_reward:.4f}" if r.post_true_reward is not None else ""
        click.echo(f"cycle {r.cycle}: {r.status} serving={r.serving_after}{extra}")
    click.echo(f"report: {paths['cycles'].parent}")


@main.command()
@click.option("--records", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--no-figures", is_flag=True)
@click.pass_obj
def report(s: Settings, records, no_figures):
    """Render CSV tables and figures from a loop's records.json."""
    paths = write_report(read_records(records), s.out_dir, figures=not no_figures)
    for p in paths.values():
        click.echo(str(p))


def run(argv=None) -> int:
    try:
        main.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_ERROR
    except click.exceptions.Abort:
        return EXIT_ERROR
    except SystemExit as exc:
        return int(exc.code or 0)
    except (DataValidationError, TrainingError, ValueError, OSError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_ERROR
    return EXIT_OK


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
