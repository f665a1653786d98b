"""Replication (cross-entropy) and learning (clipped IPS) objectives, SGD trainer, gradient checks."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import Dataset, LoggedInteraction
from .policy import (
    WEIGHT_NAMES,
    Batch,
    PolicyParams,
    SchemaMismatchError,
    adapt_to_schema,
    backward,
    forward,
    init_params,
)

log = logging.getLogger(__name__)

RP = "rp"
LP = "lp"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    objective: str = RP
    step_size: float = 0.5
    batch_size: int = 128
    epochs: int = 10
    ips_clip: float | None = 10.0
    l2_penalty: float = 1e-5
    seed: int = 0
    init: str = "scaled-random"
    momentum: float = 0.0
    embedding_dim: int = 8
    hidden: int = 32
    warm_start_from_rp: bool = True

    def __post_init__(self):
        if self.objective not in (RP, LP):
            raise ValueError(f"objective must be 'rp' or 'lp', got {self.objective!r}")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.ips_clip is not None and self.ips_clip <= 1:
            raise ValueError("ips_clip must be > 1 when set")
        if self.l2_penalty < 0:
            raise ValueError("l2_penalty must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _as_batch(batch, params: PolicyParams) -> Batch:
    if isinstance(batch, Batch):
        return batch
    if isinstance(batch, Dataset):
        return Batch.from_dataset(batch)
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    return Batch.from_interactions(batch, params.feature_schema.numeric_context_dim)


def _chosen(cache, batch: Batch) -> np.ndarray:
    return cache.log_probs[np.arange(batch.n), batch.actions]


def rp_loss_and_grad(params: PolicyParams, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean negative log-likelihood of the logged actions, with its gradient."""
    cache = forward(params, batch)
    loss = -float(_chosen(cache, batch).mean())
    probs = np.exp(cache.log_probs) * batch.mask
    dlogits = probs
    dlogits[np.arange(batch.n), batch.actions] -= 1.0
    return loss, backward(params, cache, dlogits / batch.n)


def _ips_weights(cache, batch: Batch, ips_clip: float | None):
    if np.any(batch.propensities <= 0):
        raise ValueError("logging propensities must be > 0")
    p_act = np.exp(_chosen(cache, batch))
    ratio = p_act / batch.propensities
    if ips_clip is None:
        return p_act, ratio, np.ones(batch.n, dtype=bool)
    active = ratio <= ips_clip
    return p_act, np.minimum(ratio, ips_clip), active


def lp_objective_and_grad(
    params: PolicyParams, batch: Batch, ips_clip: float | None
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean clipped IPS reward (to maximize) and its gradient.

    A sample whose ratio exceeds the clip contributes a constant, hence zero gradient.
    """
    cache = forward(params, batch)
    p_act, w, active = _ips_weights(cache, batch, ips_clip)
    value = float(np.mean(batch.rewards * w))
    # d(p_a)/d(logit_k) = p_a (1[k=a] - p_k)
    coef = np.where(active, batch.rewards * p_act / batch.propensities, 0.0)
    probs = np.exp(cache.log_probs) * batch.mask
    dlogits = -coef[:, None] * probs
    dlogits[np.arange(batch.n), batch.actions] += coef
    return value, backward(params, cache, dlogits / batch.n)


def loss_rp(params: PolicyParams, batch: Sequence[LoggedInteraction] | Batch) -> float:
    b = _as_batch(batch, params)
    return -float(_chosen(forward(params, b), b).mean())


def loss_lp(
    params: PolicyParams, batch: Sequence[LoggedInteraction] | Batch, ips_clip: float | None = None
) -> float:
    """Clipped IPS estimate of the policy's reward; larger is better."""
    b = _as_batch(batch, params)
    _, w, _ = _ips_weights(forward(params, b), b, ips_clip)
    return float(np.mean(b.rewards * w))


def _objective(params: PolicyParams, batch: Batch, config: TrainConfig):
    """(value to minimize, gradient of that value)."""
    if config.objective == RP:
        return rp_loss_and_grad(params, batch)
    value, grads = lp_objective_and_grad(params, batch, config.ips_clip)
    return -value, {k: -g for k, g in grads.items()}


def train(
    dataset: Dataset,
    config: TrainConfig,
    warm_start: PolicyParams | None = None,
    parent_artifact_id: str | None = None,
) -> PolicyParams:
    """Minibatch SGD on the configured objective.

    The returned params carry a per-epoch ``trace`` (epoch 0 is the starting point)
    holding the full-data objective in its natural orientation (RP: loss, LP: IPS
    value) and the full-data gradient norm.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(config.seed)
    if warm_start is not None:
        if not warm_start.feature_schema.compatible_with(dataset.feature_schema):
            raise SchemaMismatchError("warm-start params do not match the dataset schema")
        params = adapt_to_schema(warm_start, dataset.feature_schema)
    else:
        params = init_params(
            dataset.feature_schema, config.embedding_dim, config.hidden, config.init, rng
        )
    params.trace = []
    batch = Batch.from_dataset(dataset)
    n = batch.n
    velocity = {k: np.zeros_like(v) for k, v in params.weights.items()}
    sign = 1.0 if config.objective == RP else -1.0

    def full_stats(epoch: int) -> None:
        value, grads = _objective(params, batch, config)
        gnorm = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
        if not np.isfinite(value) or not np.isfinite(gnorm):
            raise TrainingError(
                f"non-finite objective at epoch {epoch} (value={value}, grad_norm={gnorm})"
            )
        params.trace.append({"epoch": epoch, "objective": sign * value, "grad_norm": gnorm})

    full_stats(0)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            mb = batch.take(order[start : start + config.batch_size])
            value, grads = _objective(params, mb, config)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite minibatch objective in epoch {epoch}")
            for k in WEIGHT_NAMES:
                g = grads[k]
                if config.l2_penalty:
                    g = g + config.l2_penalty * params.weights[k]
                velocity[k] = config.momentum * velocity[k] - config.step_size * g
                params.weights[k] = params.weights[k] + velocity[k]
        full_stats(epoch)
        log.debug("%s epoch %d objective %.6f", config.objective, epoch, params.trace[-1]["objective"])
    params.parent_artifact_id = parent_artifact_id if parent_artifact_id is not None else (
        warm_start.artifact_id if warm_start is not None else None
    )
    params.artifact_id = f"{config.objective}-{params.fingerprint()}"
    return params


def write_trace(params: PolicyParams, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "objective", "grad_norm"])
        for row in params.trace:
            w.writerow([row["epoch"], repr(row["objective"]), repr(row["grad_norm"])])


@dataclass
class GradCheckReport:
    objective: str
    max_relative_error: float
    n_checked: int
    n_skipped: int
    tolerance: float
    errors: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_checked > 0 and self.max_relative_error < self.tolerance


def _value(params: PolicyParams, batch: Batch, objective: str, ips_clip: float | None) -> float:
    if objective == RP:
        return loss_rp(params, batch)
    return loss_lp(params, batch, ips_clip)


def grad_check(
    params: PolicyParams,
    batch: Sequence[LoggedInteraction] | Batch,
    tolerance: float = 1e-4,
    objective: str = RP,
    ips_clip: float | None = None,
    n_coords: int = 50,
    step: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Coordinates are drawn from the dense layers and from embedding rows the batch
    touches. A draw is skipped (and replaced) when the +/- step would move a ReLU
    pre-activation or an IPS ratio across its kink, where the objective is not
    differentiable.
    """
    b = _as_batch(batch, params)
    rng = np.random.default_rng(seed)
    if objective == RP:
        _, grads = rp_loss_and_grad(params, b)
    else:
        _, grads = lp_objective_and_grad(params, b, ips_clip)

    base = forward(params, b)
    used = {
        "intent_emb": np.unique(base.intent_idx[b.mask]),
        "skill_emb": np.unique(base.skill_idx[b.mask]),
        "context_emb": np.unique(base.context_idx[base.context_mask]),
    }
    pool: list[tuple[str, tuple]] = []
    for name in ("W1", "b1", "w2"):
        pool.extend((name, idx) for idx in np.ndindex(params.weights[name].shape))
    for name, rows in used.items():
        for r in rows:
            pool.extend((name, (int(r), j)) for j in range(params.embedding_dim))

    def kink_state(p: PolicyParams):
        c = forward(p, b)
        state = [(c.pre > 0)[b.mask]]
        if objective == LP and ips_clip is not None:
            ratio = np.exp(_chosen(c, b)) / b.propensities
            state.append(ratio <= ips_clip)
        return state

    ref = kink_state(params)
    errors: list[float] = []
    skipped = 0
    order = rng.permutation(len(pool))
    for k in order:
        if len(errors) >= n_coords:
            break
        name, idx = pool[k]
        plus = params.copy()
        minus = params.copy()
        plus.weights[name][idx] += step
        minus.weights[name][idx] -= step
        if any(not np.array_equal(a, c) for a, c in zip(ref, kink_state(plus))) or any(
            not np.array_equal(a, c) for a, c in zip(ref, kink_state(minus))
        ):
            skipped += 1
            continue
        numeric = (_value(plus, b, objective, ips_clip) - _value(minus, b, objective, ips_clip)) / (2 * step)
        analytic = float(grads[name][idx])
        denom = max(abs(analytic), abs(numeric), 1e-7)
        errors.append(abs(analytic - numeric) / denom)
    return GradCheckReport(
        objective=objective,
        max_relative_error=max(errors) if errors else float("inf"),
        n_checked=len(errors),
        n_skipped=skipped,
        tolerance=tolerance,
        errors=errors,
    )
