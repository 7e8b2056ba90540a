"""AdamW training loop: linear warmup + cosine decay, global-norm gradient
clipping, early stopping on a validation metric."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as nk
from .errors import ConfigError, ContractError, NumericError, TrainingError
from .model import (
    ModelConfig,
    ModelParams,
    forward_image_batch,
    forward_sequence,
)
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-4
    weight_decay: float = 0.01
    clip_max_norm: float = 1.0
    warmup_fraction: float = 0.2
    max_epochs: int = 200
    patience: int = 25
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in (0, 1)")
        if self.patience >= self.max_epochs:
            raise ConfigError("patience must be < max_epochs")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.peak_lr <= 0 or self.clip_max_norm <= 0:
            raise ConfigError("peak_lr and clip_max_norm must be positive")


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear 0 -> peak over the first warmup fraction of the run's steps,
    then cosine decay from peak to exactly 0 at total_steps."""
    if step < 0 or step > total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warm = math.floor(cfg.warmup_fraction * total_steps)
    if step < warm:
        return cfg.peak_lr * step / warm
    denom = max(total_steps - warm, 1)
    progress = (step - warm) / denom
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is <= max_norm.

    Returns the applied scale (1.0 when the norm was already below).
    """
    tensors = params.tensors() if isinstance(params, ModelParams) else list(params)
    sq = 0.0
    for t in tensors:
        if t.grad is None:
            raise ContractError("clip_gradients before backward: missing grad")
        sq += float(np.sum(t.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for t in tensors:
        t.grad *= t.grad.dtype.type(factor)
    return factor


class AdamWState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: ModelParams):
        self.m = {k: np.zeros_like(t.data) for k, t in params.named()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.named()}
        self.t = 0


def adamw_step(params: ModelParams, state: AdamWState, lr: float,
               cfg: TrainConfig) -> None:
    """Decoupled-weight-decay Adam update. Decay touches weight matrices
    only, never layer-norm affines, biases, or position embeddings."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, p in params.named():
        g = p.grad
        if g is None or g.shape != p.data.shape:
            raise ContractError(f"adamw_step: bad gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if cfg.weight_decay and params.decays(name):
            update = update + cfg.weight_decay * p.data
        p.data -= p.data.dtype.type(lr) * update.astype(p.data.dtype)


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_val_metric: float = -math.inf

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _majority(values: np.ndarray) -> int:
    # lowest class index wins ties
    return int(np.bincount(values).argmax())


def _batch_targets(matrix, sample_ids, cfg: ModelConfig) -> np.ndarray:
    """Label rows aligned with the model's logit rows; -1 marks missing.

    The pooled single-prediction variant trains against the majority vote
    of each sample's observed labels (aggregation before modeling)."""
    rows = np.stack([matrix.labels_row(s) for s in sample_ids])
    if cfg.variant != "pre_mv_pool":
        return rows
    out = np.full((len(sample_ids), 1), -1, dtype=np.int64)
    for i, row in enumerate(rows):
        obs = row[row >= 0]
        if obs.size:
            out[i, 0] = _majority(obs)
    return out


def predict_rows(params: ModelParams, cfg: ModelConfig, features,
                 sample_ids, batch_size: int = 256) -> dict:
    """Argmax class predictions per sample: {sample_id: int array [n_rows]}."""
    out = {}
    if cfg.mode == "sequence":
        for sid in sample_ids:
            logits, _ = forward_sequence(
                Tensor(features[sid]), params, cfg, capture_attention=False)
            out[sid] = logits.data.argmax(axis=-1)
        return out
    ids = list(sample_ids)
    for lo in range(0, len(ids), batch_size):
        chunk = ids[lo:lo + batch_size]
        stacked = Tensor(np.stack([features[s] for s in chunk]))
        logits = forward_image_batch(stacked, params, cfg)
        for i, sid in enumerate(chunk):
            out[sid] = logits.data[i].argmax(axis=-1)
    return out


def mean_annotator_accuracy(params: ModelParams, cfg: ModelConfig,
                            features, matrix) -> float:
    """Default validation metric: mean per-annotator accuracy on observed
    labels (single-prediction variants score against the majority vote)."""
    sids = [s for s in matrix.samples if matrix.has_any(s)]
    preds = predict_rows(params, cfg, features, sids)
    if cfg.variant == "pre_mv_pool":
        hits = total = 0
        for s in sids:
            row = matrix.labels_row(s)
            obs = row[row >= 0]
            if obs.size == 0:
                continue
            total += 1
            hits += int(preds[s][0] == _majority(obs))
        return hits / total if total else 0.0
    accs = []
    for k in range(cfg.n_annotators):
        hits = total = 0
        for s in sids:
            y = matrix.labels_row(s)[k]
            if y < 0:
                continue
            total += 1
            hits += int(preds[s][k] == y)
        if total:
            accs.append(hits / total)
    return float(np.mean(accs)) if accs else 0.0


def train(params: ModelParams, model_cfg: ModelConfig, features,
          train_matrix, val_matrix, cfg: TrainConfig,
          metric_fn: Optional[Callable[[ModelParams], float]] = None,
          step_monitor: Optional[Callable[[dict], None]] = None
          ) -> tuple[ModelParams, TrainHistory]:
    """Run the optimization loop and return (best params, history).

    Batches are seeded shuffles of the labeled training samples. After each
    epoch the validation metric is computed; the best parameters are
    snapshotted and training stops once `patience` epochs pass without
    improvement. `metric_fn` overrides the default validation metric;
    `step_monitor` observes every optimizer step.
    """
    cfg.validate()
    train_ids = [s for s in train_matrix.samples if train_matrix.has_any(s)]
    val_ids = [s for s in val_matrix.samples if val_matrix.has_any(s)]
    if not train_ids or not val_ids:
        raise ConfigError("train/validation splits must be non-empty")

    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train_ids) / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    state = AdamWState(params)
    history = TrainHistory()
    best_arrays = params.copy_arrays()
    bad_epochs = 0
    step = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_ids))
        epoch_loss = 0.0
        epoch_lr = lr_at(step, total_steps, cfg)
        for lo in range(0, len(train_ids), cfg.batch_size):
            batch = [train_ids[i] for i in order[lo:lo + cfg.batch_size]]
            lr = lr_at(step, total_steps, cfg)
            try:
                loss_val = _train_step(params, model_cfg, features, train_matrix,
                                       batch, state, lr, cfg)
            except NumericError as exc:
                raise TrainingError(
                    f"non-finite value at epoch {epoch}, step {step}: {exc}"
                ) from exc
            if step_monitor is not None:
                post_norm = math.sqrt(sum(
                    float(np.sum(t.grad.astype(np.float64) ** 2))
                    for t in params.tensors()))
                step_monitor({"epoch": epoch, "step": step, "lr": lr,
                              "loss": loss_val, "post_clip_norm": post_norm})
            epoch_loss += loss_val * len(batch)
            step += 1
        epoch_loss /= len(train_ids)

        if metric_fn is not None:
            metric = float(metric_fn(params))
        else:
            metric = mean_annotator_accuracy(params, model_cfg, features,
                                             val_matrix)
        history.epochs.append({"epoch": epoch, "train_loss": epoch_loss,
                               "val_metric": metric, "lr": epoch_lr})
        if metric > history.best_val_metric:
            history.best_val_metric = metric
            history.best_epoch = epoch
            best_arrays = params.copy_arrays()
            bad_epochs = 0
        else:
            bad_epochs += 1
        history.stopped_epoch = epoch
        if bad_epochs >= cfg.patience:
            break

    best = ModelParams(model_cfg, {
        name: Tensor(best_arrays[name], requires_grad=True)
        for name, _ in params.named()
    })
    return best, history


def _train_step(params, model_cfg, features, matrix, batch, state, lr, cfg):
    targets = _batch_targets(matrix, batch, model_cfg)
    nk.reset_grads(params.tensors())
    with Tape() as tape:
        if model_cfg.mode == "sequence":
            losses = []
            for i, sid in enumerate(batch):
                logits, _ = forward_sequence(Tensor(features[sid]), params,
                                             model_cfg, capture_attention=False)
                losses.append(nk.masked_cross_entropy(logits, targets[i]))
            loss = losses[0]
            for extra in losses[1:]:
                loss = nk.add(loss, extra)
            loss = nk.scale(loss, 1.0 / len(batch))
        else:
            stacked = Tensor(np.stack([features[s] for s in batch]))
            logits = forward_image_batch(stacked, params, model_cfg)
            loss = nk.scale(nk.masked_cross_entropy(logits, targets),
                            1.0 / len(batch))
    nk.backward(tape, loss)
    clip_gradients(params, cfg.clip_max_norm)
    adamw_step(params, state, lr, cfg)
    return loss.item()
