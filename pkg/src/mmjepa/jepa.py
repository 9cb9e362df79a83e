"""Masked latent-prediction pretraining with an EMA target encoder.

Each step: a batch of subjects is tokenized; a random 15% of every
subject's tokens (at least one, never all) is hidden from the context
encoder; the target encoder, a stop-gradient twin whose weights track the
context encoder by exponential moving average, sees the full sequence; the
predictor reconstructs the target representations at the hidden positions;
the loss is the mean squared error in representation space. Only the
context encoder, projections, and predictor receive gradients; the target
moves only through the EMA update.

All randomness derives from (seed, step, subject-id) streams, so training
replays bit-identically and a checkpoint restart continues the same
trajectory. The per-step log carries the collapse monitor rep_std (mean
per-dimension standard deviation of target representations).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .batching import Bucket, iter_batches, pack_dataset
from .checkpoint import load_checkpoint, save_checkpoint
from .cohort import Dataset
from .model import (
    EXPRESSION,
    IMAGE,
    Model,
    ModelConfig,
    encoder_forward,
    mask_queries,
    predictor_forward,
    tokenize_batch,
    wrap_arrays,
)
from .optim import AdamConfig, CosineSchedule, adam_step
from .tensor import Tensor, global_norm, zero_grads

_SHUFFLE_DOMAIN = 1
_MASK_DOMAIN = 2

COLLAPSE_STD_THRESHOLD = 1e-3


@dataclass
class JepaConfig:
    mask_ratio: float = 0.15
    ema_momentum: float = 0.996
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    batch_size: int = 256
    total_steps: int = 2000
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.mask_ratio < 1):
            raise ValueError("mask_ratio must lie in (0, 1)")
        if not (0 <= self.ema_momentum < 1):
            raise ValueError("ema_momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class LogRow:
    step: int
    loss: float
    lr: float
    rep_std: float
    grad_norm: float


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)
    skipped_subjects: int = 0

    def append(self, row: LogRow) -> None:
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,loss,lr,rep_std,grad_norm\n")
        for r in self.rows:
            buf.write(f"{r.step},{r.loss!r},{r.lr!r},{r.rep_std!r},{r.grad_norm!r}\n")
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "TrainLog":
        log = TrainLog()
        lines = text.strip().splitlines()
        for line in lines[1:]:
            step, loss, lr, rep_std, grad_norm = line.split(",")
            log.append(LogRow(int(step), float(loss), float(lr), float(rep_std), float(grad_norm)))
        return log


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

def mask_token_count(n_tokens: int, mask_ratio: float) -> int:
    """k = clamp(round(ratio * n), 1, n - 1), rounding half away from zero."""
    if n_tokens < 2:
        raise ValueError("cannot mask a sequence with fewer than 2 tokens")
    k = int(np.floor(mask_ratio * n_tokens + 0.5))
    return max(1, min(k, n_tokens - 1))


def mask_tokens(n_tokens: int, mask_ratio: float, rng: np.random.Generator):
    """Uniform non-contiguous mask: (context_indices, masked_indices), sorted."""
    k = mask_token_count(n_tokens, mask_ratio)
    masked = np.sort(rng.choice(n_tokens, size=k, replace=False))
    keep = np.setdiff1d(np.arange(n_tokens), masked, assume_unique=True)
    return keep, masked


def _mask_rng(seed: int, step: int, uid: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_MASK_DOMAIN, step, int(uid))))


def batch_masks(uids: np.ndarray, n_tokens: int, mask_ratio: float, seed: int, step: int):
    """Per-subject masks keyed by subject id: order-independent by construction."""
    k = mask_token_count(n_tokens, mask_ratio)
    keep = np.empty((len(uids), n_tokens - k), dtype=np.int64)
    masked = np.empty((len(uids), k), dtype=np.int64)
    for i, uid in enumerate(uids):
        kp, mk = mask_tokens(n_tokens, mask_ratio, _mask_rng(seed, step, uid))
        keep[i] = kp
        masked[i] = mk
    return keep, masked


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

def ema_update(target_weights: dict[str, np.ndarray], context: Mapping, momentum: float) -> None:
    """theta_t <- momentum * theta_t + (1 - momentum) * theta_c, in place."""
    context_arrays = {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in context.items()}
    missing = set(target_weights) - set(context_arrays)
    if missing:
        raise KeyError(f"context weights missing {sorted(missing)[:3]}")
    for name, tgt in target_weights.items():
        src = context_arrays[name]
        if src.shape != tgt.shape:
            raise ValueError(f"EMA shape mismatch for {name}: {tgt.shape} vs {src.shape}")
        tgt *= momentum
        tgt += (1.0 - momentum) * src


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

def _token_layout(bucket: Bucket) -> tuple[np.ndarray, np.ndarray]:
    """(timestamps, modalities) per token position for a bucket, shape (B, L)."""
    b = len(bucket)
    ts = bucket.timestamps
    mods = np.zeros((b, bucket.n_frames), dtype=np.int64)
    if bucket.has_expression:
        ts = np.concatenate([ts, np.zeros((b, 1))], axis=1)
        mods = np.concatenate([mods, np.full((b, 1), EXPRESSION, dtype=np.int64)], axis=1)
    return ts, mods


def jepa_step(
    model: Model,
    target_weights: dict[str, np.ndarray],
    batch: list[tuple[Bucket, np.ndarray]],
    config: JepaConfig,
    step: int,
    lr: float,
    adam_cfg: AdamConfig = AdamConfig(),
) -> LogRow:
    """One pretraining update over a (possibly multi-bucket) batch.

    Returns the log row; model parameters and target weights update in
    place. The logged loss is computed from the sorted per-subject losses,
    making it independent of subject order within the batch.
    """
    cfg = model.config
    trainable = model.encoder_parameters() + model.predictor_parameters()
    zero_grads(trainable)
    target_tensors = wrap_arrays(target_weights)

    per_subject_losses = []
    target_rep_blocks = []
    total_subjects = 0
    for bucket, rows in batch:
        sub = bucket.select(rows)
        if sub.n_tokens < 2:
            raise ValueError("pretraining batch contains single-token subjects; filter them first")
        total_subjects += len(sub)
        tokens = tokenize_batch(model.params, cfg, sub.frames, sub.timestamps, sub.expressions, dtype=model.dtype)
        with T.no_grad():
            tgt_tokens = tokenize_batch(target_tensors, cfg, sub.frames, sub.timestamps, sub.expressions, dtype=model.dtype)
            tgt_reps = encoder_forward(target_tensors, cfg, tgt_tokens)
        target_rep_blocks.append(tgt_reps.data.reshape(-1, cfg.d_model))

        keep, masked = batch_masks(sub.uids, sub.n_tokens, config.mask_ratio, config.seed, step)
        ctx_tokens = T.gather_rows(tokens, keep)
        ctx_reps = encoder_forward(model.params, cfg, ctx_tokens)

        ts, mods = _token_layout(sub)
        q_ts = np.take_along_axis(ts, masked, axis=1)
        q_mods = np.take_along_axis(mods, masked, axis=1)
        queries = mask_queries(model.params, cfg, q_ts, q_mods, dtype=model.dtype)
        preds = predictor_forward(model.params, cfg, ctx_reps, queries)

        tgt_at_masked = np.take_along_axis(tgt_reps.data, masked[:, :, None], axis=1)
        diff = T.sub(preds, Tensor(tgt_at_masked))
        sq = T.mul(diff, diff)
        per_subject_losses.append(T.mean(sq, axis=(1, 2)))  # (B,)

    all_losses = per_subject_losses[0] if len(per_subject_losses) == 1 else T.concat(per_subject_losses)
    order = np.argsort(all_losses.data, kind="stable")
    loss = T.mean(T.take1d(all_losses, order))

    if not np.isfinite(loss.data):
        worst = int(np.argmax(~np.isfinite(all_losses.data)))
        raise FloatingPointError(f"non-finite pretraining loss at step {step}, batch position {worst}")

    T.backward(loss)
    gnorm = global_norm(trainable)
    adam_step(trainable, lr, adam_cfg)
    ema_update(target_weights, model.params, config.ema_momentum)

    reps = np.concatenate(target_rep_blocks, axis=0)
    rep_std = float(reps.std(axis=0).mean())
    return LogRow(step=step, loss=float(loss.data), lr=lr, rep_std=rep_std, grad_norm=gnorm)


# ---------------------------------------------------------------------------
# full loop
# ---------------------------------------------------------------------------

def _shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SHUFFLE_DOMAIN, epoch)))


def pretrain(
    dataset_u: Dataset,
    model: Model,
    config: JepaConfig,
    out_dir=None,
    step_hook: Callable | None = None,
    start_step: int = 0,
    target_weights: dict[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], TrainLog]:
    """Run total_steps of masked latent prediction over shuffled batches.

    Returns (target_weights, log); checkpoints land in out_dir (if given)
    every checkpoint_every steps and at the end. Restarting from a
    checkpoint with the same config reproduces the uninterrupted run bit
    for bit, because every random draw is keyed by (seed, epoch) or
    (seed, step, subject) rather than by generator state.
    """
    buckets = pack_dataset(dataset_u)
    usable = [b for b in buckets if b.n_tokens >= 2]
    skipped = sum(len(b) for b in buckets if b.n_tokens < 2)
    if not usable:
        raise ValueError("no subjects with >= 2 tokens; nothing to pretrain on")

    if target_weights is None:
        target_weights = model.target_copy()
    schedule = CosineSchedule(config.lr_max, config.lr_min, config.total_steps)
    log = TrainLog(skipped_subjects=skipped)

    step = start_step
    epoch = 0
    steps_per_epoch = sum(int(np.ceil(len(b) / config.batch_size)) for b in usable)
    if start_step:
        epoch = start_step // steps_per_epoch
    while step < config.total_steps:
        rng = _shuffle_rng(config.seed, epoch)
        batch_iter = list(iter_batches(usable, config.batch_size, rng))
        for i, (bucket, rows) in enumerate(batch_iter):
            if step >= config.total_steps:
                break
            if start_step and epoch * steps_per_epoch + i < start_step:
                continue  # replay position within the resumed epoch
            lr = schedule.lr_at(step)
            row = jepa_step(model, target_weights, [(bucket, rows)], config, step, lr)
            log.append(row)
            step += 1
            if step_hook is not None:
                step_hook(step, model, target_weights, row)
            if out_dir is not None and (step % config.checkpoint_every == 0 or step == config.total_steps):
                save_pretrain_checkpoint(out_dir, model, target_weights, config, step)
        epoch += 1

    if out_dir is not None:
        from pathlib import Path

        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "train_log.csv").write_text(log.to_csv())
    return target_weights, log


def save_pretrain_checkpoint(out_dir, model: Model, target_weights, config: JepaConfig, step: int) -> str:
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    step_counts = {}
    for name, p in model.params.items():
        arrays[f"param/{name}"] = p.data
        arrays[f"adam_m/{name}"] = p.adam_m
        arrays[f"adam_v/{name}"] = p.adam_v
        step_counts[name] = p.step_count
    for name, arr in target_weights.items():
        arrays[f"target/{name}"] = arr
    meta = {
        "kind": "jepa_pretrain",
        "step": step,
        "config": config.to_dict(),
        "model_config": model.config.to_dict(),
        "step_counts": step_counts,
    }
    path = out_dir / f"checkpoint_{step:07d}.mjpk"
    save_checkpoint(path, arrays, meta)
    return str(path)


def load_pretrain_checkpoint(path, dtype=np.float32) -> tuple[Model, dict[str, np.ndarray], JepaConfig, int]:
    arrays, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = Model(cfg, seed=0, dtype=dtype)
    for name, p in model.params.items():
        p.data[...] = arrays[f"param/{name}"]
        p.adam_m[...] = arrays[f"adam_m/{name}"]
        p.adam_v[...] = arrays[f"adam_v/{name}"]
        p.step_count = meta["step_counts"][name]
    target = {name: arrays[f"target/{name}"].copy() for name in model.encoder_param_names()}
    jcfg = JepaConfig(**meta["config"])
    return model, target, jcfg, meta["step"]


# ---------------------------------------------------------------------------
# collapse diagnostics
# ---------------------------------------------------------------------------

def target_representations(
    target_weights: dict[str, np.ndarray], cfg: ModelConfig, batch: list[tuple[Bucket, np.ndarray]], dtype=np.float32
) -> np.ndarray:
    """Token-level target-encoder representations of a sample batch, stacked."""
    tensors = wrap_arrays(target_weights)
    blocks = []
    with T.no_grad():
        for bucket, rows in batch:
            sub = bucket.select(rows)
            toks = tokenize_batch(tensors, cfg, sub.frames, sub.timestamps, sub.expressions, dtype=dtype)
            reps = encoder_forward(tensors, cfg, toks)
            blocks.append(reps.data.reshape(-1, cfg.d_model))
    return np.concatenate(blocks, axis=0)


def collapse_metrics(representations: np.ndarray, tau: float = COLLAPSE_STD_THRESHOLD) -> dict:
    """rep_std, SVD rank proxy, and a COLLAPSED/OK verdict for a rep matrix."""
    reps = np.asarray(representations, dtype=np.float64)
    rep_std = float(reps.std(axis=0).mean())
    sv = np.linalg.svd(reps - reps.mean(axis=0), compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        rank_proxy = 0
    else:
        rank_proxy = int((sv > 0.01 * sv[0]).sum())
    return {
        "rep_std": rep_std,
        "rep_rank_proxy": rank_proxy,
        "verdict": "COLLAPSED" if rep_std < tau else "OK",
        "tau": tau,
    }


def collapse_report(
    target_weights: dict[str, np.ndarray],
    cfg: ModelConfig,
    batch: list[tuple[Bucket, np.ndarray]],
    tau: float = COLLAPSE_STD_THRESHOLD,
) -> dict:
    reps = target_representations(target_weights, cfg, batch)
    return collapse_metrics(reps, tau)
