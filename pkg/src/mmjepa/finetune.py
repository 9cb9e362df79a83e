"""Supervised training and finetuning strategies.

Five strategies produce subject scores from the same architecture:

- SUPERVISED_F_ONLY: random init, trained on the complete labeled set F.
- SUPERVISED_S_THEN_F: first trained on the incomplete set S, then the
  encoder continues on F with a freshly initialized classifier head.
- JEPA_U_THEN_F: encoder initialized from a pretraining checkpoint's
  context encoder, fresh head, trained on F.
- IMAGING_ONLY / EXPRESSION_ONLY: supervised on one modality's tokens.

Training is binary cross-entropy on the classifier logit with Adam and a
cosine schedule; the encoder and the head may use different learning rates
(encoder_lr=0 freezes the encoder exactly). A stratified 10% validation
split selects the best checkpoint by AUC when both classes are present;
otherwise the final weights stand.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import tensor as T
from .batching import Bucket, iter_batches, pack_dataset, stratified_split
from .cohort import Dataset, Subject
from .evaluation import ScoredSet, auc
from .model import Model, ModelConfig, classify_batch, encoder_forward, tokenize_batch
from .optim import AdamConfig, CosineSchedule, adam_step
from .tensor import Tensor, zero_grads

_VAL_DOMAIN = 3
_SHUFFLE_DOMAIN = 4

SUPERVISED_S_THEN_F = "SUPERVISED_S_THEN_F"
JEPA_U_THEN_F = "JEPA_U_THEN_F"
SUPERVISED_F_ONLY = "SUPERVISED_F_ONLY"
IMAGING_ONLY = "IMAGING_ONLY"
EXPRESSION_ONLY = "EXPRESSION_ONLY"
STRATEGY_KINDS = (SUPERVISED_S_THEN_F, JEPA_U_THEN_F, SUPERVISED_F_ONLY, IMAGING_ONLY, EXPRESSION_ONLY)

_FILTERS = {IMAGING_ONLY: "imaging", EXPRESSION_ONLY: "expression"}


@dataclass(frozen=True)
class Strategy:
    kind: str
    f_size: int
    init_checkpoint: str | None = None
    encoder_lr: float = 1e-3
    head_lr: float = 1e-3

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.kind == JEPA_U_THEN_F and self.init_checkpoint is None:
            raise ValueError("JEPA_U_THEN_F requires init_checkpoint")

    @property
    def modality_filter(self) -> str | None:
        return _FILTERS.get(self.kind)


@dataclass
class SupLogRow:
    step: int
    loss: float
    encoder_lr: float
    head_lr: float


@dataclass
class FitResult:
    weights: dict  # name -> ndarray (full model state)
    train_log: list[SupLogRow]
    f_size: int
    strategy: str
    seed: int
    best_val_auc: float | None = None
    selected_step: int | None = None

    def log_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,loss,encoder_lr,head_lr\n")
        for r in self.train_log:
            buf.write(f"{r.step},{r.loss!r},{r.encoder_lr!r},{r.head_lr!r}\n")
        return buf.getvalue()


class UnlabeledDatasetError(ValueError):
    pass


def _filtered_views(bucket: Bucket, modality_filter: str | None):
    """(frames, timestamps, expressions) with a modality optionally dropped."""
    frames, ts, exprs = bucket.frames, bucket.timestamps, bucket.expressions
    if modality_filter == "imaging":
        exprs = None
    elif modality_filter == "expression":
        if exprs is None:
            raise ValueError("expression-only training needs expression vectors")
        frames, ts = None, None
    return frames, ts, exprs


def _forward_logits(weights: Mapping, cfg: ModelConfig, bucket: Bucket, rows: np.ndarray, modality_filter, dtype):
    sub = bucket.select(rows)
    frames, ts, exprs = _filtered_views(sub, modality_filter)
    tokens = tokenize_batch(weights, cfg, frames, ts, exprs, dtype=dtype)
    reps = encoder_forward(weights, cfg, tokens)
    return classify_batch(weights, reps), sub.labels


def score_buckets(model: Model, buckets: list[Bucket], modality_filter=None, batch_size: int = 512) -> ScoredSet:
    """Sigmoid scores for every subject, in uid order within each bucket."""
    scores = []
    labels = []
    with T.no_grad():
        for bucket in buckets:
            for start in range(0, len(bucket), batch_size):
                rows = np.arange(start, min(start + batch_size, len(bucket)))
                logits, labs = _forward_logits(model.params, model.config, bucket, rows, modality_filter, model.dtype)
                scores.append(1.0 / (1.0 + np.exp(-logits.data.astype(np.float64))))
                labels.append(labs)
    return ScoredSet(np.concatenate(scores), np.concatenate(labels))


def score_dataset(model: Model, dataset: Dataset, modality_filter=None) -> ScoredSet:
    if not dataset.spec.labeled:
        raise UnlabeledDatasetError(f"dataset {dataset.spec.name} is unlabeled")
    return score_buckets(model, pack_dataset(dataset), modality_filter)


def predict(model: Model, subject: Subject, modality_filter: str | None = None) -> tuple[float, bool]:
    """Score one subject; returns (score, fallback_used).

    EXPRESSION_ONLY on a subject with no expression cannot run the model;
    the defined fallback is 0.5 with the flag set.
    """
    if modality_filter == "expression" and subject.expression is None:
        return 0.5, True
    frames = np.stack(subject.frames)[None].astype(np.float32)
    ts = np.asarray(subject.timestamps, dtype=np.float64)[None]
    exprs = None if subject.expression is None else np.asarray(subject.expression, dtype=np.float32)[None]
    if modality_filter == "imaging":
        exprs = None
    elif modality_filter == "expression":
        frames, ts = None, None
    with T.no_grad():
        tokens = tokenize_batch(model.params, model.config, frames, ts, exprs, dtype=model.dtype)
        reps = encoder_forward(model.params, model.config, tokens)
        logit = classify_batch(model.params, reps)
    return float(1.0 / (1.0 + np.exp(-float(logit.data[0])))), False


@dataclass
class SupervisedConfig:
    total_steps: int = 600
    batch_size: int = 128
    encoder_lr: float = 1e-3
    head_lr: float = 1e-3
    lr_min_frac: float = 0.01  # lr_min = frac * lr_max per group
    eval_every: int = 50
    val_frac: float = 0.1
    seed: int = 0
    modality_filter: str | None = None


def supervised_train(dataset: Dataset, model: Model, cfg: SupervisedConfig) -> FitResult:
    """BCE training of encoder + classifier on a labeled dataset.

    The model trains in place; the returned FitResult carries the selected
    weights (best validation AUC when a stratified split is possible,
    otherwise the final step) and the model is left at those weights.
    """
    if not dataset.spec.labeled:
        raise UnlabeledDatasetError(f"dataset {dataset.spec.name} is unlabeled; supervised training needs labels")
    buckets = pack_dataset(dataset)

    all_labels = np.concatenate([b.labels for b in buckets])
    val_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(_VAL_DOMAIN,)))
    # split per bucket against the global stratification
    train_buckets: list[Bucket] = []
    val_buckets: list[Bucket] = []
    offset = 0
    global_train, global_val = stratified_split(all_labels, cfg.val_frac, val_rng)
    val_set = set(global_val.tolist())
    for b in buckets:
        local = np.arange(len(b))
        in_val = np.array([offset + i in val_set for i in local], dtype=bool)
        offset += len(b)
        if in_val.any():
            val_buckets.append(b.select(np.nonzero(in_val)[0]))
        keep = np.nonzero(~in_val)[0]
        if keep.size:
            train_buckets.append(b.select(keep))

    enc_params = model.encoder_parameters()
    head_params = model.classifier_parameters()
    enc_sched = CosineSchedule(cfg.encoder_lr, cfg.encoder_lr * cfg.lr_min_frac, cfg.total_steps) if cfg.encoder_lr > 0 else None
    head_sched = CosineSchedule(cfg.head_lr, cfg.head_lr * cfg.lr_min_frac, cfg.total_steps)
    adam_cfg = AdamConfig()

    log: list[SupLogRow] = []
    best: tuple[float, int, dict] | None = None
    step = 0
    epoch = 0
    while step < cfg.total_steps:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(_SHUFFLE_DOMAIN, epoch)))
        for bucket, rows in iter_batches(train_buckets, cfg.batch_size, rng):
            if step >= cfg.total_steps:
                break
            trainables = (enc_params if cfg.encoder_lr > 0 else []) + head_params
            zero_grads(enc_params + head_params)
            logits, labels = _forward_logits(model.params, model.config, bucket, rows, cfg.modality_filter, model.dtype)
            loss = T.mean(T.bce_with_logits(logits, labels.astype(model.dtype)))
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite supervised loss at step {step}")
            T.backward(loss)
            lr_e = enc_sched.lr_at(step) if enc_sched else 0.0
            lr_h = head_sched.lr_at(step)
            if enc_sched:
                adam_step(enc_params, lr_e, adam_cfg)
            adam_step(head_params, lr_h, adam_cfg)
            log.append(SupLogRow(step=step, loss=float(loss.data), encoder_lr=lr_e, head_lr=lr_h))
            step += 1
            if val_buckets and (step % cfg.eval_every == 0 or step == cfg.total_steps):
                scored = score_buckets(model, val_buckets, cfg.modality_filter)
                if 0 < scored.labels.sum() < len(scored.labels):
                    val_auc = auc(scored)
                    if best is None or val_auc > best[0]:
                        best = (val_auc, step, model.state_arrays())
        epoch += 1

    if best is not None:
        model.load_state_arrays(best[2])
        return FitResult(
            weights=model.state_arrays(),
            train_log=log,
            f_size=len(dataset),
            strategy=cfg.modality_filter or "SUPERVISED",
            seed=cfg.seed,
            best_val_auc=best[0],
            selected_step=best[1],
        )
    return FitResult(
        weights=model.state_arrays(),
        train_log=log,
        f_size=len(dataset),
        strategy=cfg.modality_filter or "SUPERVISED",
        seed=cfg.seed,
    )


def finetune_from(
    init_arrays: Mapping[str, np.ndarray] | None,
    model_cfg: ModelConfig,
    dataset_f: Dataset,
    strategy: Strategy,
    sup_cfg: SupervisedConfig,
) -> tuple[Model, FitResult]:
    """Build a model per the strategy's init rule and train it on F.

    init_arrays carry a full model state (the S-trained weights, or a
    pretraining checkpoint's "param/"-stripped state). The encoder loads
    from them; the classifier head always starts fresh from the training
    seed. SUPERVISED_F_ONLY and the single-modality baselines ignore
    init_arrays and train from random weights.
    """
    model = Model(model_cfg, seed=sup_cfg.seed)
    if strategy.kind in (SUPERVISED_S_THEN_F, JEPA_U_THEN_F):
        if init_arrays is None:
            raise ValueError(f"{strategy.kind} needs initial encoder weights")
        encoder_names = set(model.encoder_param_names())
        missing = encoder_names - set(init_arrays)
        if missing:
            raise KeyError(f"init weights missing encoder parameters, e.g. {sorted(missing)[:3]}")
        model.load_state_arrays({k: v for k, v in init_arrays.items() if k in encoder_names}, strict=False)
    cfg = replace(
        sup_cfg,
        encoder_lr=strategy.encoder_lr,
        head_lr=strategy.head_lr,
        modality_filter=strategy.modality_filter,
    )
    result = supervised_train(dataset_f, model, cfg)
    result = FitResult(
        weights=result.weights,
        train_log=result.train_log,
        f_size=result.f_size,
        strategy=strategy.kind,
        seed=cfg.seed,
        best_val_auc=result.best_val_auc,
        selected_step=result.selected_step,
    )
    return model, result


def scores_csv(scored: ScoredSet, uids: np.ndarray, strategy: str, f_size: int, seed: int) -> str:
    lines = ["subject_id,label,score,strategy,f_size,seed"]
    for uid, lab, sc in zip(uids, scored.labels, scored.scores):
        lines.append(f"{uid},{lab},{sc:.8f},{strategy},{f_size},{seed}")
    return "\n".join(lines) + "\n"
