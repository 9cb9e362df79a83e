"""Array-packed dataset views for batched training.

Subjects are grouped into buckets of identical token layout (frame count,
expression presence) so a whole bucket slice runs through the batched
forward functions with no padding. Within the synthetic roster every
dataset is a single bucket; the grouping still handles mixed layouts (e.g.
datasets with dropped expressions).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import Dataset


@dataclass
class Bucket:
    """Uniform-layout slice of a dataset, packed as arrays."""

    n_frames: int
    has_expression: bool
    uids: np.ndarray  # (n,) original subject indices
    frames: np.ndarray  # (n, n_frames, H, W) float32
    timestamps: np.ndarray  # (n, n_frames) float64
    expressions: np.ndarray | None  # (n, m) float32, or None
    labels: np.ndarray  # (n,) int64; -1 where unlabeled

    def __len__(self) -> int:
        return len(self.uids)

    @property
    def n_tokens(self) -> int:
        return self.n_frames + (1 if self.has_expression else 0)

    def select(self, rows: np.ndarray) -> "Bucket":
        return Bucket(
            n_frames=self.n_frames,
            has_expression=self.has_expression,
            uids=self.uids[rows],
            frames=self.frames[rows],
            timestamps=self.timestamps[rows],
            expressions=None if self.expressions is None else self.expressions[rows],
            labels=self.labels[rows],
        )


def pack_dataset(dataset: Dataset) -> list[Bucket]:
    """Bucket a dataset by token layout; bucket order is deterministic."""
    groups: dict[tuple[int, bool], list[int]] = {}
    for i, s in enumerate(dataset.subjects):
        key = (len(s.frames), s.expression is not None)
        groups.setdefault(key, []).append(i)
    buckets = []
    for key in sorted(groups):
        idxs = groups[key]
        n_frames, has_expr = key
        subs = [dataset.subjects[i] for i in idxs]
        buckets.append(
            Bucket(
                n_frames=n_frames,
                has_expression=has_expr,
                uids=np.array(idxs, dtype=np.int64),
                frames=np.stack([np.stack(s.frames) for s in subs]).astype(np.float32),
                timestamps=np.stack([np.asarray(s.timestamps, dtype=np.float64) for s in subs]),
                expressions=np.stack([np.asarray(s.expression, dtype=np.float32) for s in subs]) if has_expr else None,
                labels=np.array([s.label for s in subs], dtype=np.int64),
            )
        )
    return buckets


def split_rows(bucket: Bucket, batch: np.ndarray) -> Bucket:
    return bucket.select(batch)


def iter_batches(buckets: list[Bucket], batch_size: int, rng: np.random.Generator | None):
    """Yield per-epoch batches as (bucket, row-index array) pairs.

    Rows shuffle within each bucket when an rng is given; bucket order is
    fixed. The last batch of a bucket may be short.
    """
    for bucket in buckets:
        n = len(bucket)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, batch_size):
            yield bucket, order[start : start + batch_size]


def stratified_split(labels: np.ndarray, holdout_frac: float, rng: np.random.Generator):
    """(train_rows, val_rows) with per-class proportional holdout.

    Returns an empty validation set when either class cannot spare a
    subject, so callers can fall back to no model selection.
    """
    labels = np.asarray(labels)
    val_rows = []
    for cls in (0, 1):
        rows = np.nonzero(labels == cls)[0]
        k = int(round(holdout_frac * len(rows)))
        if k == 0 or k == len(rows):
            continue
        val_rows.append(rng.permutation(rows)[:k])
    if len(val_rows) < 2:
        return np.arange(len(labels)), np.array([], dtype=np.int64)
    val = np.sort(np.concatenate(val_rows))
    mask = np.ones(len(labels), dtype=bool)
    mask[val] = False
    return np.nonzero(mask)[0], val
