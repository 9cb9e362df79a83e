"""Tie-aware ROC analysis, analytic oracles, and paired comparisons.

AUC here is the probability that a random positive outscores a random
negative, counting ties as one half. The implementation ranks scores with
average ranks; because doubled average ranks are integers, the numerator is
computed in exact integer arithmetic and the single final division makes the
result bit-identical to the brute-force pairwise definition (and makes
auc(s) + auc(-s) == 1 exactly for every denominator reachable in practice).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import spearmanr

from .cohort import CausalProfile


class EvalError(ValueError):
    pass


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise EvalError(
                f"scores and labels must be equal-length vectors, got {self.scores.shape} vs {self.labels.shape}"
            )
        if not np.isin(self.labels, (0, 1)).all():
            raise EvalError("labels must be 0 or 1")


def _doubled_rank_sum_positives(scores: np.ndarray, labels: np.ndarray) -> int:
    """Sum over positives of (2 * average rank), an exact integer."""
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = labels[order] == 1
    # tie-group boundaries
    boundaries = np.nonzero(np.diff(sorted_scores))[0] + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(scores)]))
    total = 0
    for a, b in zip(starts, ends):
        # doubled average rank of a tie group occupying sorted slots a..b-1
        doubled = int(a) + int(b) + 1
        total += doubled * int(sorted_pos[a:b].sum())
    return total


def auc(scored: ScoredSet) -> float:
    """Tie-aware AUC, exactly equal to the pairwise definition."""
    labels = scored.labels
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvalError(f"AUC needs both classes, got {n_pos} positives / {n_neg} negatives")
    r2 = _doubled_rank_sum_positives(scored.scores, labels)
    numerator = r2 - n_pos * (n_pos + 1)  # = 2*wins + ties, integer
    return numerator / (2 * n_pos * n_neg)


def auc_fraction(scored: ScoredSet) -> Fraction:
    """Same statistic as an exact rational."""
    labels = scored.labels
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvalError(f"AUC needs both classes, got {n_pos} positives / {n_neg} negatives")
    r2 = _doubled_rank_sum_positives(scored.scores, labels)
    return Fraction(r2 - n_pos * (n_pos + 1), 2 * n_pos * n_neg)


def all_profiles() -> list[CausalProfile]:
    return [CausalProfile((i >> 3) & 1, (i >> 2) & 1, (i >> 1) & 1, i & 1) for i in range(16)]


def expected_auc(score_fn: Callable[[CausalProfile], float], label_rule: Callable[[CausalProfile], int]) -> Fraction:
    """Exact tie-aware AUC of a scorer over the 16 equiprobable profiles."""
    profiles = all_profiles()
    pos = [p for p in profiles if label_rule(p) == 1]
    neg = [p for p in profiles if label_rule(p) == 0]
    if not pos:
        raise EvalError("label rule yields no positive profiles")
    if not neg:
        raise EvalError("label rule yields no negative profiles")
    wins = ties = 0
    for p in pos:
        sp = score_fn(p)
        for q in neg:
            sq = score_fn(q)
            if sp > sq:
                wins += 1
            elif sp == sq:
                ties += 1
    return Fraction(2 * wins + ties, 2 * len(pos) * len(neg))


def idealized_incomplete_scorer(profile: CausalProfile) -> float:
    """Best scorer learnable from the incomplete regime: 1 iff g1 and d1."""
    return 1.0 if (profile.g1 == 1 and profile.d1 == 1) else 0.0


OUTCOME_NAMES = ("TP", "FP", "TN", "FN")


@dataclass
class OutcomeTable:
    assignments: dict  # profile tuple -> outcome name
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.counts:
            self.counts = {k: 0 for k in OUTCOME_NAMES}
            for outcome in self.assignments.values():
                self.counts[outcome] += 1

    def profiles_with(self, outcome: str) -> list[tuple]:
        return sorted(k for k, v in self.assignments.items() if v == outcome)


def classify_outcomes(
    profiles: Iterable[CausalProfile],
    score_fn: Callable[[CausalProfile], float],
    label_rule: Callable[[CausalProfile], int],
    threshold: float = 0.5,
) -> OutcomeTable:
    assignments = {}
    for p in profiles:
        truth = label_rule(p)
        pred = 1 if score_fn(p) > threshold else 0
        if pred == 1:
            outcome = "TP" if truth == 1 else "FP"
        else:
            outcome = "FN" if truth == 1 else "TN"
        assignments[p.as_tuple()] = outcome
    return OutcomeTable(assignments)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

@dataclass
class WilcoxonResult:
    w: float | None
    p_two_sided: float
    n_effective: int
    method: str  # "exact", "normal", or "degenerate"

    @property
    def w_defined(self) -> bool:
        return self.w is not None


EXACT_LIMIT = 25


def wilcoxon_signed_rank(pairs: Sequence[tuple[float, float]]) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired values.

    Zero differences are dropped. |differences| are ranked with average
    ranks; W = min(W+, W-). Exact p for n_effective <= 25 by enumerating the
    sign-assignment distribution (computed by dynamic programming over
    doubled ranks, identical to the full 2^n enumeration); beyond that, a
    normal approximation with tie-aware variance sum(r_i^2)/4 and a 0.5
    continuity correction.
    """
    pairs = list(pairs)
    if not pairs:
        raise EvalError("wilcoxon_signed_rank needs at least one pair")
    diffs = np.array([float(a) - float(b) for a, b in pairs])
    diffs = diffs[diffs != 0.0]
    n = len(diffs)
    if n == 0:
        return WilcoxonResult(w=None, p_two_sided=1.0, n_effective=0, method="degenerate")

    mags = np.abs(diffs)
    order = np.argsort(mags, kind="stable")
    sorted_mags = mags[order]
    boundaries = np.nonzero(np.diff(sorted_mags))[0] + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [n]))
    doubled_ranks = np.empty(n, dtype=np.int64)
    for a, b in zip(starts, ends):
        doubled_ranks[order[a:b]] = int(a) + int(b) + 1  # 2 * average rank

    w2_plus = int(doubled_ranks[diffs > 0].sum())
    w2_minus = int(doubled_ranks[diffs < 0].sum())
    w2 = min(w2_plus, w2_minus)
    w_stat = w2 / 2.0

    if n <= EXACT_LIMIT:
        total = int(doubled_ranks.sum())
        counts = np.zeros(total + 1, dtype=np.float64)
        counts[0] = 1.0
        for dr in doubled_ranks:
            counts[dr:] += counts[: total + 1 - dr].copy()
        p_le = counts[: w2 + 1].sum() / (2.0**n)
        p = min(1.0, 2.0 * p_le)
        return WilcoxonResult(w=w_stat, p_two_sided=p, n_effective=n, method="exact")

    mu = doubled_ranks.sum() / 4.0  # = n(n+1)/4 when untied
    var = float(np.sum((doubled_ranks / 2.0) ** 2)) / 4.0
    sigma = math.sqrt(var)
    z = (w_stat - mu + 0.5) / sigma
    p = min(1.0, 2.0 * float(ndtr(z)))
    return WilcoxonResult(w=w_stat, p_two_sided=p, n_effective=n, method="normal")


# ---------------------------------------------------------------------------
# finetune-size sweep comparison
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    strategy: str
    f_size: int
    seed: int
    auc: float


@dataclass
class EvalReport:
    rows: list[SweepRow]
    wilcoxon: WilcoxonResult | None
    spearman_by_strategy: dict
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "rows": [vars(r) for r in self.rows],
            "wilcoxon": None
            if self.wilcoxon is None
            else {
                "w": self.wilcoxon.w,
                "p_two_sided": self.wilcoxon.p_two_sided,
                "n_effective": self.wilcoxon.n_effective,
                "method": self.wilcoxon.method,
            },
            "spearman_by_strategy": self.spearman_by_strategy,
            "meta": self.meta,
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["strategy,f_size,seed,auc"]
        for r in self.rows:
            lines.append(f"{r.strategy},{r.f_size},{r.seed},{r.auc:.6f}")
        return "\n".join(lines) + "\n"


def sweep_compare(
    train_and_score: Callable[[str, int, int], float],
    strategy_a: str,
    strategy_b: str,
    f_sizes: Sequence[int],
    seeds: Sequence[int],
    meta: dict | None = None,
) -> EvalReport:
    """Paired comparison of two training strategies across finetune sizes.

    `train_and_score(strategy, f_size, seed)` must return the test AUC for
    one run; pairing is by (f_size, seed). The report carries every row, the
    Wilcoxon two-sided p over paired AUC differences, and each strategy's
    Spearman correlation between f_size and AUC (positive = the curve rises
    with more labeled data).
    """
    if not f_sizes:
        raise EvalError("f_sizes must be non-empty")
    rows: list[SweepRow] = []
    pairs = []
    for f_size in f_sizes:
        for seed in seeds:
            a = float(train_and_score(strategy_a, f_size, seed))
            b = float(train_and_score(strategy_b, f_size, seed))
            rows.append(SweepRow(strategy_a, f_size, seed, a))
            rows.append(SweepRow(strategy_b, f_size, seed, b))
            pairs.append((a, b))
    wil = wilcoxon_signed_rank(pairs)
    spearman = {}
    for strat in (strategy_a, strategy_b):
        pts = [(r.f_size, r.auc) for r in rows if r.strategy == strat]
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        rho = spearmanr(xs, ys).statistic if len(set(ys)) > 1 else 0.0
        spearman[strat] = float(rho)
    return EvalReport(rows=rows, wilcoxon=wil, spearman_by_strategy=spearman, meta=meta or {})
