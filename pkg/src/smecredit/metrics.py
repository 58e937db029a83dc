"""Ranking metrics and bootstrap confidence intervals."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import rankdata


class UndefinedMetric(ValueError):
    pass


def _check(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in shape")
    return s, y.astype(bool)


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score+ > score-) + P(tie)/2 via rank sums."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both classes")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def aucpr(scores, labels) -> float:
    """Average precision; tied scores enter as one block.

    Sweeping thresholds from high to low, each block adds
    ``precision * (recall gain)`` at the block's end.
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetric("AUCPR needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    gain = np.diff(np.r_[0, tp])
    return float(np.sum(gain / n_pos * tp / seen))


def bootstrap_ci(metric: Callable, scores, labels, B: int = 1000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile interval over ``B`` resamples of the full sample size.

    Resamples with a single class are redrawn; if more than half of all
    draws are degenerate the sample is too small to bootstrap.
    """
    s, y = _check(scores, labels)
    n = len(s)
    rng = np.random.default_rng(seed)
    values = []
    degenerate = 0
    while len(values) < B:
        idx = rng.integers(0, n, n)
        yy = y[idx]
        if yy.all() or not yy.any():
            degenerate += 1
            if degenerate > B:
                raise UndefinedMetric(f"over half of bootstrap resamples hold one class (n={n}); "
                                      "use a larger sample")
            continue
        values.append(metric(s[idx], yy))
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


@dataclass
class EvalReport:
    auc: float
    aucpr: float
    auc_ci: tuple[float, float]
    aucpr_ci: tuple[float, float]
    n_test: int
    seed: int
    B: int
    scores: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @classmethod
    def compute(cls, scores, labels, B: int = 1000, seed: int = 0) -> "EvalReport":
        s, y = _check(scores, labels)
        return cls(auc(s, y), aucpr(s, y), bootstrap_ci(auc, s, y, B, seed=seed),
                   bootstrap_ci(aucpr, s, y, B, seed=seed), len(s), seed, B, s)

    def rows(self) -> list[tuple[str, float, float, float]]:
        return [("auc", self.auc, *self.auc_ci), ("aucpr", self.aucpr, *self.aucpr_ci)]

    def to_csv(self) -> str:
        lines = ["metric,point,ci_low,ci_high"]
        lines += [f"{m},{p:.6f},{lo:.6f},{hi:.6f}" for m, p, lo, hi in self.rows()]
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        lines = [f"n_test={self.n_test}  bootstrap B={self.B}  seed={self.seed}",
                 f"{'metric':<8}{'point':>10}{'95% CI':>22}"]
        for m, p, lo, hi in self.rows():
            lines.append(f"{m:<8}{p:>10.4f}    [{lo:.4f}, {hi:.4f}]")
        return "\n".join(lines) + "\n"
