"""ROC/AUC, DeLong variance and tests, and the Mann-Whitney-Wilcoxon test.

AUC uses the Mann-Whitney convention for ties (a tied positive/negative pair
counts 0.5), which is also what the DeLong placement values are built on.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.special import ndtri
from scipy.stats import norm, rankdata

TAILS = ("two", "greater", "less")


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class RocResult:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    variance: float | None
    ci95: tuple[float, float] | None
    n_pos: int
    n_neg: int
    clipped: bool = False

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "variance": self.variance,
            "ci95": list(self.ci95) if self.ci95 else None,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "ci_clipped": self.clipped,
        }


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    kind: str
    tail: str
    alternative: str
    n_pos: int | None = None
    n_neg: int | None = None
    estimate_a: float | None = None
    estimate_b: float | None = None
    flags: tuple[str, ...] = field(default_factory=tuple)

    __test__ = False  # not a pytest class

    @property
    def degenerate(self) -> bool:
        return "degenerate" in self.flags

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "tail": self.tail,
            "alternative": self.alternative,
            "statistic": self.statistic,
            "p": self.p_value,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "estimate_a": self.estimate_a,
            "estimate_b": self.estimate_b,
            "flags": list(self.flags),
        }


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise StatsError(f"scores {scores.shape} and labels {labels.shape} must be equal-length 1-D")
    if labels.dtype != bool:
        if not np.isin(labels, (0, 1)).all():
            raise StatsError("labels must be binary (0/1 or bool)")
        labels = labels.astype(bool)
    if not np.isfinite(scores).all():
        raise StatsError("scores must be finite")
    return scores[labels], scores[~labels]


def _check_tail(tail: str) -> str:
    if tail not in TAILS:
        raise StatsError(f"tail must be one of {TAILS}, got {tail!r}")
    return "two" if tail == "two" else "one"


def _placements(pos: np.ndarray, neg: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """AUC plus DeLong placement values via midranks (O(N log N))."""
    m, n = len(pos), len(neg)
    r_all = rankdata(np.concatenate([pos, neg]))
    r_pos = rankdata(pos)
    r_neg = rankdata(neg)
    auc = (r_all[:m].sum() - m * (m + 1) / 2.0) / (m * n)
    v10 = (r_all[:m] - r_pos) / n
    v01 = 1.0 - (r_all[m:] - r_neg) / m
    return float(auc), v10, v01


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    pos, neg = _split(scores, labels)
    if len(pos) == 0 or len(neg) == 0:
        raise StatsError("auc needs at least one positive and one negative")
    m, n = len(pos), len(neg)
    r_all = rankdata(np.concatenate([pos, neg]))
    return float((r_all[:m].sum() - m * (m + 1) / 2.0) / (m * n))


def delong_variance(scores, labels) -> tuple[float, float]:
    """DeLong estimate ``S10/m + S01/n`` (sample variances with n-1 denominators)."""
    pos, neg = _split(scores, labels)
    if len(pos) < 2 or len(neg) < 2:
        raise StatsError(f"DeLong needs >= 2 of each class (got {len(pos)} pos, {len(neg)} neg)")
    a, v10, v01 = _placements(pos, neg)
    var = v10.var(ddof=1) / len(pos) + v01.var(ddof=1) / len(neg)
    return a, float(max(var, 0.0))


def _ci(a: float, var: float, level: float) -> tuple[tuple[float, float], bool]:
    if not 0.0 < level < 1.0:
        raise StatsError(f"level must be in (0, 1), got {level}")
    z = float(ndtri(0.5 + level / 2.0))
    half = z * np.sqrt(var)
    lo, hi = a - half, a + half
    clipped = lo < 0.0 or hi > 1.0
    return (max(lo, 0.0), min(hi, 1.0)), clipped


def delong_ci(scores, labels, level: float = 0.95) -> tuple[float, float]:
    """``auc +/- z * sqrt(var)``, clipped to [0, 1]. See :func:`roc` for the clip flag."""
    a, var = delong_variance(scores, labels)
    return _ci(a, var, level)[0]


def roc_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Empirical ROC: one point per distinct threshold, from (0, 0) to (1, 1).

    Thresholds are returned in decreasing order, with ``+inf`` first.
    """
    pos, neg = _split(scores, labels)
    m, n = len(pos), len(neg)
    thr = np.unique(np.concatenate([pos, neg]))[::-1]
    pos_s, neg_s = np.sort(pos), np.sort(neg)
    tp = m - np.searchsorted(pos_s, thr, side="left")
    fp = n - np.searchsorted(neg_s, thr, side="left")
    thresholds = np.concatenate([[np.inf], thr])
    tpr = np.concatenate([[0.0], tp / m]) if m else np.zeros(len(thr) + 1)
    fpr = np.concatenate([[0.0], fp / n]) if n else np.zeros(len(thr) + 1)
    return thresholds, fpr, tpr


def roc(scores, labels, level: float = 0.95) -> RocResult:
    pos, neg = _split(scores, labels)
    if len(pos) == 0 or len(neg) == 0:
        raise StatsError("ROC needs at least one positive and one negative")
    thresholds, fpr, tpr = roc_points(scores, labels)
    a = auc(scores, labels)
    var, ci, clipped = None, None, False
    if len(pos) >= 2 and len(neg) >= 2:
        a, var = delong_variance(scores, labels)
        ci, clipped = _ci(a, var, level)
    return RocResult(thresholds, fpr, tpr, a, var, ci, len(pos), len(neg), clipped)


def write_roc_points(path: str | Path, result: RocResult) -> None:
    """Two-column ``fpr tpr`` text file for plotting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("fpr\ttpr\n")
        for x, y in zip(result.fpr, result.tpr):
            fh.write(f"{x:.6f}\t{y:.6f}\n")


def p_from_z(z: float, tail: str) -> float:
    _check_tail(tail)
    if tail == "two":
        return float(min(1.0, 2.0 * norm.sf(abs(z))))
    if tail == "greater":
        return float(norm.sf(z))
    return float(norm.cdf(z))


def _z_test(diff: float, var: float, tail: str, kind: str, **extra) -> TestResult:
    shape = _check_tail(tail)
    flags: tuple[str, ...] = ()
    if var <= 1e-15:
        flags = ("degenerate",)
        if abs(diff) <= 1e-15:
            z = 0.0
            p = 1.0 if shape == "two" else 0.5
        else:
            # zero spread but a real difference (e.g. perfect vs anti-perfect): the z -> inf limit
            z = float(np.copysign(np.inf, diff))
            p = p_from_z(z, tail)
    else:
        z = diff / np.sqrt(var)
        p = p_from_z(z, tail)
    return TestResult(float(z), p, kind, shape, tail, flags=flags, **extra)


def delong_test_paired(scores_a, scores_b, labels, tail: str = "two") -> TestResult:
    """Compare two correlated AUCs measured on the same embryos.

    ``tail="greater"`` tests auc_a > auc_b; ``"less"`` tests auc_a < auc_b.
    """
    scores_a = np.asarray(scores_a, dtype=float)
    scores_b = np.asarray(scores_b, dtype=float)
    if scores_a.shape != scores_b.shape or scores_a.shape != np.shape(labels):
        raise StatsError("paired DeLong needs equal-length score vectors and labels")
    pos_a, neg_a = _split(scores_a, labels)
    pos_b, neg_b = _split(scores_b, labels)
    m, n = len(pos_a), len(neg_a)
    if m < 2 or n < 2:
        raise StatsError(f"DeLong needs >= 2 of each class (got {m} pos, {n} neg)")
    auc_a, v10a, v01a = _placements(pos_a, neg_a)
    auc_b, v10b, v01b = _placements(pos_b, neg_b)
    s10 = np.cov(np.vstack([v10a, v10b]), ddof=1)
    s01 = np.cov(np.vstack([v01a, v01b]), ddof=1)
    cov = s10 / m + s01 / n
    var = float(cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1])
    return _z_test(
        auc_a - auc_b, max(var, 0.0), tail, "delong_paired",
        n_pos=m, n_neg=n, estimate_a=auc_a, estimate_b=auc_b,
    )


def delong_test_unpaired(
    scores_a, labels_a, scores_b, labels_b, tail: str = "two",
    ids_a: Iterable[str] | None = None, ids_b: Iterable[str] | None = None,
) -> TestResult:
    """Compare AUCs from two disjoint samples: ``z = (auc_a - auc_b) / sqrt(var_a + var_b)``."""
    if ids_a is not None and ids_b is not None:
        overlap = set(ids_a) & set(ids_b)
        if overlap:
            raise StatsError(f"{len(overlap)} ids in both samples; use the paired test")
    auc_a, var_a = delong_variance(scores_a, labels_a)
    auc_b, var_b = delong_variance(scores_b, labels_b)
    n_pos = int(np.sum(np.asarray(labels_a, bool))) + int(np.sum(np.asarray(labels_b, bool)))
    n_tot = len(labels_a) + len(labels_b)
    return _z_test(
        auc_a - auc_b, var_a + var_b, tail, "delong_unpaired",
        n_pos=n_pos, n_neg=n_tot - n_pos, estimate_a=auc_a, estimate_b=auc_b,
    )


# --- Mann-Whitney-Wilcoxon --------------------------------------------------

EXACT_MAX_N = 12


@lru_cache(maxsize=None)
def _exact_u_distribution(n_a: int, n_b: int) -> np.ndarray:
    """U of sample a for every assignment of ranks 1..N to a (tie-free case)."""
    N = n_a + n_b
    base = n_a * (n_a + 1) // 2
    us = [sum(c) + len(c) - base for c in itertools.combinations(range(N), n_a)]
    return np.sort(np.asarray(us, dtype=float))


def mann_whitney(sample_a, sample_b, tail: str = "two", method: str = "auto") -> TestResult:
    """Mann-Whitney U test on sample a versus b.

    Exact p by enumerating all rank assignments when ``n_a + n_b <= 12`` and
    there are no ties; otherwise the normal approximation with tie and
    continuity corrections. ``tail="greater"`` means a tends to exceed b.
    The statistic is U of sample a (pairs where a wins, ties counting half).
    ``method`` forces ``"exact"`` or ``"normal"``; exact refuses ties.
    """
    shape = _check_tail(tail)
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    n_a, n_b = len(a), len(b)
    if n_a == 0 or n_b == 0:
        raise StatsError("Mann-Whitney needs non-empty samples")
    ranks = rankdata(np.concatenate([a, b]))
    u = float(ranks[:n_a].sum() - n_a * (n_a + 1) / 2.0)
    N = n_a + n_b
    has_ties = len(np.unique(ranks)) < N

    if method not in ("auto", "exact", "normal"):
        raise StatsError(f"unknown method {method!r}")
    if method == "exact" and has_ties:
        raise StatsError("exact Mann-Whitney p is only available without ties")
    if method == "exact" or (method == "auto" and N <= EXACT_MAX_N and not has_ties):
        dist = _exact_u_distribution(n_a, n_b)
        p_le = np.count_nonzero(dist <= u) / len(dist)
        p_ge = np.count_nonzero(dist >= u) / len(dist)
        if tail == "two":
            p = min(1.0, 2.0 * min(p_le, p_ge))
        else:
            p = p_ge if tail == "greater" else p_le
        return TestResult(u, float(p), "mann_whitney", shape, tail, n_a, n_b, flags=("exact",))

    mu = n_a * n_b / 2.0
    _, counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(counts**3 - counts)) / (N * (N - 1))
    sigma = np.sqrt(n_a * n_b / 12.0 * ((N + 1) - tie_term))
    if sigma == 0.0:
        p = 1.0 if shape == "two" else 0.5
        return TestResult(u, p, "mann_whitney", shape, tail, n_a, n_b, flags=("normal", "degenerate"))
    if tail == "two":
        z = max(abs(u - mu) - 0.5, 0.0) / sigma
        p = min(1.0, 2.0 * norm.sf(z))
    elif tail == "greater":
        p = norm.sf((u - mu - 0.5) / sigma)
    else:
        p = norm.cdf((u - mu + 0.5) / sigma)
    return TestResult(u, float(p), "mann_whitney", shape, tail, n_a, n_b, flags=("normal",))
