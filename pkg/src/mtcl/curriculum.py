"""OOD score table, Otsu thresholding and curriculum selection of unlabeled samples."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, predict

DEFAULT_BINS = 256


class DegenerateHistogramError(ValueError):
    """All scores fall into one histogram bin, so no threshold separates them."""


@dataclass
class ScoreTable:
    labeled_scores: np.ndarray
    unlabeled_scores: np.ndarray
    epoch_last_updated: int = -1

    def snapshot(self) -> "ScoreTable":
        return ScoreTable(self.labeled_scores.copy(), self.unlabeled_scores.copy(),
                          self.epoch_last_updated)


@dataclass
class SelectionResult:
    threshold: float
    selected_indices: np.ndarray
    selected_fraction: float
    degenerate: bool = field(default=False)


def init_scores(n_labeled: int, n_unlabeled: int) -> ScoreTable:
    """Labeled samples start as certainly in-distribution (0), unlabeled as certainly OOD (1)."""
    if n_labeled < 0 or n_unlabeled < 0:
        raise ValueError("score table sizes must be non-negative")
    return ScoreTable(np.zeros(n_labeled), np.ones(n_unlabeled))


def update_scores(table: ScoreTable, params: ModelParams, unlabeled_inputs, epoch: int | None = None) -> ScoreTable:
    """Reassign every unlabeled score to the network's current OOD-head output."""
    unlabeled_inputs = np.asarray(unlabeled_inputs, dtype=np.float64)
    if unlabeled_inputs.shape[0] != table.unlabeled_scores.shape[0]:
        raise ValueError(
            f"update_scores: {unlabeled_inputs.shape[0]} inputs for "
            f"{table.unlabeled_scores.shape[0]} unlabeled scores")
    if unlabeled_inputs.shape[0]:
        _, s = predict(params, unlabeled_inputs)
    else:
        s = np.zeros(0)
    return ScoreTable(table.labeled_scores, s,
                      table.epoch_last_updated if epoch is None else epoch)


def score_histogram(scores, num_bins: int = DEFAULT_BINS) -> np.ndarray:
    """Counts over ``num_bins`` equal-width bins on [0, 1]; a score of 1 goes in the last bin."""
    idx = bin_index(scores, num_bins)
    return np.bincount(idx, minlength=num_bins)


def bin_index(scores, num_bins: int) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    return np.clip(np.floor(s * num_bins).astype(np.int64), 0, num_bins - 1)


def otsu_threshold(scores, num_bins: int = DEFAULT_BINS) -> float:
    """Bin edge maximising between-class variance of the score histogram.

    Candidate thresholds are the interior edges ``k / num_bins``; class 0 is
    every bin below ``k``.  Bin indices stand in for bin centres (an affine
    map, which leaves the argmax unchanged), and the between-class variance
    ``w0 w1 (mu0 - mu1)^2`` is proportional to
    ``(N * S0 - S * n0)^2 / (n0 * n1)`` in integer counts and index sums, so
    comparisons are exact and ties go to the smallest threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("otsu_threshold: no scores")
    if num_bins < 2:
        raise ValueError("otsu_threshold: need at least 2 bins")
    hist = score_histogram(s, num_bins)
    if np.count_nonzero(hist) < 2:
        raise DegenerateHistogramError("all scores fall in a single histogram bin")
    N = int(s.size)
    S = int(np.dot(np.arange(num_bins), hist))
    best_k, best_num, best_den = 0, -1, 1
    n0 = S0 = 0
    for k in range(1, num_bins):
        c = int(hist[k - 1])
        n0 += c
        S0 += (k - 1) * c
        n1 = N - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (N * S0 - S * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return best_k / num_bins


def select_id_subset(table: ScoreTable, threshold: float) -> SelectionResult:
    """Unlabeled indices whose score is strictly below ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    s = table.unlabeled_scores
    idx = np.flatnonzero(s < threshold)
    frac = idx.size / s.size if s.size else 0.0
    return SelectionResult(float(threshold), idx, frac)


def select_id_fraction(table: ScoreTable, fraction: float) -> SelectionResult:
    """The ``ceil(fraction * n)`` lowest-scoring unlabeled indices (stable on ties)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    s = table.unlabeled_scores
    n_take = math.ceil(fraction * s.size)
    order = np.argsort(s, kind="stable")[:n_take]
    idx = np.sort(order)
    thr = float(s[order[-1]]) if n_take else 0.0
    return SelectionResult(thr, idx, n_take / s.size if s.size else 0.0)


def select(table: ScoreTable, mode: str, fraction: float | None = None,
           num_bins: int = DEFAULT_BINS) -> SelectionResult:
    """Dispatch on selection mode; a degenerate Otsu histogram selects nothing."""
    if mode == "otsu":
        try:
            thr = otsu_threshold(table.unlabeled_scores, num_bins)
        except DegenerateHistogramError:
            return SelectionResult(float("nan"), np.zeros(0, dtype=np.int64), 0.0, degenerate=True)
        return select_id_subset(table, thr)
    if mode == "fraction":
        return select_id_fraction(table, fraction)
    raise ValueError(f"unknown selection mode {mode!r}")


def write_score_snapshot(path, scores, hidden_is_ood=None) -> None:
    """CSV with columns index, score, hidden_is_ood (blank when unknown)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "score", "hidden_is_ood"])
        for i, s in enumerate(scores):
            flag = "" if hidden_is_ood is None else int(bool(hidden_is_ood[i]))
            w.writerow([i, repr(float(s)), flag])


def read_score_snapshot(path) -> tuple[np.ndarray, np.ndarray | None]:
    scores, flags = [], []
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        for row in r:
            scores.append(float(row["score"]))
            flags.append(row["hidden_is_ood"])
    if any(f == "" for f in flags):
        return np.array(scores), None
    return np.array(scores), np.array([f == "1" for f in flags], dtype=bool)
