"""Accuracy, curriculum selection quality, AUROC, and the softmax/ODIN baseline detectors.

All detector scores are oriented so that larger means more likely OOD.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

from . import diffcore as dc
from .diffcore import Value
from .model import ModelParams, forward, predict


def accuracy(predictions, truth) -> float:
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if predictions.shape != truth.shape:
        raise ValueError(f"accuracy: {predictions.shape} predictions vs {truth.shape} labels")
    return float(np.mean(predictions == truth))


def selection_precision_recall(selected, hidden_is_ood) -> tuple[float, float]:
    """Share of ID among selected, and share of all ID that was selected.

    Precision of an empty selection is NaN.
    """
    is_ood = np.asarray(hidden_is_ood, dtype=bool)
    sel = np.unique(np.asarray(selected, dtype=np.int64))
    if sel.size and (sel.min() < 0 or sel.max() >= is_ood.size):
        raise IndexError("selected index out of range")
    n_id = int((~is_ood).sum())
    hits = int((~is_ood[sel]).sum())
    precision = hits / sel.size if sel.size else math.nan
    recall = hits / n_id if n_id else math.nan
    return precision, recall


def auroc(scores, labels) -> float:
    """P(score of a random OOD sample > score of a random ID sample), ties count half.

    Computed from average ranks (the Mann-Whitney U statistic).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise ValueError("auroc: scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both OOD and ID samples")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _tempered_probs(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def max_softmax_score(params: ModelParams, x) -> np.ndarray:
    """One minus the largest class probability."""
    logits = forward(params, x).class_logits.data
    return 1.0 - _tempered_probs(logits, 1.0).max(axis=-1)


def odin_perturb(params: ModelParams, x, temperature: float, perturbation_magnitude: float) -> np.ndarray:
    """Step the input against the gradient of the tempered CE on its own predicted class."""
    xv = Value(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    logits = forward(params, xv).class_logits
    pred = logits.data.argmax(axis=-1)
    ls = dc.log_softmax(dc.scale(logits, 1.0 / temperature))
    onehot = np.eye(params.num_classes)[pred]
    loss = -dc.sum_(ls * onehot)
    loss.backward()
    return xv.data - perturbation_magnitude * np.sign(xv.grad)


def odin_score(params: ModelParams, x, temperature: float = 1000.0,
               perturbation_magnitude: float = 0.01) -> np.ndarray:
    """One minus the largest tempered class probability at the perturbed input."""
    if temperature <= 0:
        raise ValueError(f"ODIN temperature must be > 0, got {temperature}")
    if perturbation_magnitude < 0:
        raise ValueError("ODIN perturbation magnitude must be >= 0")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if perturbation_magnitude > 0:
        x = odin_perturb(params, x, temperature, perturbation_magnitude)
    logits = forward(params, x).class_logits.data
    return 1.0 - _tempered_probs(logits, temperature).max(axis=-1)


def learned_ood_score(params: ModelParams, x) -> np.ndarray:
    return predict(params, x)[1]


class EvalMonitor:
    """Holds the hidden truth and test split; the trainer only sees its metric dicts."""

    def __init__(self, hidden_is_ood, test_x, test_y):
        self.hidden_is_ood = np.asarray(hidden_is_ood, dtype=bool)
        self.test_x = np.asarray(test_x, dtype=np.float64)
        self.test_y = np.asarray(test_y)
        if self.test_y.size == 0:
            raise ValueError("empty test set")

    @classmethod
    def from_dataset(cls, ds) -> "EvalMonitor":
        return cls(ds.hidden_is_ood, ds.test_x, ds.test_y)

    def test_accuracy(self, params: ModelParams) -> float:
        probs, _ = predict(params, self.test_x)
        return accuracy(probs.argmax(axis=-1), self.test_y)

    def selection_metrics(self, selected) -> tuple[float, float]:
        return selection_precision_recall(selected, self.hidden_is_ood)

    def detection_aurocs(self, params: ModelParams, unlabeled_x, temperature: float = 1000.0,
                         perturbation_magnitude: float = 0.01) -> dict:
        """AUROC of the learned, max-softmax and ODIN scores over the unlabeled pool."""
        labels = self.hidden_is_ood
        if labels.all() or not labels.any():
            return {"auroc_learned": math.nan, "auroc_msp": math.nan, "auroc_odin": math.nan}
        return {
            "auroc_learned": auroc(learned_ood_score(params, unlabeled_x), labels),
            "auroc_msp": auroc(max_softmax_score(params, unlabeled_x), labels),
            "auroc_odin": auroc(odin_score(params, unlabeled_x, temperature, perturbation_magnitude), labels),
        }
