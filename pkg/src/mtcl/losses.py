"""OOD-score cross-entropy and a reduced MixMatch semi-supervised loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .datagen import augment
from .diffcore import Value
from .model import ModelParams, forward

PROB_EPS = 1e-12


@dataclass
class SslConfig:
    sharpen_temperature: float = 0.5
    num_guess_augmentations: int = 2
    mixup_alpha: float = 0.75
    unlabeled_weight_max: float = 10.0
    unlabeled_weight_rampup_epochs: int = 15
    augment_strength: float = 0.05

    def __post_init__(self):
        if not 0 < self.sharpen_temperature <= 1:
            raise ValueError(f"sharpen_temperature must be in (0, 1], got {self.sharpen_temperature}")
        if self.num_guess_augmentations < 1:
            raise ValueError("num_guess_augmentations must be >= 1")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be > 0")
        if self.unlabeled_weight_max < 0:
            raise ValueError("unlabeled_weight_max must be >= 0")
        if self.unlabeled_weight_rampup_epochs < 0:
            raise ValueError("unlabeled_weight_rampup_epochs must be >= 0")
        if self.augment_strength < 0:
            raise ValueError("augment_strength must be >= 0")

    def unlabeled_weight(self, epoch: int) -> float:
        if self.unlabeled_weight_rampup_epochs == 0:
            return self.unlabeled_weight_max
        return self.unlabeled_weight_max * min(1.0, epoch / self.unlabeled_weight_rampup_epochs)


def _bce_mean(pred: Value, target) -> Value:
    p = dc.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    t = np.asarray(target, dtype=np.float64).reshape(p.shape)
    ll = t * dc.log(p) + (1.0 - t) * dc.log(1.0 - p)
    return -dc.mean(ll)


def ood_loss(pred_labeled, target_labeled, pred_unlabeled, target_unlabeled) -> Value:
    """Mean binary cross-entropy against OOD-score targets, one mean per group.

    The labeled and unlabeled groups are averaged separately and then added,
    so each group carries equal total weight regardless of its size.  An empty
    group contributes nothing; both empty is an error.
    """
    terms = []
    for pred, target in ((pred_labeled, target_labeled), (pred_unlabeled, target_unlabeled)):
        pred = dc.lift(pred)
        n = pred.data.size
        if n != np.size(target):
            raise ValueError(f"ood_loss: {n} predictions but {np.size(target)} targets")
        if n:
            terms.append(_bce_mean(pred, target))
    if not terms:
        raise ValueError("ood_loss: both labeled and unlabeled groups are empty")
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def score_divergence(target, pred) -> np.ndarray:
    """Per-sample binary KL(target || pred).

    Differs from the per-sample cross-entropy only by the target's own
    entropy, so its gradient in the network parameters is the same; as a
    function of the target it is zero exactly at ``target == pred``.
    """
    s = np.asarray(target, dtype=np.float64)
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(s > 0, s * np.log(s / p), 0.0)
        b = np.where(s < 1, (1 - s) * np.log((1 - s) / (1 - p)), 0.0)
    return a + b


def sharpen(p, T: float) -> np.ndarray:
    """Raise to 1/T and renormalise along the last axis."""
    if T <= 0:
        raise ValueError(f"sharpen temperature must be > 0, got {T}")
    p = np.asarray(p, dtype=np.float64)
    if T == 1:
        return p.copy()
    # work in log space so tiny probabilities don't underflow to an all-zero row
    with np.errstate(divide="ignore"):
        logp = np.log(p) / T
    logp -= logp.max(axis=-1, keepdims=True)
    q = np.exp(logp)
    return q / q.sum(axis=-1, keepdims=True)


def _guess_from_views(params: ModelParams, views: list[np.ndarray], T: float) -> np.ndarray:
    avg = sum(forward(params, v).class_probs.data for v in views) / len(views)
    return sharpen(avg, T)


def guess_label(params: ModelParams, x, config: SslConfig, rng: np.random.Generator) -> np.ndarray:
    """Sharpened average prediction over augmented copies of ``x``; a constant, no graph."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    views = [augment(x, config.augment_strength, rng) for _ in range(config.num_guess_augmentations)]
    q = _guess_from_views(params, views, config.sharpen_temperature)
    return q[0] if single else q


def mixup(x1, t1, x2, t2, alpha: float, rng: np.random.Generator | None = None,
          lam: float | None = None):
    """Convex combination weighted towards the first argument.

    ``lam`` bypasses the Beta(alpha, alpha) draw; it is still folded to
    ``max(lam, 1 - lam)``.
    """
    if alpha <= 0:
        raise ValueError(f"mixup alpha must be > 0, got {alpha}")
    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    t1, t2 = np.asarray(t1, dtype=np.float64), np.asarray(t2, dtype=np.float64)
    if x1.shape != x2.shape or t1.shape != t2.shape:
        raise ValueError(f"mixup: shape mismatch {x1.shape}/{x2.shape}, {t1.shape}/{t2.shape}")
    if lam is None:
        lam = rng.beta(alpha, alpha)
    lam = max(lam, 1.0 - lam)
    return lam * x1 + (1 - lam) * x2, lam * t1 + (1 - lam) * t2


def soft_cross_entropy(logits: Value, targets) -> Value:
    """Mean over rows of -sum_k t_k log softmax(logits)_k."""
    ls = dc.log_softmax(logits)
    return -dc.mean(dc.sum_(ls * np.asarray(targets, dtype=np.float64), axis=-1))


def ssl_loss(params: ModelParams, labeled_batch, unlabeled_x, config: SslConfig, epoch: int,
             rng: np.random.Generator, leaves: list[Value] | None = None,
             lam: float | None = None, guess=None) -> Value:
    """Supervised CE on mixed labeled rows plus ramped L2 consistency on mixed unlabeled rows.

    Random draws happen in this order: labeled augmentation, one augmentation
    of the unlabeled batch per guess view, the pool permutation, then the
    mixup coefficient (skipped when ``lam`` is given). Passing ``guess``
    replaces the sharpened guesses for the unlabeled rows but leaves the
    random stream unchanged.
    """
    x_l, y_l = labeled_batch
    x_l = np.atleast_2d(np.asarray(x_l, dtype=np.float64))
    y_l = np.asarray(y_l, dtype=np.int64)
    if x_l.shape[0] == 0:
        raise ValueError("ssl_loss: empty labeled batch")
    K = params.num_classes
    n_l = x_l.shape[0]
    x_u = np.asarray(unlabeled_x, dtype=np.float64).reshape(-1, x_l.shape[1])
    n_u = x_u.shape[0]

    xl_aug = augment(x_l, config.augment_strength, rng)
    t_l = np.eye(K)[y_l]
    if n_u:
        views = [augment(x_u, config.augment_strength, rng)
                 for _ in range(config.num_guess_augmentations)]
        if guess is None:
            q = _guess_from_views(params, views, config.sharpen_temperature)
        else:
            q = np.asarray(guess, dtype=np.float64).reshape(n_u, K)
        x_all = np.concatenate([xl_aug] + views)
        t_all = np.concatenate([t_l] + [q] * len(views))
    else:
        x_all, t_all = xl_aug, t_l
    perm = rng.permutation(x_all.shape[0])
    x_mix, t_mix = mixup(x_all, t_all, x_all[perm], t_all[perm], config.mixup_alpha, rng, lam=lam)

    out = forward(params, x_mix, leaves)
    sup = soft_cross_entropy(dc.rows(out.class_logits, 0, n_l), t_mix[:n_l])
    w = config.unlabeled_weight(epoch)
    if n_u == 0 or w == 0:
        return sup
    probs_u = dc.rows(out.class_probs, n_l, x_mix.shape[0])
    diff = probs_u - t_mix[n_l:]
    return sup + dc.scale(dc.mean(diff * diff), w)

