"""Warmup on the OOD loss, then multi-task curriculum training.

Per epoch of the multi-task phase the loop
  1. selects likely-ID unlabeled samples from the current score table,
  2. takes ``iterations_per_epoch`` Adam steps on SSL loss + weighted OOD loss,
  3. reassigns every unlabeled score to the OOD head's output,
  4. snapshots a checkpoint and records metrics.
The warmup phase runs steps 2-3 with the OOD loss only, and the score
reassignment only starts at ``score_update_start_epoch``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from .curriculum import ScoreTable, SelectionResult, init_scores, select, update_scores
from .datagen import TrainingView
from .evaluation import EvalMonitor
from .losses import SslConfig, ood_loss, ssl_loss
from .model import ModelParams, collect_grads, forward, init_model, leaves_for

log = logging.getLogger(__name__)

MODES = ("ours", "baseline_no_filter", "supervised_only")


class NumericalError(RuntimeError):
    """A loss became NaN or infinite."""

    def __init__(self, epoch: int, what: str):
        super().__init__(f"non-finite {what} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    warmup_epochs: int = 30
    score_update_start_epoch: int = 10
    multitask_epochs: int = 60
    iterations_per_epoch: int = 100
    batch_labeled: int = 16
    batch_unlabeled: int = 16
    learning_rate: float = 0.002
    ssl: SslConfig = field(default_factory=SslConfig)
    ood_loss_weight: float = 1.0
    selection_mode: str = "otsu"
    selection_fraction: float = 0.8
    otsu_bins: int = 256
    checkpoint_window: int = 10
    hidden_widths: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.ssl, dict):
            self.ssl = SslConfig(**self.ssl)
        for name in ("multitask_epochs", "iterations_per_epoch", "batch_labeled",
                     "batch_unlabeled", "checkpoint_window", "otsu_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.warmup_epochs < 0 or self.score_update_start_epoch < 0:
            raise ValueError("warmup_epochs and score_update_start_epoch must be >= 0")
        if self.score_update_start_epoch > self.warmup_epochs:
            raise ValueError(
                f"score_update_start_epoch ({self.score_update_start_epoch}) "
                f"exceeds warmup_epochs ({self.warmup_epochs})")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.selection_mode not in ("otsu", "fraction"):
            raise ValueError(f"selection_mode must be 'otsu' or 'fraction', got {self.selection_mode!r}")
        if not 0 < self.selection_fraction <= 1:
            raise ValueError("selection_fraction must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "ssl" in d:
            ssl_known = {f.name for f in fields(SslConfig)}
            bad = set(d["ssl"]) - ssl_known
            if bad:
                raise ValueError(f"unknown ssl keys: {sorted(bad)}")
            d["ssl"] = SslConfig(**d["ssl"])
        return cls(**d)


def profile(name: str, **overrides) -> TrainConfig:
    """Named schedules: ``desk`` (the defaults) or ``paper-scale``."""
    if name == "desk":
        cfg = {}
    elif name == "paper-scale":
        cfg = dict(warmup_epochs=100, score_update_start_epoch=10, multitask_epochs=1024,
                   iterations_per_epoch=1024, batch_labeled=64, batch_unlabeled=64,
                   ssl=SslConfig(unlabeled_weight_rampup_epochs=256))
    else:
        raise ValueError(f"unknown profile {name!r}")
    cfg.update(overrides)
    return TrainConfig(**cfg)


HISTORY_COLUMNS = [
    "epoch", "phase", "ood_loss", "ssl_loss", "threshold", "selected_fraction",
    "n_selected", "precision", "recall", "test_accuracy", "scores_updated",
]


@dataclass
class RunHistory:
    records: list[dict] = field(default_factory=list)
    checkpoints: deque = field(default_factory=deque)  # (epoch, params, test_accuracy)
    score_snapshots: dict = field(default_factory=dict)  # epoch -> scores used for selection

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(r.get(c)) for c in HISTORY_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.records]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


class BatchSampler:
    """Endless minibatches of indices; reshuffles and wraps when the pool runs out."""

    def __init__(self, indices, batch_size: int, rng: np.random.Generator):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.batch_size = batch_size
        self.rng = rng
        self._order = self.rng.permutation(self.indices)
        self._pos = 0

    def __len__(self) -> int:
        return self.indices.size

    def next(self) -> np.ndarray:
        if self.indices.size == 0:
            return self.indices
        out = []
        need = self.batch_size
        while need:
            if self._pos >= self._order.size:
                self._order = self.rng.permutation(self.indices)
                self._pos = 0
            take = self._order[self._pos:self._pos + need]
            self._pos += take.size
            need -= take.size
            out.append(take)
        return np.concatenate(out)


class Trainer:
    """Owns one run's parameters, optimiser, score table and RNG stream."""

    def __init__(self, config: TrainConfig, view: TrainingView, mode: str = "ours",
                 monitor: EvalMonitor | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.config = config
        self.view = view
        self.mode = mode
        self.monitor = monitor
        self.params: ModelParams = init_model(view.input_dim, list(config.hidden_widths),
                                              view.num_classes, config.seed, config.activation)
        self.adam = dc.AdamState.fresh(self.params.arrays(), learning_rate=config.learning_rate)
        self.table: ScoreTable = init_scores(view.labeled_x.shape[0], view.unlabeled_x.shape[0])
        self.rng = np.random.default_rng([config.seed, 7])
        self.labeled_sampler = BatchSampler(np.arange(view.labeled_x.shape[0]), config.batch_labeled, self.rng)
        self.unlabeled_sampler = BatchSampler(np.arange(view.unlabeled_x.shape[0]), config.batch_unlabeled, self.rng)
        self.history = RunHistory(checkpoints=deque(maxlen=config.checkpoint_window))
        self.epoch = 0
        self.ssl_evaluations = 0
        self.score_updates = 0
        self.epoch_callbacks: list = []

    # -- single steps -------------------------------------------------------

    def _ood_term(self, lab_idx, unl_idx, leaves):
        x = np.concatenate([self.view.labeled_x[lab_idx], self.view.unlabeled_x[unl_idx]])
        s = forward(self.params, x, leaves).ood_score
        n_l = lab_idx.size
        return ood_loss(dc.rows(s, 0, n_l), self.table.labeled_scores[lab_idx],
                        dc.rows(s, n_l, s.shape[0]), self.table.unlabeled_scores[unl_idx])

    def _step(self, loss: dc.Value, leaves) -> None:
        loss.backward()
        dc.adam_step(self.adam, self.params.arrays(), collect_grads(self.params, leaves))

    def _check(self, value: float, what: str) -> None:
        if not math.isfinite(value):
            raise NumericalError(self.epoch, what)

    def _update_scores(self) -> None:
        self.table = update_scores(self.table, self.params, self.view.unlabeled_x, epoch=self.epoch)
        self.score_updates += 1

    def _finish_epoch(self, record: dict, selection: SelectionResult | None) -> None:
        if self.monitor is not None:
            record["test_accuracy"] = self.monitor.test_accuracy(self.params)
            if selection is not None:
                record["precision"], record["recall"] = self.monitor.selection_metrics(selection.selected_indices)
        assert not self.table.labeled_scores.any(), "labeled OOD scores must stay 0"
        self.history.records.append(record)
        for cb in self.epoch_callbacks:
            cb(self, record)
        self.epoch += 1

    # -- phases -------------------------------------------------------------

    def run_warmup(self) -> None:
        """Adam on the OOD loss alone; scores reassigned from ``score_update_start_epoch``."""
        cfg = self.config
        for e in range(cfg.warmup_epochs):
            self.history.score_snapshots[self.epoch] = self.table.unlabeled_scores.copy()
            losses = []
            for _ in range(cfg.iterations_per_epoch):
                leaves = leaves_for(self.params)
                loss = self._ood_term(self.labeled_sampler.next(), self.unlabeled_sampler.next(), leaves)
                self._check(float(loss.data), "ood_loss")
                self._step(loss, leaves)
                losses.append(float(loss.data))
            updated = e >= cfg.score_update_start_epoch
            if updated:
                self._update_scores()
            self._finish_epoch({
                "epoch": self.epoch, "phase": "warmup", "ood_loss": float(np.mean(losses)),
                "ssl_loss": math.nan, "threshold": math.nan, "scores_updated": updated,
            }, None)

    def _selection(self) -> SelectionResult:
        n_u = self.view.unlabeled_x.shape[0]
        if self.mode == "baseline_no_filter":
            return SelectionResult(1.0, np.arange(n_u), 1.0 if n_u else 0.0)
        if self.mode == "supervised_only" or n_u == 0:
            return SelectionResult(math.nan, np.zeros(0, dtype=np.int64), 0.0)
        sel = select(self.table, self.config.selection_mode, self.config.selection_fraction,
                     self.config.otsu_bins)
        if sel.degenerate:
            log.info("epoch %d: degenerate score histogram, no unlabeled samples selected", self.epoch)
        return sel

    def run_multitask(self) -> None:
        cfg = self.config
        use_ood = self.mode == "ours"
        for e in range(cfg.multitask_epochs):
            self.history.score_snapshots[self.epoch] = self.table.unlabeled_scores.copy()
            selection = self._selection()
            selected = set(selection.selected_indices.tolist())
            sel_sampler = BatchSampler(selection.selected_indices, cfg.batch_unlabeled, self.rng)
            ood_losses, ssl_losses = [], []
            for _ in range(cfg.iterations_per_epoch):
                leaves = leaves_for(self.params)
                lab_idx = self.labeled_sampler.next()
                sel_idx = sel_sampler.next()
                assert all(i in selected for i in sel_idx.tolist())
                loss = ssl_loss(self.params, (self.view.labeled_x[lab_idx], self.view.labeled_y[lab_idx]),
                                self.view.unlabeled_x[sel_idx], cfg.ssl, e, self.rng, leaves)
                self.ssl_evaluations += 1
                ssl_val = float(loss.data)
                self._check(ssl_val, "ssl_loss")
                ssl_losses.append(ssl_val)
                if use_ood:
                    lo = self._ood_term(lab_idx, self.unlabeled_sampler.next(), leaves)
                    self._check(float(lo.data), "ood_loss")
                    ood_losses.append(float(lo.data))
                    loss = loss + dc.scale(lo, cfg.ood_loss_weight)
                self._step(loss, leaves)
            if use_ood:
                self._update_scores()
            acc = self.monitor.test_accuracy(self.params) if self.monitor is not None else math.nan
            self.history.checkpoints.append((self.epoch, self.params.copy(), acc))
            self._finish_epoch({
                "epoch": self.epoch, "phase": "multitask",
                "ood_loss": float(np.mean(ood_losses)) if ood_losses else math.nan,
                "ssl_loss": float(np.mean(ssl_losses)),
                "threshold": selection.threshold,
                "selected_fraction": selection.selected_fraction,
                "n_selected": int(selection.selected_indices.size),
                "scores_updated": use_ood,
            }, selection)

    def fit(self) -> RunHistory:
        if self.mode == "ours":
            self.run_warmup()
        self.run_multitask()
        return self.history

    def final_selection(self) -> SelectionResult:
        return self._selection()


def final_evaluation(trainer: Trainer, monitor: EvalMonitor | None = None,
                     odin_temperature: float = 1000.0, odin_epsilon: float = 0.01) -> dict:
    """Checkpoint-window mean test accuracy plus final detection metrics."""
    monitor = monitor or trainer.monitor
    if monitor is None:
        raise ValueError("final_evaluation needs an EvalMonitor")
    ckpts = list(trainer.history.checkpoints)
    if not ckpts:
        raise ValueError("no checkpoints recorded")
    accs = [monitor.test_accuracy(p) for _, p, _ in ckpts]
    out = {
        "checkpoint_mean_accuracy": float(np.mean(accs)),
        "checkpoint_accuracies": accs,
        "final_accuracy": accs[-1],
        "num_checkpoints": len(ckpts),
    }
    sel = trainer.final_selection()
    prec, rec = monitor.selection_metrics(sel.selected_indices)
    out.update(final_threshold=sel.threshold, final_selected=int(sel.selected_indices.size),
               final_precision=prec, final_recall=rec)
    out.update(monitor.detection_aurocs(trainer.params, trainer.view.unlabeled_x,
                                        odin_temperature, odin_epsilon))
    window = [monitor.detection_aurocs(p, trainer.view.unlabeled_x, odin_temperature, odin_epsilon)
              for _, p, _ in ckpts]
    for key in ("auroc_learned", "auroc_msp", "auroc_odin"):
        out[key + "_window_mean"] = float(np.mean([w[key] for w in window]))
    return out


def summary_json(trainer: Trainer, metrics: dict, extra: dict | None = None) -> str:
    doc = {"mode": trainer.mode, "config": trainer.config.to_dict(), "metrics": metrics}
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o))
