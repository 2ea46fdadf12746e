"""Experiment runner: seeded runs, per-run artifacts, aggregates, OOD-count sweeps and histograms.

Layout under the output directory::

    <out>/<mode>/<seed>/history.csv
    <out>/<mode>/<seed>/scores_epoch_NNNN.csv
    <out>/<mode>/<seed>/summary.json
    <out>/aggregate.json

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .curriculum import bin_index, read_score_snapshot, write_score_snapshot
from .datagen import OOD_KINDS, TaskConfig, make_task
from .evaluation import EvalMonitor
from .losses import SslConfig
from .trainer import MODES, NumericalError, TrainConfig, Trainer, final_evaluation, profile, summary_json

log = logging.getLogger("mtcl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2
PROFILES = ("desk", "paper-scale")

# scalar metrics that go into aggregate.json
AGGREGATE_KEYS = (
    "checkpoint_mean_accuracy", "final_accuracy", "final_precision", "final_recall",
    "final_threshold", "auroc_learned", "auroc_msp", "auroc_odin",
    "auroc_learned_window_mean", "auroc_msp_window_mean", "auroc_odin_window_mean",
)


class ConfigError(ValueError):
    pass


_TASK_KEYS = {f.name for f in fields(TaskConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"ssl", "seed"}
_SSL_KEYS = {f.name for f in fields(SslConfig)}
_RUN_KEYS = {"seeds", "mode", "out", "profile", "odin_temperature", "odin_epsilon"}


@dataclass
class ExperimentSpec:
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mode: str = "ours"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out: Path = Path("runs")
    odin_temperature: float = 1000.0
    odin_epsilon: float = 0.01

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds: duplicates in {self.seeds}")
        if self.mode not in MODES:
            raise ConfigError(f"mode: {self.mode!r} is not one of {', '.join(MODES)}")
        if self.task.ood_kind not in OOD_KINDS:
            raise ConfigError(f"ood_kind: {self.task.ood_kind!r} is not one of {', '.join(OOD_KINDS)}")
        if self.odin_temperature <= 0 or self.odin_epsilon < 0:
            raise ConfigError("odin_temperature must be > 0 and odin_epsilon >= 0")
        self.out = Path(self.out)

    @classmethod
    def from_flat(cls, doc: dict, **overrides) -> "ExperimentSpec":
        """Build from a flat key/value mapping; unknown keys are an error.

        ``overrides`` (command-line flags) win over ``doc``; ``None`` values are ignored.
        """
        doc = dict(doc)
        doc.update({k: v for k, v in overrides.items() if v is not None})
        unknown = set(doc) - _TASK_KEYS - _TRAIN_KEYS - _SSL_KEYS - _RUN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        prof = doc.pop("profile", "desk")
        if prof not in PROFILES:
            raise ConfigError(f"profile: {prof!r} is not one of {', '.join(PROFILES)}")
        try:
            base = profile(prof)
            ssl = replace(base.ssl, **{k: doc[k] for k in _SSL_KEYS & set(doc)})
            train = replace(base, ssl=ssl, **{k: doc[k] for k in _TRAIN_KEYS & set(doc)})
            task = TaskConfig(**{k: doc[k] for k in _TASK_KEYS & set(doc)})
            run = {k: doc[k] for k in _RUN_KEYS & set(doc)}
            if "seeds" in run:
                run["seeds"] = [int(s) for s in run["seeds"]]
            return cls(task=task, train=train, **run)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def to_flat(self) -> dict:
        doc = asdict(self.task)
        train = self.train.to_dict()
        doc.update(train.pop("ssl"))
        train.pop("seed")
        doc.update(train)
        doc.update(mode=self.mode, seeds=list(self.seeds), out=str(self.out),
                   odin_temperature=self.odin_temperature, odin_epsilon=self.odin_epsilon)
        return doc


def load_spec(path, **overrides) -> ExperimentSpec:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: no such file")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}: invalid JSON: {e.msg}")
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    return ExperimentSpec.from_flat(doc, **overrides)


def run_dir(spec: ExperimentSpec, seed: int, mode: str | None = None) -> Path:
    return spec.out / (mode or spec.mode) / str(seed)


def execute_run(spec: ExperimentSpec, seed: int, mode: str | None = None) -> dict:
    """Train one seed and write its artifacts; returns the final metrics.

    Raises NumericalError if a loss goes non-finite.
    """
    mode = mode or spec.mode
    out = run_dir(spec, seed, mode)
    out.mkdir(parents=True, exist_ok=True)
    ds = make_task(spec.task, seed)
    trainer = Trainer(replace(spec.train, seed=seed), ds.training_view(), mode, EvalMonitor.from_dataset(ds))
    trainer.fit()
    metrics = final_evaluation(trainer, odin_temperature=spec.odin_temperature,
                               odin_epsilon=spec.odin_epsilon)
    trainer.history.write_csv(out / "history.csv")
    for epoch, scores in trainer.history.score_snapshots.items():
        write_score_snapshot(out / f"scores_epoch_{epoch:04d}.csv", scores, ds.hidden_is_ood)
    # scores after the last update, the ones the final selection used
    write_score_snapshot(out / f"scores_epoch_{trainer.epoch:04d}.csv",
                         trainer.table.unlabeled_scores, ds.hidden_is_ood)
    extra = {"seed": seed, "task": asdict(spec.task), "final_epoch": trainer.epoch,
             "odin_temperature": spec.odin_temperature, "odin_epsilon": spec.odin_epsilon}
    (out / "summary.json").write_text(summary_json(trainer, metrics, extra) + "\n")
    log.info("%s seed %d: accuracy %.4f precision %.3f recall %.3f auroc %.4f", mode, seed,
             metrics["checkpoint_mean_accuracy"], metrics["final_precision"],
             metrics["final_recall"], metrics["auroc_learned"])
    return metrics


def aggregate(per_seed: dict[int, dict]) -> dict:
    """Mean and population standard deviation of each scalar metric across seeds."""
    out = {"seeds": sorted(per_seed), "n": len(per_seed)}
    for key in AGGREGATE_KEYS:
        vals = np.array([per_seed[s][key] for s in sorted(per_seed)], dtype=np.float64)
        out[key] = {"mean": _num(np.mean(vals)), "std": _num(np.std(vals)),
                    "values": [_num(v) for v in vals]}
    return out


def _num(v):
    v = float(v)
    return None if math.isnan(v) else v


def run_experiment(spec: ExperimentSpec, mode: str | None = None,
                   aggregate_name: str = "aggregate.json", results: dict | None = None) -> int:
    """Run every seed, then write the aggregate JSON; returns an exit code.

    If ``results`` is given, each seed's metrics plus its wall-clock time are
    stored in it under ``(mode, seed)``. Timings stay out of the files so the
    artifacts remain reproducible.
    """
    mode = mode or spec.mode
    per_seed = {}
    for seed in spec.seeds:
        try:
            t0 = time.perf_counter()
            per_seed[seed] = execute_run(spec, seed, mode)
            if results is not None:
                results[mode, seed] = dict(per_seed[seed], wall_seconds=time.perf_counter() - t0)
        except NumericalError as e:
            print(f"error: run {mode}/{seed}: numerical failure at epoch {e.epoch}: {e}", file=sys.stderr)
            return EXIT_NUMERICAL
    agg = aggregate(per_seed)
    agg.update(mode=mode, spec=spec.to_flat())
    spec.out.mkdir(parents=True, exist_ok=True)
    (spec.out / aggregate_name).write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def sweep_ood_count(spec: ExperimentSpec, counts: list[int],
                    results: dict | None = None) -> tuple[int, Path]:
    """Mean checkpoint accuracy of baseline_no_filter and ours at each OOD count.

    Writes ``<out>/sweep.csv`` with columns count, baseline, ours, and the
    per-count run trees and ``aggregate_<mode>.json`` files under
    ``<out>/ood_<count>/``. ``results`` collects per-run metrics keyed by
    ``(count, mode, seed)``.
    """
    if not counts:
        raise ConfigError("counts: need at least one OOD count")
    if any(c < 0 for c in counts):
        raise ConfigError(f"counts must be non-negative, got {counts}")
    rows = []
    for count in counts:
        sub = replace(spec, task=replace(spec.task, n_ood=count), out=spec.out / f"ood_{count}")
        row = {"count": count}
        for mode, col in (("baseline_no_filter", "baseline"), ("ours", "ours")):
            per_run = {}
            code = run_experiment(sub, mode, aggregate_name=f"aggregate_{mode}.json", results=per_run)
            if results is not None:
                results.update({(count, m, s): v for (m, s), v in per_run.items()})
            if code:
                return code, spec.out / "sweep.csv"
            agg = json.loads((sub.out / f"aggregate_{mode}.json").read_text())
            row[col] = agg["checkpoint_mean_accuracy"]["mean"]
            row[col + "_std"] = agg["checkpoint_mean_accuracy"]["std"]
        rows.append(row)
    path = spec.out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["count", "baseline", "ours", "baseline_std", "ours_std"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK, path


def read_sweep(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "count" else float(v)) for k, v in r.items()} for r in csv.DictReader(fh)]


def emit_histogram(run_directory, epoch: int, num_bins: int = 50) -> Path:
    """Bin one epoch's unlabeled scores separately for hidden ID and OOD samples.

    The threshold is the one the run used at that epoch: the history row for
    epochs inside the run, the final selection threshold for the epoch after
    the last one.
    """
    run_directory = Path(run_directory)
    snap = run_directory / f"scores_epoch_{epoch:04d}.csv"
    if not snap.exists():
        raise FileNotFoundError(f"no score snapshot for epoch {epoch} in {run_directory}")
    scores, is_ood = read_score_snapshot(snap)
    if is_ood is None:
        raise ValueError(f"{snap} has no hidden_is_ood column values")
    threshold = _logged_threshold(run_directory, epoch)
    idx = bin_index(scores, num_bins)
    doc = {
        "epoch": epoch,
        "threshold": threshold,
        "bin_edges": [k / num_bins for k in range(num_bins + 1)],
        "id_counts": np.bincount(idx[~is_ood], minlength=num_bins).tolist(),
        "ood_counts": np.bincount(idx[is_ood], minlength=num_bins).tolist(),
    }
    path = run_directory / f"histogram_epoch_{epoch:04d}.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _logged_threshold(run_directory: Path, epoch: int):
    with open(run_directory / "history.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            if int(row["epoch"]) == epoch:
                return _num(row["threshold"])
    summary = json.loads((run_directory / "summary.json").read_text())
    if summary.get("final_epoch") == epoch:
        return _num(summary["metrics"]["final_threshold"])
    raise ValueError(f"epoch {epoch} not found in {run_directory / 'history.csv'}")


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtcl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("spec", nargs="?", help="flat JSON config; omitted means all defaults")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seeds", type=_seed_list, help="e.g. 0,1,2")
        sp.add_argument("--profile", choices=PROFILES)

    r = sub.add_parser("run", help="train every seed and aggregate")
    common(r)
    r.add_argument("--mode", choices=MODES)
    s = sub.add_parser("sweep", help="baseline vs ours across OOD counts")
    common(s)
    s.add_argument("--counts", type=_seed_list, default=[100, 500, 1000, 2000])
    h = sub.add_parser("histogram", help="binned ID/OOD scores for one epoch of one run")
    h.add_argument("run_dir")
    h.add_argument("epoch", type=int)
    h.add_argument("--bins", type=int, default=50)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.verb == "histogram":
            print(emit_histogram(args.run_dir, args.epoch, args.bins))
            return EXIT_OK
        spec = load_spec(args.spec, out=args.out, seeds=args.seeds, profile=args.profile,
                         mode=getattr(args, "mode", None))
        if args.verb == "run":
            return run_experiment(spec)
        code, path = sweep_ood_count(spec, args.counts)
        if code == EXIT_OK:
            print(path)
        return code
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
