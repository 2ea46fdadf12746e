"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The verdict lines are printed at the end of the pytest run under
"acceptance criteria". The desk-scale training criteria (6-9) share one
OOD-count sweep on the default task plus one clean reference run, so the
whole module takes roughly twenty minutes on one CPU core.
"""

import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from acceptance_report import record
from helpers import auroc_pairs, grad_check_ood, grad_check_ssl, otsu_exhaustive, score_vector
from mtcl.cli import ExperimentSpec, read_sweep, run_experiment, sweep_ood_count
from mtcl.curriculum import init_scores, otsu_threshold, update_scores
from mtcl.datagen import TaskConfig, make_task
from mtcl.evaluation import EvalMonitor, auroc, max_softmax_score, odin_score
from mtcl.losses import score_divergence
from mtcl.model import init_model
from mtcl.trainer import TrainConfig, Trainer

SEEDS = [0, 1, 2]
SWEEP_COUNTS = [100, 500, 1000, 2000]
DEFAULT_COUNT = 500


def check(number, title, passed, detail):
    record(number, title, passed, detail)
    assert passed, detail


# -- property criteria ------------------------------------------------------

def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    errs_ood = [grad_check_ood(s) for s in range(20)]
    errs_ssl = [grad_check_ssl(s) for s in range(20)]
    elapsed = time.perf_counter() - t0
    worst = max(errs_ood + errs_ssl)
    check(1, "gradient correctness", worst <= 1e-4 and elapsed < 10,
          f"max rel err ood {max(errs_ood):.2e}, ssl {max(errs_ssl):.2e} (tol 1e-4); {elapsed:.1f}s (< 10s)")


def test_c02_otsu_oracle():
    kinds = ["bimodal", "unimodal", "skewed"]
    vectors = [score_vector(kinds[i % 3], np.random.default_rng([i, 2002])) for i in range(100)]
    t0 = time.perf_counter()
    got = [otsu_threshold(v) for v in vectors]
    elapsed = time.perf_counter() - t0
    mismatches = sum(g != otsu_exhaustive(v)[0] for g, v in zip(got, vectors))
    check(2, "otsu oracle", mismatches == 0 and elapsed < 5,
          f"{mismatches}/100 mismatches vs exhaustive scan; {elapsed:.2f}s (< 5s)")


def test_c03_score_update_optimality():
    rng = np.random.default_rng(3003)
    params = init_model(2, [16, 16], 4, seed=3003)
    for _, b in params.trunk:
        b[...] = rng.normal(scale=0.5, size=b.shape)
    params.ood_head[1][...] = 0.7
    x = rng.normal(scale=2.0, size=(50, 2))
    table = update_scores(init_scores(0, 50), params, x)
    grid = np.arange(1, 100) / 100.0
    worst_margin = np.inf
    for i in range(50):
        p = table.unlabeled_scores[i]
        at_update = score_divergence(p, p)
        alternatives = score_divergence(grid, p)
        worst_margin = min(worst_margin, float(np.min(alternatives - at_update)))
    check(3, "score-update optimality", worst_margin >= 0.0,
          f"min over 50 samples of (loss at grid point - loss at update) = {worst_margin:.3e} (>= 0)")


def test_c04_detector_reduction():
    mismatches = 0
    for i in range(100):
        rng = np.random.default_rng([i, 4004])
        params = init_model(2, [8, 8], 3, seed=i)
        x = rng.normal(scale=1.5, size=(1, 2))
        mismatches += odin_score(params, x, 1.0, 0.0).tobytes() != max_softmax_score(params, x).tobytes()
    check(4, "detector reduction", mismatches == 0, f"{mismatches}/100 inputs differ bitwise")


def test_c05_auroc_oracle():
    mismatches = 0
    for i in range(100):
        rng = np.random.default_rng([i, 5005])
        n = int(rng.integers(2, 51))
        labels = np.zeros(n, dtype=bool)
        labels[rng.choice(n, size=int(rng.integers(1, n)), replace=False)] = True
        scores = rng.integers(0, 8, size=n) / 7.0 if i % 2 else rng.normal(size=n)
        mismatches += auroc(scores, labels) != auroc_pairs(scores, labels)
    check(5, "auroc oracle", mismatches == 0, f"{mismatches}/100 instances differ from pair counting")


# -- desk-scale training criteria -------------------------------------------

@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_sweep")
    spec = ExperimentSpec(seeds=SEEDS, out=out)
    results = {}
    code, path = sweep_ood_count(spec, SWEEP_COUNTS, results=results)
    assert code == 0
    return {"rows": read_sweep(path), "runs": results}


@pytest.fixture(scope="module")
def clean(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_clean")
    spec = ExperimentSpec(task=TaskConfig(n_ood=0), seeds=SEEDS, mode="baseline_no_filter", out=out)
    results = {}
    assert run_experiment(spec, results=results) == 0
    return [results["baseline_no_filter", s] for s in SEEDS]


def test_c06_detection_quality(sweep):
    runs = [sweep["runs"][DEFAULT_COUNT, "ours", s] for s in SEEDS]
    ok = [r["final_precision"] >= 0.95 and r["final_recall"] >= 0.90 for r in runs]
    slow = max(r["wall_seconds"] for r in runs)
    detail = ", ".join(f"s{s} P={r['final_precision']:.3f} R={r['final_recall']:.3f}" for s, r in zip(SEEDS, runs))
    check(6, "desk-scale detection quality", sum(ok) >= 2 and slow < 300,
          f"{detail}; {sum(ok)}/3 seeds meet P>=0.95, R>=0.90 (need 2); slowest seed {slow:.0f}s (< 300s)")


def test_c07_desk_auroc(sweep):
    runs = [sweep["runs"][DEFAULT_COUNT, "ours", s] for s in SEEDS]
    ok = [r["auroc_learned"] >= 0.98 and r["auroc_learned"] > r["auroc_msp"] and r["auroc_learned"] > r["auroc_odin"]
          for r in runs]
    detail = ", ".join(f"s{s} learned={r['auroc_learned']:.4f} msp={r['auroc_msp']:.4f} odin={r['auroc_odin']:.4f}"
                       for s, r in zip(SEEDS, runs))
    check(7, "desk-scale AUROC", all(ok), f"{detail}; need learned >= 0.98 and above both baselines on every seed")


def test_c08_curriculum_benefit(sweep, clean):
    ours = np.mean([sweep["runs"][DEFAULT_COUNT, "ours", s]["checkpoint_mean_accuracy"] for s in SEEDS])
    base = np.mean([sweep["runs"][DEFAULT_COUNT, "baseline_no_filter", s]["checkpoint_mean_accuracy"] for s in SEEDS])
    ref = np.mean([r["checkpoint_mean_accuracy"] for r in clean])
    gain, gap = ours - base, abs(ours - ref)
    check(8, "curriculum benefit", gain >= 0.02 and gap <= 0.02,
          f"ours {ours:.4f}, baseline {base:.4f}, clean {ref:.4f}; "
          f"ours-baseline {100 * gain:+.2f} pts (need >= +2), |ours-clean| {100 * gap:.2f} pts (need <= 2)")


def test_c09_contamination_monotonicity(sweep):
    rows = sorted(sweep["rows"], key=lambda r: r["count"])
    base = [r["baseline"] for r in rows]
    ours = [r["ours"] for r in rows]
    worst_rise = max(b - a for a, b in zip(base, base[1:]))
    spread = max(ours) - min(ours)
    table = "; ".join(f"{r['count']}: base {r['baseline']:.4f} ours {r['ours']:.4f}" for r in rows)
    check(9, "contamination monotonicity", worst_rise <= 0.01 and spread <= 0.02,
          f"{table}; largest baseline rise {100 * worst_rise:+.2f} pts (need <= 1), "
          f"ours range {100 * spread:.2f} pts (need <= 2)")


# -- schedule and determinism -----------------------------------------------

def test_c10_schedule_fidelity():
    ds = make_task(TaskConfig(), seed=10)
    cfg = replace(TrainConfig(seed=10), multitask_epochs=2)
    tr = Trainer(cfg, ds.training_view(), "ours", EvalMonitor.from_dataset(ds))
    problems = []

    def watch(t, rec):
        e = rec["epoch"]
        if t.table.labeled_scores.tobytes() != np.zeros_like(t.table.labeled_scores).tobytes():
            problems.append(f"labeled scores nonzero at epoch {e}")
        ones = np.ones_like(t.table.unlabeled_scores).tobytes()
        if e < cfg.score_update_start_epoch and t.table.unlabeled_scores.tobytes() != ones:
            problems.append(f"unlabeled scores moved at epoch {e}")
        if rec["phase"] == "warmup" and t.ssl_evaluations:
            problems.append(f"{t.ssl_evaluations} SSL evaluations during warmup epoch {e}")

    tr.epoch_callbacks.append(watch)
    tr.fit()
    # scores that selection sees at the start of each epoch
    for e in range(cfg.score_update_start_epoch):
        if tr.history.score_snapshots[e].tobytes() != np.ones(ds.unlabeled_x.shape[0]).tobytes():
            problems.append(f"scores entering epoch {e} are not all 1.0")
    check(10, "schedule fidelity", not problems,
          "; ".join(problems) if problems else
          f"scores 1.0 through epoch {cfg.score_update_start_epoch - 1}, labeled 0.0 every epoch, "
          f"0 SSL evaluations in {cfg.warmup_epochs} warmup epochs")


def test_c11_determinism(tmp_path):
    doc = {"warmup_epochs": 6, "score_update_start_epoch": 3, "multitask_epochs": 4,
           "iterations_per_epoch": 30, "seeds": [0, 1]}
    outs = []
    for name in ("a", "b"):
        spec = ExperimentSpec.from_flat(doc, out=str(tmp_path / name))
        assert run_experiment(spec) == 0
        outs.append(spec.out)
    differing = [f"ours/{s}" for s in (0, 1)
                 if (outs[0] / "ours" / str(s) / "history.csv").read_bytes()
                 != (outs[1] / "ours" / str(s) / "history.csv").read_bytes()]
    check(11, "determinism", not differing,
          f"history CSVs differ for {differing}" if differing else "2 seeds, history CSVs byte-identical")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
