"""Synthetic open-set datasets and additive-noise augmentation.

In-distribution data are K Gaussian blobs whose means sit on a sphere of
radius 1 around ``center``. The default task puts that sphere next to the
unit noise box rather than around it: noise placed inside the ring is
trivially rejected by max-softmax, while noise off to one side is
confidently absorbed by the nearest class, which is the failure the OOD
head is meant to fix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

OOD_KINDS = ("uniform", "gaussian", "shifted_cluster")
BOX_CENTER = 0.5


def class_means(K: int, d: int, seed: int, radius: float = 1.0, center: float = BOX_CENTER) -> np.ndarray:
    """K points on a sphere of ``radius`` around ``center``.

    In two dimensions the means are evenly spaced around the circle with a
    seeded phase; in higher dimensions they are seeded random directions.
    """
    rng = np.random.default_rng(seed)
    if d == 2:
        phase = rng.uniform(0.0, 2 * np.pi)
        ang = phase + 2 * np.pi * np.arange(K) / K
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        dirs = rng.normal(size=(K, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return center + radius * dirs


def gen_id_blobs(K: int, n_per_class: int, d: int, spread: float, seed: int,
                 center: float = BOX_CENTER) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(x, y)`` with ``n_per_class`` isotropic Gaussian samples per class."""
    if K < 2:
        raise ValueError(f"need K >= 2, got {K}")
    if d < 2:
        raise ValueError(f"need d >= 2, got {d}")
    if spread <= 0:
        raise ValueError(f"spread must be positive, got {spread}")
    if n_per_class < 0:
        raise ValueError(f"n_per_class must be >= 0, got {n_per_class}")
    means = class_means(K, d, seed, center=center)
    rng = np.random.default_rng([seed, 1])
    y = np.repeat(np.arange(K), n_per_class)
    x = means[y] + spread * rng.normal(size=(y.size, d))
    return x, y


def gen_ood(kind: str, n: int, d: int, seed: int, id_center: float = 0.0) -> np.ndarray:
    """Outlier inputs of the requested ``kind``; shape ``(n, d)``.

    ``id_center`` only matters for ``shifted_cluster``, which is placed at
    distance 3 from it in a seeded direction.
    """
    if kind not in OOD_KINDS:
        raise ValueError(f"unknown OOD kind {kind!r}; expected one of {OOD_KINDS}")
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    rng = np.random.default_rng([seed, 2])
    if kind == "uniform":
        return rng.uniform(0.0, 1.0, size=(n, d))
    if kind == "gaussian":
        return np.clip(rng.normal(0.5, 1.0, size=(n, d)), 0.0, 1.0)
    direction = rng.normal(size=d)
    direction /= np.linalg.norm(direction)
    return id_center + 3.0 * direction + 0.3 * rng.normal(size=(n, d))


def augment(x: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Additive isotropic Gaussian jitter with standard deviation ``strength``."""
    if strength < 0:
        raise ValueError(f"strength must be >= 0, got {strength}")
    x = np.asarray(x, dtype=np.float64)
    if strength == 0:
        return x.copy()
    return x + strength * rng.normal(size=x.shape)


@dataclass(frozen=True)
class TrainingView:
    """What the training loop is allowed to see: no hidden truth, no test set."""

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    num_classes: int

    @property
    def input_dim(self) -> int:
        return self.labeled_x.shape[1]


@dataclass
class OpenSetDataset:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    hidden_is_ood: np.ndarray
    hidden_y: np.ndarray  # -1 for outliers
    test_x: np.ndarray
    test_y: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return int(self.meta["K"])

    @property
    def input_dim(self) -> int:
        return int(self.meta["d"])

    def training_view(self) -> TrainingView:
        return TrainingView(self.labeled_x, self.labeled_y, self.unlabeled_x, self.num_classes)


def _balanced_counts(n: int, K: int, rng: np.random.Generator) -> np.ndarray:
    counts = np.full(K, n // K)
    extra = rng.choice(K, size=n % K, replace=False)
    counts[extra] += 1
    return counts


def make_split(id_pool: tuple[np.ndarray, np.ndarray], ood_pool: np.ndarray,
               n_labeled: int, n_test: int, seed: int, K: int | None = None) -> OpenSetDataset:
    """Class-balanced labeled and test splits; everything else becomes unlabeled."""
    x, y = id_pool
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    ood_pool = np.asarray(ood_pool, dtype=np.float64).reshape(-1, x.shape[1])
    K = int(y.max()) + 1 if K is None else K
    required = n_labeled + n_test + 1
    if x.shape[0] < required:
        raise ValueError(
            f"id_pool too small: need at least {required} samples "
            f"({n_labeled} labeled + {n_test} test + 1 unlabeled), have {x.shape[0]}")
    rng = np.random.default_rng([seed, 3])
    lab_counts = _balanced_counts(n_labeled, K, rng)
    test_counts = _balanced_counts(n_test, K, rng)
    lab_idx, test_idx = [], []
    for c in range(K):
        members = rng.permutation(np.flatnonzero(y == c))
        need = lab_counts[c] + test_counts[c]
        if members.size < need:
            raise ValueError(
                f"class {c} has {members.size} samples but labeled+test split needs {need}")
        lab_idx.append(members[:lab_counts[c]])
        test_idx.append(members[lab_counts[c]:need])
    lab_idx = np.concatenate(lab_idx)
    test_idx = np.concatenate(test_idx)
    used = np.zeros(x.shape[0], dtype=bool)
    used[lab_idx] = True
    used[test_idx] = True
    rest = np.flatnonzero(~used)

    ul_x = np.concatenate([x[rest], ood_pool])
    ul_ood = np.concatenate([np.zeros(rest.size, dtype=bool), np.ones(ood_pool.shape[0], dtype=bool)])
    ul_y = np.concatenate([y[rest], np.full(ood_pool.shape[0], -1)])
    perm = rng.permutation(ul_x.shape[0])
    lab_perm = rng.permutation(lab_idx)
    test_perm = rng.permutation(test_idx)
    meta = {
        "K": K, "d": int(x.shape[1]), "seed": seed,
        "n_labeled": int(lab_idx.size), "n_test": int(test_idx.size),
        "n_unlabeled": int(ul_x.shape[0]), "n_unlabeled_id": int(rest.size),
        "n_unlabeled_ood": int(ood_pool.shape[0]),
    }
    return OpenSetDataset(
        labeled_x=x[lab_perm], labeled_y=y[lab_perm],
        unlabeled_x=ul_x[perm], hidden_is_ood=ul_ood[perm], hidden_y=ul_y[perm],
        test_x=x[test_perm], test_y=y[test_perm], meta=meta,
    )


@dataclass
class TaskConfig:
    """Parameters of a synthetic open-set task; defaults are the desk-scale setting."""

    K: int = 4
    d: int = 2
    spread: float = 0.5
    n_labeled: int = 24
    n_unlabeled_id: int = 2000
    n_ood: int = 500
    n_test: int = 400
    ood_kind: str = "uniform"
    center: float = -2.0

    def __post_init__(self):
        for name in ("K", "d", "n_labeled", "n_unlabeled_id", "n_ood", "n_test"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ValueError(f"{name} must be an integer, got {v!r}")
        if self.K < 2 or self.d < 2:
            raise ValueError(f"need K >= 2 and d >= 2, got K={self.K}, d={self.d}")
        if min(self.n_labeled, self.n_unlabeled_id, self.n_ood, self.n_test) < 0:
            raise ValueError("sample counts must be non-negative")
        if not isinstance(self.spread, (int, float)) or self.spread <= 0:
            raise ValueError(f"spread must be a positive number, got {self.spread!r}")
        if self.ood_kind not in OOD_KINDS:
            raise ValueError(f"unknown OOD kind {self.ood_kind!r}; expected one of {OOD_KINDS}")


def make_task(task: TaskConfig, seed: int) -> OpenSetDataset:
    """Generate blobs and outliers and split them with a single seed."""
    total_id = task.n_labeled + task.n_test + task.n_unlabeled_id
    per_class = -(-total_id // task.K)
    x, y = gen_id_blobs(task.K, per_class, task.d, task.spread, seed, center=task.center)
    # trim the rounding surplus so the unlabeled ID count is exact
    rng = np.random.default_rng([seed, 4])
    surplus = per_class * task.K - total_id
    if surplus:
        drop = rng.choice(x.shape[0], size=surplus, replace=False)
        keep = np.setdiff1d(np.arange(x.shape[0]), drop)
        x, y = x[keep], y[keep]
    ood = gen_ood(task.ood_kind, task.n_ood, task.d, seed, id_center=task.center)
    ds = make_split((x, y), ood, task.n_labeled, task.n_test, seed, K=task.K)
    ds.meta.update(spread=task.spread, ood_kind=task.ood_kind, center=task.center)
    return ds


def export_csv(ds: OpenSetDataset, path) -> None:
    d = ds.input_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split"] + [f"x_{j}" for j in range(d)] + ["y", "hidden_is_ood"])
        for xi, yi in zip(ds.labeled_x, ds.labeled_y):
            w.writerow(["labeled"] + [repr(float(v)) for v in xi] + [int(yi), ""])
        for xi, ood in zip(ds.unlabeled_x, ds.hidden_is_ood):
            w.writerow(["unlabeled"] + [repr(float(v)) for v in xi] + ["", int(ood)])
        for xi, yi in zip(ds.test_x, ds.test_y):
            w.writerow(["test"] + [repr(float(v)) for v in xi] + [int(yi), ""])


def import_csv(path, K: int | None = None) -> OpenSetDataset:
    rows = {"labeled": [], "unlabeled": [], "test": []}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        d = sum(1 for h in header if h.startswith("x_"))
        for row in r:
            if row[0] not in rows:
                raise ValueError(f"unknown split {row[0]!r} in {path}")
            rows[row[0]].append(row)

    def xs(rs):
        return np.array([[float(v) for v in row[1:1 + d]] for row in rs]).reshape(-1, d)

    labeled_y = np.array([int(row[1 + d]) for row in rows["labeled"]], dtype=np.int64)
    test_y = np.array([int(row[1 + d]) for row in rows["test"]], dtype=np.int64)
    is_ood = np.array([row[2 + d] == "1" for row in rows["unlabeled"]], dtype=bool)
    if K is None:
        K = int(max(labeled_y.max(initial=-1), test_y.max(initial=-1))) + 1
    meta = {
        "K": K, "d": d, "n_labeled": len(rows["labeled"]), "n_test": len(rows["test"]),
        "n_unlabeled": len(rows["unlabeled"]), "n_unlabeled_id": int((~is_ood).sum()),
        "n_unlabeled_ood": int(is_ood.sum()),
    }
    return OpenSetDataset(
        labeled_x=xs(rows["labeled"]), labeled_y=labeled_y,
        unlabeled_x=xs(rows["unlabeled"]), hidden_is_ood=is_ood,
        hidden_y=np.full(is_ood.size, -1), test_x=xs(rows["test"]), test_y=test_y, meta=meta,
    )
