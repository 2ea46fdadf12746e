"""Dual-head MLP: a shared trunk feeding a K-way class head and a scalar OOD head."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Value

ACTIVATIONS = {"tanh": dc.tanh, "relu": dc.relu}


@dataclass
class ModelParams:
    """Network weights.  Each layer is a ``(W, b)`` pair with ``W`` of shape (fan_in, fan_out)."""

    trunk: list[tuple[np.ndarray, np.ndarray]]
    class_head: tuple[np.ndarray, np.ndarray]
    ood_head: tuple[np.ndarray, np.ndarray]
    activation: str = "tanh"

    @property
    def input_dim(self) -> int:
        first = self.trunk[0][0] if self.trunk else self.class_head[0]
        return first.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_head[0].shape[1]

    @property
    def hidden_widths(self) -> list[int]:
        return [W.shape[1] for W, _ in self.trunk]

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed order; these are the live buffers."""
        out = []
        for W, b in self.trunk:
            out += [W, b]
        out += list(self.class_head)
        out += list(self.ood_head)
        return out

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)


@dataclass
class ModelOutput:
    class_logits: Value
    class_probs: Value
    ood_logit: Value
    ood_score: Value
    leaves: list[Value] = field(default_factory=list, repr=False)


def init_model(input_dim: int, hidden_widths: list[int], K: int, seed: int,
               activation: str = "tanh") -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    if input_dim < 1:
        raise ValueError(f"input_dim must be >= 1, got {input_dim}")
    if K < 2:
        raise ValueError(f"need at least 2 classes, got K={K}")
    if any(w < 1 for w in hidden_widths):
        raise ValueError(f"hidden widths must be positive, got {hidden_widths}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)

    trunk = []
    width = input_dim
    for h in hidden_widths:
        trunk.append(dense(width, h))
        width = h
    class_head = dense(width, K)
    ood_head = dense(width, 1)
    return ModelParams(trunk, class_head, ood_head, activation)


def leaves_for(params: ModelParams) -> list[Value]:
    return [Value(a) for a in params.arrays()]


def forward(params: ModelParams, batch, leaves: list[Value] | None = None) -> ModelOutput:
    """Run the network on an (n, d) batch.

    ``leaves`` lets several forward passes share one set of parameter nodes so
    that a single backward accumulates gradients from all of them.  ``batch``
    may itself be a :class:`Value` when input gradients are needed.
    """
    x = batch if isinstance(batch, Value) else Value(np.atleast_2d(np.asarray(batch, dtype=np.float64)))
    if x.data.ndim != 2 or x.shape[1] != params.input_dim:
        raise dc.ShapeError(
            f"forward: expected batch of shape (n, {params.input_dim}), got {x.shape}")
    if leaves is None:
        leaves = leaves_for(params)
    act = ACTIVATIONS[params.activation]
    h = x
    i = 0
    for _ in params.trunk:
        h = act(h @ leaves[i] + leaves[i + 1])
        i += 2
    logits = h @ leaves[i] + leaves[i + 1]
    ood_logit = h @ leaves[i + 2] + leaves[i + 3]
    return ModelOutput(
        class_logits=logits,
        class_probs=dc.softmax(logits),
        ood_logit=ood_logit,
        ood_score=dc.sigmoid(ood_logit),
        leaves=leaves,
    )


def predict(params: ModelParams, batch) -> tuple[np.ndarray, np.ndarray]:
    """Plain arrays ``(class_probs, ood_score)`` for evaluation; no graph kept."""
    out = forward(params, batch)
    return out.class_probs.data, out.ood_score.data[:, 0]


def collect_grads(params: ModelParams, leaves: list[Value]) -> list[np.ndarray]:
    """Gradients in ``params.arrays()`` order, zeros where nothing flowed."""
    return [np.zeros_like(a) if v.grad is None else v.grad
            for a, v in zip(params.arrays(), leaves)]


def save_params(params: ModelParams, path) -> None:
    """Write an ``.npz`` holding every array plus a JSON shape manifest."""
    arrays = {f"p{i:03d}": a for i, a in enumerate(params.arrays())}
    manifest = {
        "activation": params.activation,
        "hidden_widths": params.hidden_widths,
        "input_dim": params.input_dim,
        "num_classes": params.num_classes,
        "shapes": [list(a.shape) for a in params.arrays()],
    }
    with open(path, "wb") as fh:
        np.savez(fh, manifest=np.array(json.dumps(manifest)), **arrays)


def load_params(path) -> ModelParams:
    with np.load(Path(path), allow_pickle=False) as z:
        manifest = json.loads(str(z["manifest"]))
        arrays = [z[f"p{i:03d}"].astype(np.float64) for i in range(len(manifest["shapes"]))]
    for a, shape in zip(arrays, manifest["shapes"]):
        if list(a.shape) != shape:
            raise ValueError(f"checkpoint array shape {a.shape} does not match manifest {shape}")
    n_trunk = len(manifest["hidden_widths"])
    trunk = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(n_trunk)]
    k = 2 * n_trunk
    return ModelParams(trunk, (arrays[k], arrays[k + 1]), (arrays[k + 2], arrays[k + 3]),
                       manifest["activation"])
