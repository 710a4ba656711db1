"""Small dense classifiers over a flat parameter vector.

A model is a ``ModelSpec`` (architecture) plus a flat float64 ``theta``
holding every weight matrix and bias in layer order. Keeping parameters flat
makes it trivial to treat the whole model as a single differentiable tensor:
training loops watch one vector, gradient steps are vector arithmetic, and
the forward pass slices/reshapes on the tape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a linear or relu-MLP classifier.

    Empty ``hidden_dims`` gives a plain linear softmax model.
    """

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    num_classes: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be positive, got {self.input_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden dims must be positive, got {self.hidden_dims}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(sizes[:-1], sizes[1:]))

    def layout(self) -> list[tuple[int, int, int, int, int]]:
        """Per layer: (w_start, w_stop, b_stop, fan_in, fan_out) offsets into theta."""
        out = []
        pos = 0
        for fan_in, fan_out in self.layer_dims():
            w_stop = pos + fan_in * fan_out
            b_stop = w_stop + fan_out
            out.append((pos, w_stop, b_stop, fan_in, fan_out))
            pos = b_stop
        return out

    @property
    def param_count(self) -> int:
        return sum((fi + 1) * fo for fi, fo in self.layer_dims())


@dataclass(frozen=True)
class ModelParams:
    spec: ModelSpec
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64)
        if theta.ndim != 1 or theta.size != self.spec.param_count:
            raise ValueError(
                f"theta has {theta.size} entries, spec needs {self.spec.param_count}"
            )
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta contains non-finite entries")
        object.__setattr__(self, "theta", theta)


def init_model(spec: ModelSpec, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in spec.layer_dims():
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return ModelParams(spec, np.concatenate(parts))


def forward_logits_flat(spec: ModelSpec, theta: Tensor, X) -> Tensor:
    """Forward pass with a (possibly tape-watched) flat parameter tensor."""
    X = X if isinstance(X, Tensor) else Tensor(X)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ad.TensorError(
            f"input has shape {X.shape}, model expects (batch, {spec.input_dim})"
        )
    h = X
    layers = spec.layout()
    for i, (w_start, w_stop, b_stop, fan_in, fan_out) in enumerate(layers):
        W = ad.reshape(ad.slice1d(theta, w_start, w_stop), (fan_in, fan_out))
        b = ad.slice1d(theta, w_stop, b_stop)
        h = ad.add(ad.matmul(h, W), b)
        if i < len(layers) - 1:
            h = ad.relu(h)
    return h


def forward_logits(model: ModelParams, X) -> Tensor:
    return forward_logits_flat(model.spec, Tensor(model.theta), X)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ValueError(f"labels must be a 1-d vector, got shape {y.shape}")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{y.min()}, {y.max()}]"
        )
    return y


def per_example_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Vector of -log softmax(logits)[label] per row, log-sum-exp stabilized."""
    y = _check_labels(labels, logits.shape[1])
    if y.size != logits.shape[0]:
        raise ValueError(f"{logits.shape[0]} rows of logits but {y.size} labels")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(y.size), y] = 1.0
    picked = ad.tsum(ad.mul(ad.log_softmax(logits), Tensor(onehot)), axis=1)
    return ad.scale(picked, -1.0)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return ad.tmean(per_example_cross_entropy(logits, labels))


def per_example_squared_error(logits: Tensor, labels) -> Tensor:
    """0.5 * ||logits - onehot(label)||^2 per row (least-squares head)."""
    y = _check_labels(labels, logits.shape[1])
    if y.size != logits.shape[0]:
        raise ValueError(f"{logits.shape[0]} rows of logits but {y.size} labels")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(y.size), y] = 1.0
    diff = ad.sub(logits, Tensor(onehot))
    return ad.scale(ad.tsum(ad.mul(diff, diff), axis=1), 0.5)


def accuracy(model: ModelParams, X, y) -> float:
    """Fraction of argmax(logits) == label; argmax ties go to the lowest class."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("accuracy is undefined on an empty dataset")
    y = _check_labels(y, model.spec.num_classes)
    logits = forward_logits(model, X).data
    return float(np.mean(np.argmax(logits, axis=1) == y))


def grow_head(model: ModelParams, new_num_classes: int, seed: int) -> ModelParams:
    """Append freshly initialized output columns for newly arrived classes.

    Hidden layers and existing output columns are copied unchanged; new
    output weights use the init_model distribution, new biases are zero.
    """
    old = model.spec
    if new_num_classes < old.num_classes:
        raise ValueError(
            f"cannot shrink the head from {old.num_classes} to {new_num_classes}"
        )
    if new_num_classes == old.num_classes:
        return model
    new_spec = ModelSpec(old.input_dim, old.hidden_dims, new_num_classes, old.activation)
    rng = np.random.default_rng(seed)
    theta = np.zeros(new_spec.param_count)
    old_layout, new_layout = old.layout(), new_spec.layout()
    for i, ((ows, owe, obe, ofi, ofo), (nws, nwe, nbe, nfi, nfo)) in enumerate(
        zip(old_layout, new_layout)
    ):
        W_old = model.theta[ows:owe].reshape(ofi, ofo)
        b_old = model.theta[owe:obe]
        if nfo == ofo:
            W_new, b_new = W_old, b_old
        else:
            bound = 1.0 / np.sqrt(nfi)
            W_new = np.concatenate(
                [W_old, rng.uniform(-bound, bound, size=(nfi, nfo - ofo))], axis=1
            )
            b_new = np.concatenate([b_old, np.zeros(nfo - ofo)])
        theta[nws:nwe] = W_new.reshape(-1)
        theta[nwe:nbe] = b_new
    return ModelParams(new_spec, theta)


def model_to_dict(model: ModelParams) -> dict:
    return {
        "spec": {
            "input_dim": model.spec.input_dim,
            "hidden_dims": list(model.spec.hidden_dims),
            "num_classes": model.spec.num_classes,
            "activation": model.spec.activation,
        },
        "theta": model.theta.tolist(),
    }


def model_from_dict(doc: dict) -> ModelParams:
    spec = ModelSpec(
        input_dim=int(doc["spec"]["input_dim"]),
        hidden_dims=tuple(doc["spec"]["hidden_dims"]),
        num_classes=int(doc["spec"]["num_classes"]),
        activation=doc["spec"].get("activation", "relu"),
    )
    return ModelParams(spec, np.asarray(doc["theta"], dtype=np.float64))


def save_model(model: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)), encoding="utf-8")


def load_model(path) -> ModelParams:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
