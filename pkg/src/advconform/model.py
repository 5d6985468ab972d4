"""Dense softmax classifier with exact analytic gradients.

The architecture is a linear softmax model or a single hidden rectifier
layer followed by softmax; gradients are available with respect to the
parameters (for training) and the input (for attacks and sensitivity
estimates). Batched variants of every operation take an (n, d) matrix and
are the workhorses for training and calibration at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Classifier",
    "ForwardTrace",
    "init_classifier",
    "forward",
    "forward_batch",
    "forward_trace",
    "loss",
    "loss_batch",
    "grad_params",
    "grad_params_batch",
    "grad_input",
    "grad_input_batch",
    "grad_prob_input",
    "grad_prob_input_batch",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
]

CHECKPOINT_FORMAT = "advconform-model-v1"


@dataclass(frozen=True)
class Classifier:
    """Layer parameters of a dense softmax network.

    ``weights[i]`` has shape (out_i, in_i) and ``biases[i]`` shape (out_i,).
    One layer is a linear model; two layers insert a rectifier between them.
    The final output width is the class count.
    """

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")
        if len(self.weights) not in (1, 2):
            raise ValueError("architecture is linear or one hidden layer")
        ws, bs = [], []
        prev_out = None
        for w, b in zip(self.weights, self.biases):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"bad layer shapes {w.shape} / {b.shape}")
            if prev_out is not None and w.shape[1] != prev_out:
                raise ValueError("consecutive layer dimensions do not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError("parameters must be finite")
            prev_out = w.shape[0]
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_width(self) -> int:
        return 0 if len(self.weights) == 1 else self.weights[0].shape[0]


@dataclass(frozen=True)
class ForwardTrace:
    """Pre-activations and activations of one forward pass."""

    pre_activations: tuple[np.ndarray, ...]
    activations: tuple[np.ndarray, ...]
    probs: np.ndarray

    def __post_init__(self):
        total = float(np.sum(self.probs))
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total!r}, not 1")


def init_classifier(
    in_dim: int, num_classes: int, hidden: int = 0, seed: int = 0
) -> Classifier:
    """Random Gaussian init, scaled by fan-in; biases start at zero."""
    if in_dim < 1 or num_classes < 2 or hidden < 0:
        raise ValueError("need in_dim >= 1, num_classes >= 2, hidden >= 0")
    rng = np.random.default_rng(seed)
    shapes = (
        [(num_classes, in_dim)]
        if hidden == 0
        else [(hidden, in_dim), (num_classes, hidden)]
    )
    weights = [rng.standard_normal(s) / np.sqrt(s[1]) for s in shapes]
    biases = [np.zeros(s[0]) for s in shapes]
    return Classifier(weights=tuple(weights), biases=tuple(biases))


def _check_input(model: Classifier, x: np.ndarray, batched: bool) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    expected_ndim = 2 if batched else 1
    if x.ndim != expected_ndim or x.shape[-1] != model.in_dim:
        raise ValueError(
            f"input shape {x.shape} incompatible with model input width {model.in_dim}"
        )
    return x


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1)
    return m + np.log(np.exp(logits - m[..., None]).sum(axis=-1))


def _forward_parts(model: Classifier, X: np.ndarray):
    """Return (hidden pre-activation or None, hidden activation or None, logits)."""
    if len(model.weights) == 1:
        logits = X @ model.weights[0].T + model.biases[0]
        return None, None, logits
    z1 = X @ model.weights[0].T + model.biases[0]
    h = np.maximum(z1, 0.0)
    logits = h @ model.weights[1].T + model.biases[1]
    return z1, h, logits


def forward_batch(model: Classifier, X: np.ndarray) -> np.ndarray:
    """Class probabilities for each row of X, shape (n, K)."""
    X = _check_input(model, X, batched=True)
    return _softmax(_forward_parts(model, X)[2])


def forward(model: Classifier, x: np.ndarray) -> np.ndarray:
    """Class probability vector for a single input."""
    x = _check_input(model, x, batched=False)
    return forward_batch(model, x[None, :])[0]


def forward_trace(model: Classifier, x: np.ndarray) -> ForwardTrace:
    """Forward pass retaining per-layer pre-activations and activations."""
    x = _check_input(model, x, batched=False)
    z1, h, logits = _forward_parts(model, x[None, :])
    probs = _softmax(logits)[0]
    if z1 is None:
        return ForwardTrace(
            pre_activations=(logits[0],), activations=(probs,), probs=probs
        )
    return ForwardTrace(
        pre_activations=(z1[0], logits[0]), activations=(h[0], probs), probs=probs
    )


def _check_labels(model: Classifier, y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape}, expected ({n},)")
    if y.size and (y.min() < 0 or y.max() >= model.num_classes):
        raise ValueError("label out of range")
    return y


def loss_batch(model: Classifier, X: np.ndarray, y) -> np.ndarray:
    """Per-sample cross-entropy -log f_y(x), computed via log-sum-exp."""
    X = _check_input(model, X, batched=True)
    y = _check_labels(model, y, X.shape[0])
    logits = _forward_parts(model, X)[2]
    return _logsumexp(logits) - logits[np.arange(X.shape[0]), y]


def loss(model: Classifier, x: np.ndarray, y: int) -> float:
    """Cross-entropy of a single sample."""
    x = _check_input(model, x, batched=False)
    return float(loss_batch(model, x[None, :], np.asarray([y]))[0])


def _backprop_to_input(model: Classifier, X, z1, dlogits):
    """Map a gradient at the logits back to the input, shape (n, d)."""
    if len(model.weights) == 1:
        return dlogits @ model.weights[0]
    dh = dlogits @ model.weights[1]
    dz1 = dh * (z1 > 0.0)  # rectifier subgradient at 0 is 0
    return dz1 @ model.weights[0]


def grad_params_batch(model: Classifier, X: np.ndarray, y) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradient of the mean cross-entropy over the batch, parameter-shaped."""
    X = _check_input(model, X, batched=True)
    y = _check_labels(model, y, X.shape[0])
    n = X.shape[0]
    z1, h, logits = _forward_parts(model, X)
    probs = _softmax(logits)
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n
    if z1 is None:
        return [(delta.T @ X, delta.sum(axis=0))]
    dw2 = delta.T @ h
    db2 = delta.sum(axis=0)
    dz1 = (delta @ model.weights[1]) * (z1 > 0.0)
    dw1 = dz1.T @ X
    db1 = dz1.sum(axis=0)
    return [(dw1, db1), (dw2, db2)]


def grad_params(model: Classifier, x: np.ndarray, y: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Exact gradient of loss(model, x, y) w.r.t. every weight and bias."""
    x = _check_input(model, x, batched=False)
    return grad_params_batch(model, x[None, :], np.asarray([y]))


def grad_input_batch(model: Classifier, X: np.ndarray, y) -> np.ndarray:
    """Per-sample gradient of the cross-entropy w.r.t. the input, (n, d)."""
    X = _check_input(model, X, batched=True)
    y = _check_labels(model, y, X.shape[0])
    z1, _, logits = _forward_parts(model, X)
    delta = _softmax(logits)
    delta[np.arange(X.shape[0]), y] -= 1.0
    return _backprop_to_input(model, X, z1, delta)


def grad_input(model: Classifier, x: np.ndarray, y: int) -> np.ndarray:
    """Gradient of loss(model, x, y) w.r.t. x."""
    x = _check_input(model, x, batched=False)
    return grad_input_batch(model, x[None, :], np.asarray([y]))[0]


def grad_prob_input_batch(model: Classifier, X: np.ndarray, y) -> np.ndarray:
    """Per-sample gradient of the class-y probability w.r.t. the input."""
    X = _check_input(model, X, batched=True)
    y = _check_labels(model, y, X.shape[0])
    n = X.shape[0]
    z1, _, logits = _forward_parts(model, X)
    probs = _softmax(logits)
    p_y = probs[np.arange(n), y]
    dlogits = -probs * p_y[:, None]
    dlogits[np.arange(n), y] += p_y
    return _backprop_to_input(model, X, z1, dlogits)


def grad_prob_input(model: Classifier, x: np.ndarray, y: int) -> np.ndarray:
    """Gradient of f_y(x) (the probability itself, not the loss) w.r.t. x."""
    x = _check_input(model, x, batched=False)
    return grad_prob_input_batch(model, x[None, :], np.asarray([y]))[0]


def save_checkpoint(model: Classifier, path) -> None:
    """Write the model as a versioned JSON container."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "layers": [
            {"shape": list(w.shape), "weight": w.tolist(), "bias": b.tolist()}
            for w, b in zip(model.weights, model.biases)
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)


def load_checkpoint(path) -> Classifier:
    """Load a model written by :func:`save_checkpoint`."""
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(
            f"{path}: unknown checkpoint format {payload.get('format')!r}"
        )
    weights = tuple(np.asarray(layer["weight"], dtype=np.float64) for layer in payload["layers"])
    biases = tuple(np.asarray(layer["bias"], dtype=np.float64) for layer in payload["layers"])
    return Classifier(weights=weights, biases=biases)
