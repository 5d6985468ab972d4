"""Single-step gradient attacks bounded in l-infinity or l2 norm.

The perturbation moves each input by epsilon along the sign (linf) or the
normalized direction (l2) of the input-gradient of the cross-entropy at the
sample's own true label. epsilon = 0 is the identity. Perturbed features are
not clipped to [0, 1]: the threat model is a pure norm ball, and clipping
would silently shrink epsilon (an optional flag restores clipping).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .dataio import LabeledDataset
from .model import Classifier, grad_input_batch

__all__ = [
    "AttackSpec",
    "perturb",
    "perturb_batch",
    "attack_dataset",
    "parse_epsilon",
    "format_epsilon",
]

NORMS = ("linf", "l2")

# below this l2 gradient norm the attack direction is undefined; return x
ZERO_GRAD_TOL = 1e-12


@dataclass(frozen=True)
class AttackSpec:
    """Norm kind ('linf' or 'l2') and strength epsilon >= 0."""

    norm: str
    epsilon: float

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        eps = float(self.epsilon)
        if not (np.isfinite(eps) and eps >= 0.0):
            raise ValueError(f"epsilon must be finite and >= 0, got {eps!r}")
        object.__setattr__(self, "epsilon", eps)


def parse_epsilon(text: str) -> float:
    """Parse an epsilon string: 'k/255' rationals or plain decimals.

    'k/255' evaluates as float(k) / 255.0, the exact binary rounding of the
    rational, so serialized values round-trip bit-exactly.
    """
    text = text.strip()
    if "/" in text:
        num, _, den = text.partition("/")
        value = float(Fraction(int(num), int(den)))
    else:
        value = float(text)
    if value < 0:
        raise ValueError(f"epsilon must be >= 0, got {text!r}")
    return value


def format_epsilon(eps: float) -> str:
    """Serialize epsilon as 'k/255' when exactly representable, else decimal."""
    k = round(eps * 255.0)
    if k >= 0 and float(k) / 255.0 == eps:
        return f"{k}/255"
    return repr(float(eps))


def perturb_batch(
    model: Classifier, X: np.ndarray, y, spec: AttackSpec
) -> np.ndarray:
    """Attack each row of X at its own true label; rows stay within the ball."""
    X = np.asarray(X, dtype=np.float64)
    if spec.epsilon == 0.0:
        return X.copy()
    g = grad_input_batch(model, X, y)
    if spec.norm == "linf":
        return X + spec.epsilon * np.sign(g)
    norms = np.linalg.norm(g, axis=1)
    safe = np.maximum(norms, ZERO_GRAD_TOL)
    scale = np.where(norms < ZERO_GRAD_TOL, 0.0, spec.epsilon / safe)
    return X + g * scale[:, None]


def perturb(model: Classifier, x: np.ndarray, y: int, spec: AttackSpec) -> np.ndarray:
    """Single-sample attack; see :func:`perturb_batch`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"x must be a vector, got shape {x.shape}")
    return perturb_batch(model, x[None, :], np.asarray([y]), spec)[0]


def attack_dataset(
    model: Classifier,
    ds: LabeledDataset,
    indices,
    spec: AttackSpec,
    clip_unit_box: bool = False,
) -> LabeledDataset:
    """Return a copy of ds with the selected samples adversarially perturbed.

    Labels and sample order are unchanged; unselected rows are copied as is.
    ``clip_unit_box`` optionally clamps perturbed rows to [0, 1] for image
    data (off by default, see module docstring).
    """
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= ds.n_samples):
        raise IndexError("attack index out of range")
    features = ds.features.copy()
    if indices.size:
        perturbed = perturb_batch(model, ds.features[indices], ds.labels[indices], spec)
        if clip_unit_box:
            perturbed = np.clip(perturbed, 0.0, 1.0)
        features[indices] = perturbed
    return LabeledDataset(
        features=features, labels=ds.labels.copy(), num_classes=ds.num_classes
    )
