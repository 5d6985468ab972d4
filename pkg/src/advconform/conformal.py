"""Split conformal calibration, prediction sets, and coverage metrics.

The prediction set keeps every label whose nonconformity score is at most
the calibration quantile: C(x) = { y : S(x, y) <= Q }, equivalently
f_y(x) >= 1 - Q for the HPS score. Empty sets are allowed and reported;
ties at the boundary are included.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .attack import AttackSpec, attack_dataset
from .dataio import LabeledDataset
from .model import Classifier, forward, forward_batch

__all__ = [
    "ScoreKind",
    "CalibrationResult",
    "score",
    "conformal_quantile",
    "calibrate",
    "prediction_set",
    "evaluate",
    "save_calibration",
    "load_calibration",
]


class ScoreKind(Enum):
    """Nonconformity score family."""

    HPS = "hps"
    APS = "aps"


def _aps_scores(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """APS score of every class for each row: mass strictly above + u * own mass.

    probs: (n, K); u: (n, K) per-class uniforms. Returns (n, K).
    """
    greater_mass = np.where(
        probs[:, None, :] > probs[:, :, None], probs[:, None, :], 0.0
    ).sum(axis=2)
    return greater_mass + probs * u


def score(
    model: Classifier, x: np.ndarray, y: int, kind: ScoreKind, u: float | None = None
) -> float:
    """Nonconformity score of candidate label y at input x.

    HPS is 1 - f_y(x) and ignores u. APS adds the probability mass of classes
    ranked strictly above y plus a u-fraction of y's own mass; u is required.
    """
    probs = forward(model, x)
    if kind is ScoreKind.HPS:
        return float(1.0 - probs[y])
    if u is None:
        raise ValueError("APS score requires a uniform draw u")
    return float(probs[probs > probs[y]].sum() + probs[y] * u)


def conformal_quantile(scores, alpha: float) -> float:
    """The (1 - alpha)(1 + 1/n)-level empirical quantile of the scores.

    Returns the ceil((1 - alpha)(n + 1))-th smallest score, or +inf when the
    level exceeds 1 (small-sample fallback: the full label set).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("scores must be non-empty")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha!r}")
    n = scores.size
    t = (1.0 - alpha) * (n + 1)
    if t > n:
        return math.inf
    rank = math.ceil(t)
    return float(np.sort(scores)[rank - 1])


@dataclass(frozen=True)
class CalibrationResult:
    """Conformal threshold plus the calibration scores it came from.

    ``cal_scores`` is kept (sorted ascending) so downstream bound evaluation
    can estimate score/probability densities at the quantile.
    """

    q_hat: float
    alpha: float
    score_kind: ScoreKind
    eps_cal: float
    cal_scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.cal_scores, dtype=np.float64)
        if np.any(np.diff(scores) < 0):
            raise ValueError("cal_scores must be sorted ascending")
        if not (math.isinf(self.q_hat) or np.any(scores == self.q_hat)):
            raise ValueError("q_hat must be a calibration score or +inf")
        scores.setflags(write=False)
        object.__setattr__(self, "cal_scores", scores)


def calibrate(
    model: Classifier,
    ds: LabeledDataset,
    cal_idx,
    alpha: float,
    kind: ScoreKind = ScoreKind.HPS,
    attack: AttackSpec = AttackSpec("linf", 0.0),
    seed: int = 0,
) -> CalibrationResult:
    """Attack the calibration samples, score them, and take the conformal quantile.

    APS draws one uniform per sample from the seeded stream, in sample order.
    """
    cal_idx = np.asarray(cal_idx, dtype=np.int64)
    if cal_idx.size == 0:
        raise ValueError("empty calibration index list")
    attacked = attack_dataset(model, ds, cal_idx, attack)
    probs = forward_batch(model, attacked.features[cal_idx])
    y = attacked.labels[cal_idx]
    if kind is ScoreKind.HPS:
        scores = 1.0 - probs[np.arange(cal_idx.size), y]
    else:
        u = np.random.default_rng(seed).uniform(size=cal_idx.size)
        all_scores = _aps_scores(probs, np.repeat(u[:, None], probs.shape[1], axis=1))
        scores = all_scores[np.arange(cal_idx.size), y]
    scores = np.sort(scores)
    q_hat = conformal_quantile(scores, alpha)
    return CalibrationResult(
        q_hat=q_hat,
        alpha=alpha,
        score_kind=kind,
        eps_cal=attack.epsilon,
        cal_scores=scores,
    )


def prediction_set(
    model: Classifier,
    x: np.ndarray,
    result: CalibrationResult,
    u_vec: np.ndarray | None = None,
) -> set[int]:
    """Labels whose score is at most q_hat; all K labels when q_hat = +inf.

    ``u_vec`` supplies one uniform per class for APS scoring; HPS ignores it.
    """
    probs = forward(model, x)
    if result.score_kind is ScoreKind.HPS:
        scores = 1.0 - probs
    else:
        if u_vec is None:
            raise ValueError("APS prediction set requires per-class uniforms")
        u_vec = np.asarray(u_vec, dtype=np.float64)
        if u_vec.shape != probs.shape:
            raise ValueError(f"u_vec shape {u_vec.shape}, expected {probs.shape}")
        scores = _aps_scores(probs[None, :], u_vec[None, :])[0]
    return set(np.flatnonzero(scores <= result.q_hat).tolist())


def evaluate(
    model: Classifier,
    ds: LabeledDataset,
    test_idx,
    result: CalibrationResult,
    attack: AttackSpec = AttackSpec("linf", 0.0),
    seed: int = 0,
) -> tuple[float, float]:
    """Empirical coverage and mean prediction-set size on attacked test samples.

    APS uniforms are drawn per (sample, class) in sample-major, class-minor
    order from the seeded stream, so runs are reproducible.
    """
    test_idx = np.asarray(test_idx, dtype=np.int64)
    if test_idx.size == 0:
        raise ValueError("empty test index list")
    attacked = attack_dataset(model, ds, test_idx, attack)
    probs = forward_batch(model, attacked.features[test_idx])
    y = attacked.labels[test_idx]
    if result.score_kind is ScoreKind.HPS:
        scores = 1.0 - probs
    else:
        u = np.random.default_rng(seed).uniform(size=probs.shape)
        scores = _aps_scores(probs, u)
    member = scores <= result.q_hat
    coverage = float(np.mean(member[np.arange(test_idx.size), y]))
    mean_size = float(np.mean(member.sum(axis=1)))
    return coverage, mean_size


def save_calibration(result: CalibrationResult, path) -> None:
    """Write a calibration record as structured text (JSON)."""
    payload = {
        "alpha": result.alpha,
        "score_kind": result.score_kind.value,
        "eps_cal": result.eps_cal,
        "q_hat": result.q_hat,
        "cal_scores": result.cal_scores.tolist(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)


def load_calibration(path) -> CalibrationResult:
    """Load a calibration record written by :func:`save_calibration`."""
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    return CalibrationResult(
        q_hat=float(payload["q_hat"]),
        alpha=float(payload["alpha"]),
        score_kind=ScoreKind(payload["score_kind"]),
        eps_cal=float(payload["eps_cal"]),
        cal_scores=np.asarray(payload["cal_scores"], dtype=np.float64),
    )
