"""Numerical evaluators and statistical validators for the coverage bounds.

This module turns the analytical results into checkable numbers: the
coverage-deviation bound, the tolerance band of test-time attack strengths,
the first-order quantile-shift expansion, and the set-size bound with its
clean-versus-adversarial comparison. The error budget constants are supplied
by the caller; estimating them from data is out of scope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackSpec
from .conformal import ScoreKind, calibrate, evaluate
from .dataio import LabeledDataset, SplitIndices
from .model import Classifier, forward_batch, grad_prob_input_batch

__all__ = [
    "ErrorBudget",
    "LocalGeometry",
    "ToleranceBand",
    "InsufficientDataError",
    "DegenerateGeometryError",
    "estimate_grad_norm",
    "estimate_density_at",
    "silverman_bandwidth",
    "estimate_c",
    "theorem1_bound",
    "theorem2_band",
    "lemma1_check",
    "Lemma1Report",
    "theorem3_setsize_bound",
    "theorem3_empirical_compare",
    "Theorem3Row",
    "Theorem3Report",
]


class InsufficientDataError(ValueError):
    """Too few samples fall where a windowed estimator needs them."""


class DegenerateGeometryError(ValueError):
    """A bound evaluation hit zero gradient norm or zero density."""


@dataclass(frozen=True)
class ErrorBudget:
    """Concentration/stability constants of the exchangeable-case bound."""

    e_train: float = 0.0
    d_cal: float = 0.0
    e_cal: float = 0.0

    def __post_init__(self):
        for name in ("e_train", "d_cal", "e_cal"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")

    @property
    def total(self) -> float:
        return self.e_train + self.d_cal + self.e_cal


@dataclass(frozen=True)
class LocalGeometry:
    """Local sensitivity of the model at the calibration quantile.

    grad_norm: mean l2 norm of the true-class probability gradient.
    c: that norm's conditional mean given the probability sits at the quantile.
    density_at_q: density of the true-class probability at the quantile.
    """

    grad_norm: float
    c: float
    density_at_q: float

    def __post_init__(self):
        for name in ("grad_norm", "c", "density_at_q"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")


@dataclass(frozen=True)
class ToleranceBand:
    """Interval of test-time attack strengths keeping coverage in the band."""

    beta: float
    eps_lo: float
    eps_hi: float
    length: float

    def __post_init__(self):
        if abs((self.eps_hi - self.eps_lo) - self.length) > 1e-12:
            raise ValueError("band length must equal eps_hi - eps_lo")


def estimate_grad_norm(model: Classifier, ds: LabeledDataset, idx) -> float:
    """Mean l2 norm of the true-class probability gradient over the samples."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty index list")
    g = grad_prob_input_batch(model, ds.features[idx], ds.labels[idx])
    return float(np.mean(np.linalg.norm(g, axis=1)))


def estimate_density_at(samples, point: float, bandwidth: float) -> float:
    """Gaussian kernel density estimate at a point."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 50:
        raise ValueError(f"need at least 50 samples for a KDE, got {samples.size}")
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth!r}")
    t = (point - samples) / bandwidth
    return float(np.mean(np.exp(-0.5 * t * t)) / (bandwidth * math.sqrt(2.0 * math.pi)))


def silverman_bandwidth(samples) -> float:
    """Silverman's rule of thumb: 0.9 min(std, IQR/1.349) n^(-1/5)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 2:
        raise ValueError("need at least 2 samples")
    std = float(np.std(samples, ddof=1))
    iqr = float(np.subtract(*np.percentile(samples, [75, 25])))
    spread = min(std, iqr / 1.349) if iqr > 0 else std
    bw = 0.9 * spread * samples.size ** (-0.2)
    if not bw > 0:
        raise ValueError("degenerate sample: zero spread")
    return bw


def estimate_c(
    model: Classifier,
    ds: LabeledDataset,
    idx,
    q: float,
    window: float = 0.05,
) -> float:
    """Mean probability-gradient norm among samples with f_y(x) within `window` of q."""
    if not window > 0:
        raise ValueError("window must be > 0")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty index list")
    probs = forward_batch(model, ds.features[idx])
    p_true = probs[np.arange(idx.size), ds.labels[idx]]
    mask = np.abs(p_true - q) <= window
    if mask.sum() < 20:
        raise InsufficientDataError(
            f"only {int(mask.sum())} samples within window {window} of q={q}; need 20"
        )
    g = grad_prob_input_batch(model, ds.features[idx], ds.labels[idx])
    return float(np.mean(np.linalg.norm(g, axis=1)[mask]))


def theorem1_bound(
    budget: ErrorBudget,
    geom: LocalGeometry,
    eps_cal: float,
    eps_test: float,
) -> float:
    """Coverage-deviation bound (first order, remainder terms dropped).

    budget.total + ((2 eps_test - eps_cal) grad_norm - eps_cal c) density_at_q.
    At eps_cal = eps_test with c = grad_norm the gradient term vanishes and
    the bound reduces to the exchangeable-case budget. The returned value is
    signed; callers compare it against |coverage - (1 - alpha)| only when it
    is nonnegative.
    """
    gradient_term = (2.0 * eps_test - eps_cal) * geom.grad_norm - eps_cal * geom.c
    return budget.total + gradient_term * geom.density_at_q


def theorem2_band(
    budget: ErrorBudget,
    geom: LocalGeometry,
    eps_cal: float,
    beta: float,
) -> ToleranceBand:
    """Test-attack interval keeping coverage within +-beta of the target.

    Endpoints: (-beta - E) resp. (beta - E) over 2 grad_norm density_at_q,
    both shifted by (c + grad_norm) eps_cal / (2 grad_norm); E is the budget
    total. The asymmetry of the budget term between the two endpoints is as
    printed in the source result. The length field is computed independently
    as 2 beta / (2 grad_norm density_at_q) and must match eps_hi - eps_lo.
    """
    if not beta > 0:
        raise ValueError("beta must be > 0")
    if geom.grad_norm <= 0 or geom.density_at_q <= 0:
        raise DegenerateGeometryError(
            f"need grad_norm > 0 and density_at_q > 0, got {geom.grad_norm!r}, {geom.density_at_q!r}"
        )
    denom = 2.0 * geom.grad_norm * geom.density_at_q
    shift = (geom.c + geom.grad_norm) * eps_cal / (2.0 * geom.grad_norm)
    eps_lo = (-beta - budget.total) / denom + shift
    eps_hi = (beta - budget.total) / denom + shift
    return ToleranceBand(
        beta=beta, eps_lo=eps_lo, eps_hi=eps_hi, length=2.0 * beta / denom
    )


@dataclass(frozen=True)
class Lemma1Report:
    """Empirical check of the first-order quantile shift of f - eps * g."""

    alpha: float
    q0: float
    cond_mean: float
    eps_grid: tuple[float, ...]
    empirical_quantiles: tuple[float, ...]
    predicted_quantiles: tuple[float, ...]
    max_abs_deviation: float
    fitted_slope: float


def lemma1_check(
    joint_sampler,
    alpha: float,
    eps_grid,
    n_mc: int,
    seed: int = 0,
    cond_window: float = 0.01,
) -> Lemma1Report:
    """Monte-Carlo check that Q_{1-a}(f - eps g) = Q_{1-a}(f) - eps E[g | f = q0] + o(eps).

    ``joint_sampler(rng, n)`` returns n paired draws (f, g). One sample is
    drawn and reused across the epsilon grid, so a constant g shifts every
    quantile exactly. The conditional mean at the quantile is estimated from
    the draws with |f - q0| <= cond_window.
    """
    eps_grid = tuple(float(e) for e in eps_grid)
    if not eps_grid or any(e <= 0 for e in eps_grid):
        raise ValueError("eps_grid must be non-empty and positive")
    if max(eps_grid) > 0.05:
        raise ValueError("eps_grid entries must be <= 0.05 (first-order regime)")
    if n_mc < 100_000:
        raise ValueError(f"n_mc must be >= 1e5, got {n_mc}")
    rng = np.random.default_rng(seed)
    f, g = joint_sampler(rng, n_mc)
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != (n_mc,) or g.shape != (n_mc,):
        raise ValueError("sampler must return two arrays of length n_mc")
    q0 = float(np.quantile(f, 1.0 - alpha))
    near = np.abs(f - q0) <= cond_window
    if near.sum() < 20:
        raise InsufficientDataError(
            f"only {int(near.sum())} draws within {cond_window} of the quantile"
        )
    cond_mean = float(np.mean(g[near]))
    empirical = tuple(float(np.quantile(f - e * g, 1.0 - alpha)) for e in eps_grid)
    predicted = tuple(q0 - e * cond_mean for e in eps_grid)
    deviations = [abs(e - p) for e, p in zip(empirical, predicted)]
    slope = float(np.polyfit(np.asarray(eps_grid), np.asarray(empirical), 1)[0])
    return Lemma1Report(
        alpha=alpha,
        q0=q0,
        cond_mean=cond_mean,
        eps_grid=eps_grid,
        empirical_quantiles=empirical,
        predicted_quantiles=predicted,
        max_abs_deviation=max(deviations),
        fitted_slope=slope,
    )


def theorem3_setsize_bound(
    alpha: float, h: float, K: int, q_hat: float, p_true: float
) -> float:
    """Expected-set-size bound under the uniform wrong-class model.

    1 - alpha + h + (K - 1)(1 - r)^(K - 2) with r = (1 - q_hat)/(1 - p_true)
    clamped to [0, 1]; q_hat is on the score scale, so 1 - q_hat is the
    probability threshold. The +h resolves the bound's +- adversely.
    """
    if K < 3:
        raise ValueError("K must be >= 3")
    if not 0.0 <= p_true < 1.0:
        raise ValueError(f"p_true must lie in [0, 1), got {p_true!r}")
    ratio = (1.0 - q_hat) / (1.0 - p_true)
    ratio = min(max(ratio, 0.0), 1.0)
    return 1.0 - alpha + h + (K - 1) * (1.0 - ratio) ** (K - 2)


@dataclass(frozen=True)
class Theorem3Row:
    """One seed of the clean-versus-adversarial comparison."""

    seed: int
    q_clean: float
    q_adv: float
    p_true_clean: float
    p_true_adv: float
    ratio_clean: float
    ratio_adv: float
    set_size_clean: float
    set_size_adv: float
    coverage_clean: float
    coverage_adv: float

    @property
    def adv_smaller_size(self) -> bool:
        return self.set_size_adv < self.set_size_clean

    @property
    def ratio_orders_same_way(self) -> bool:
        """The wrong-class bound decreases in the ratio, so a larger ratio
        predicts the smaller set; check that prediction against the sizes."""
        if self.ratio_adv == self.ratio_clean:
            return self.set_size_adv == self.set_size_clean
        return (self.ratio_adv > self.ratio_clean) == self.adv_smaller_size


@dataclass(frozen=True)
class Theorem3Report:
    rows: tuple[Theorem3Row, ...]
    n_adv_smaller: int = field(init=False)
    n_ratio_consistent: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "n_adv_smaller", sum(r.adv_smaller_size for r in self.rows)
        )
        object.__setattr__(
            self, "n_ratio_consistent", sum(r.ratio_orders_same_way for r in self.rows)
        )


def theorem3_empirical_compare(
    clean_models,
    adv_models,
    ds: LabeledDataset,
    splits,
    alpha: float,
    attack: AttackSpec,
    seeds=None,
    cal_attack: AttackSpec | None = None,
) -> Theorem3Report:
    """Per-seed comparison of clean and adversarially trained models.

    For each seed the matching split is calibrated (HPS, attack strength
    ``cal_attack``, defaulting to the test attack) and evaluated under the
    test attack. Each row records the score quantile Q, the mean true-class
    probability on the attacked calibration set, the ratio
    (1 - Q)/(1 - P_true) driving the set-size bound, and the realized
    coverage and mean set size.
    """
    clean_models = list(clean_models)
    adv_models = list(adv_models)
    splits = list(splits)
    if not len(clean_models) == len(adv_models) == len(splits):
        raise ValueError("need one clean model, adv model, and split per seed")
    if seeds is None:
        seeds = list(range(len(splits)))
    if cal_attack is None:
        cal_attack = attack
    rows = []
    for seed, m_clean, m_adv, split in zip(seeds, clean_models, adv_models, splits):
        per_model = {}
        for tag, model in (("clean", m_clean), ("adv", m_adv)):
            result = calibrate(
                model, ds, split.cal, alpha, ScoreKind.HPS, cal_attack, seed=seed
            )
            # cal_scores are HPS = 1 - p_true, so the mean true-class
            # probability on the attacked calibration set is 1 - mean score
            p_true = 1.0 - float(np.mean(result.cal_scores))
            coverage, size = evaluate(model, ds, split.test, result, attack, seed=seed)
            ratio = (1.0 - result.q_hat) / (1.0 - p_true)
            per_model[tag] = (result.q_hat, p_true, ratio, coverage, size)
        rows.append(
            Theorem3Row(
                seed=int(seed),
                q_clean=per_model["clean"][0],
                q_adv=per_model["adv"][0],
                p_true_clean=per_model["clean"][1],
                p_true_adv=per_model["adv"][1],
                ratio_clean=per_model["clean"][2],
                ratio_adv=per_model["adv"][2],
                coverage_clean=per_model["clean"][3],
                coverage_adv=per_model["adv"][3],
                set_size_clean=per_model["clean"][4],
                set_size_adv=per_model["adv"][4],
            )
        )
    return Theorem3Report(rows=tuple(rows))
