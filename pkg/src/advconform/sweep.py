"""Seeded grid execution over (eps_train, eps_cal, eps_test, seed).

One model is trained per (eps_train, seed), one calibration is run per
(eps_train, eps_cal, seed), and every eps_test on that calibration's grid is
evaluated against them; nothing is retrained inside the inner grid. Records
are emitted in deterministic order and a diverged training never aborts the
sweep: its grid points become rows tagged with the error.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attack import AttackSpec, format_epsilon
from .conformal import ScoreKind, calibrate, evaluate
from .dataio import LabeledDataset, generate_gaussian_mixture, load_idx, split_dataset
from .model import init_classifier
from .seeding import derive_seed
from .train import TrainConfig, TrainingDivergedError, accuracy, train

__all__ = [
    "DatasetSpec",
    "SweepConfig",
    "ExperimentRecord",
    "default_sweep_config",
    "run_sweep",
    "check_band",
    "BandReport",
    "summarize",
    "emit_csv",
    "emit_json",
    "parse_csv",
    "CSV_HEADER",
]

CSV_HEADER = "dataset,eps_train,eps_cal,eps_test,seed,coverage,mean_set_size,q_hat,clean_acc,adv_acc"


@dataclass(frozen=True)
class DatasetSpec:
    """Where the sweep's data comes from: a generator or an IDX file pair."""

    kind: str = "gaussian"  # "gaussian" | "idx"
    num_classes: int = 5
    dim: int = 16
    n_samples: int = 5000
    class_separation: float = 5.0
    seed: int = 0
    images_path: str | None = None
    labels_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "idx"):
            raise ValueError(f"dataset kind must be 'gaussian' or 'idx', got {self.kind!r}")
        if self.kind == "idx" and not (self.images_path and self.labels_path):
            raise ValueError("idx dataset needs images_path and labels_path")

    @property
    def name(self) -> str:
        if self.kind == "gaussian":
            return f"gauss-k{self.num_classes}-d{self.dim}-n{self.n_samples}"
        return f"idx:{self.images_path}"

    def load(self) -> LabeledDataset:
        if self.kind == "gaussian":
            return generate_gaussian_mixture(
                self.num_classes,
                self.dim,
                self.n_samples,
                self.class_separation,
                self.seed,
            )
        return load_idx(self.images_path, self.labels_path)


@dataclass(frozen=True)
class SweepConfig:
    """Full description of one sweep: data, model, grids, seeds, output.

    ``eps_test`` holds one test grid per calibration strength, aligned with
    ``eps_cal`` (the shifted test grids of the experimental protocol).
    """

    dataset: DatasetSpec = DatasetSpec()
    hidden_width: int = 0
    alpha: float = 0.1
    beta: float = 0.02
    score_kind: ScoreKind = ScoreKind.HPS
    norm: str = "linf"
    eps_train: tuple[float, ...] = ()
    eps_cal: tuple[float, ...] = ()
    eps_test: tuple[tuple[float, ...], ...] = ()
    seeds: tuple[int, ...] = tuple(range(10))
    train: TrainConfig = TrainConfig()
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    output_dir: str = "results"

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must be in (0, 1)")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if not (self.eps_train and self.eps_cal and self.eps_test and self.seeds):
            raise ValueError("grids and seeds must be non-empty")
        if len(self.eps_test) != len(self.eps_cal):
            raise ValueError("need one eps_test grid per eps_cal value")
        for grid in (self.eps_train, self.eps_cal, *self.eps_test):
            if any(e < 0 for e in grid):
                raise ValueError("epsilon values must be >= 0")

    @property
    def n_grid_points(self) -> int:
        per_cal = sum(len(grid) for grid in self.eps_test)
        return len(self.eps_train) * per_cal * len(self.seeds)


def default_sweep_config(**overrides) -> SweepConfig:
    """Desk-scale mirror of the reference protocol.

    eps_train {0,4,8,12,16}/255; eps_cal 8/255 with test grid {2..14}/255 and
    16/255 with test grid {10..22}/255; 10 seeds; alpha 0.1, beta 0.02.
    """
    base = SweepConfig(
        eps_train=tuple(k / 255.0 for k in (0, 4, 8, 12, 16)),
        eps_cal=(8 / 255.0, 16 / 255.0),
        eps_test=(
            tuple(k / 255.0 for k in range(2, 15)),
            tuple(k / 255.0 for k in range(10, 23)),
        ),
    )
    return replace(base, **overrides) if overrides else base


@dataclass(frozen=True)
class ExperimentRecord:
    """One grid point's outcome; metric fields are NaN on a failed row."""

    dataset: str
    eps_train: float
    eps_cal: float
    eps_test: float
    seed: int
    coverage: float
    mean_set_size: float
    q_hat: float
    clean_acc: float
    adv_acc: float
    error: str | None = None

    def __post_init__(self):
        if self.error is None:
            if not 0.0 <= self.coverage <= 1.0:
                raise ValueError(f"coverage out of range: {self.coverage!r}")
            if self.mean_set_size < 0.0:
                raise ValueError(f"negative set size: {self.mean_set_size!r}")

    @property
    def sort_key(self):
        return (self.eps_train, self.eps_cal, self.eps_test, self.seed)


def _failed_record(cfg, eps_train, eps_cal, eps_test, seed, message) -> ExperimentRecord:
    nan = float("nan")
    return ExperimentRecord(
        dataset=cfg.dataset.name,
        eps_train=eps_train,
        eps_cal=eps_cal,
        eps_test=eps_test,
        seed=seed,
        coverage=nan,
        mean_set_size=nan,
        q_hat=nan,
        clean_acc=nan,
        adv_acc=nan,
        error=message,
    )


def run_sweep(cfg: SweepConfig, progress=None) -> list[ExperimentRecord]:
    """Execute the grid and return records sorted by (eps_train, eps_cal, eps_test, seed).

    ``progress(done, total)`` is called after each (eps_train, seed) cell.
    """
    ds = cfg.dataset.load()
    records: list[ExperimentRecord] = []
    cells = [(et, s) for et in cfg.eps_train for s in cfg.seeds]
    for done, (eps_train, seed) in enumerate(cells, start=1):
        split = split_dataset(ds, cfg.split_fractions, derive_seed(seed, "split"))
        train_cfg = replace(
            cfg.train,
            attack=AttackSpec(cfg.norm, eps_train),
            seed=derive_seed(seed, "train", eps_train),
        )
        init = init_classifier(
            ds.n_features,
            ds.num_classes,
            cfg.hidden_width,
            seed=derive_seed(seed, "init", eps_train),
        )
        try:
            model = train(init, ds, split.train, train_cfg)
        except TrainingDivergedError as exc:
            for eps_cal, test_grid in zip(cfg.eps_cal, cfg.eps_test):
                for eps_test in test_grid:
                    records.append(
                        _failed_record(cfg, eps_train, eps_cal, eps_test, seed, str(exc))
                    )
            if progress is not None:
                progress(done, len(cells))
            continue
        clean_acc = accuracy(model, ds, split.test, AttackSpec(cfg.norm, 0.0))
        for eps_cal, test_grid in zip(cfg.eps_cal, cfg.eps_test):
            cal = calibrate(
                model,
                ds,
                split.cal,
                cfg.alpha,
                cfg.score_kind,
                AttackSpec(cfg.norm, eps_cal),
                seed=derive_seed(seed, "cal", eps_train, eps_cal),
            )
            for eps_test in test_grid:
                test_attack = AttackSpec(cfg.norm, eps_test)
                coverage, size = evaluate(
                    model,
                    ds,
                    split.test,
                    cal,
                    test_attack,
                    seed=derive_seed(seed, "eval", eps_train, eps_cal, eps_test),
                )
                adv_acc = accuracy(model, ds, split.test, test_attack)
                records.append(
                    ExperimentRecord(
                        dataset=cfg.dataset.name,
                        eps_train=eps_train,
                        eps_cal=eps_cal,
                        eps_test=eps_test,
                        seed=seed,
                        coverage=coverage,
                        mean_set_size=size,
                        q_hat=cal.q_hat,
                        clean_acc=clean_acc,
                        adv_acc=adv_acc,
                    )
                )
        if progress is not None:
            progress(done, len(cells))
    records.sort(key=lambda r: r.sort_key)
    return records


@dataclass(frozen=True)
class BandReport:
    """In-band eps_test diagnosis for one (eps_train, eps_cal) configuration.

    ``run`` is the maximal contiguous stretch of the test grid whose mean
    coverage lies in [1 - alpha - beta, 1 - alpha + beta]; ``contiguous``
    says whether every in-band point belongs to that single stretch.
    """

    eps_train: float
    eps_cal: float
    eps_test_grid: tuple[float, ...]
    mean_coverage: tuple[float, ...]
    in_band: tuple[float, ...]
    run: tuple[float, ...]
    contiguous: bool

    @property
    def run_length(self) -> int:
        return len(self.run)

    @property
    def run_span(self) -> float:
        return self.run[-1] - self.run[0] if self.run else 0.0

    @property
    def run_midpoint(self) -> float:
        return float(np.mean(self.run)) if self.run else math.nan


def check_band(records, alpha: float, beta: float) -> list[BandReport]:
    """Group a sweep's records and report each configuration's in-band run.

    Coverage is averaged over seeds per eps_test; failed rows are skipped.
    """
    lo, hi = 1.0 - alpha - beta, 1.0 - alpha + beta
    groups: dict[tuple[float, float], dict[float, list[float]]] = {}
    for r in records:
        if r.error is not None:
            continue
        by_test = groups.setdefault((r.eps_train, r.eps_cal), {})
        by_test.setdefault(r.eps_test, []).append(r.coverage)
    reports = []
    for (eps_train, eps_cal), by_test in sorted(groups.items()):
        grid = tuple(sorted(by_test))
        means = tuple(float(np.mean(by_test[e])) for e in grid)
        flags = [lo <= m <= hi for m in means]
        in_band = tuple(e for e, ok in zip(grid, flags) if ok)
        best_run: tuple[float, ...] = ()
        current: list[float] = []
        n_runs = 0
        for e, ok in zip(grid, flags):
            if ok:
                if not current:
                    n_runs += 1
                current.append(e)
                if len(current) > len(best_run):
                    best_run = tuple(current)
            else:
                current = []
        reports.append(
            BandReport(
                eps_train=eps_train,
                eps_cal=eps_cal,
                eps_test_grid=grid,
                mean_coverage=means,
                in_band=in_band,
                run=best_run,
                contiguous=n_runs <= 1,
            )
        )
    return reports


def _format_metric(value: float) -> str:
    if math.isnan(value):
        return ""
    return repr(value)


def csv_lines(records) -> str:
    """Render records as the sweep CSV (header plus sorted rows)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER.split(","))
    for r in sorted(records, key=lambda r: r.sort_key):
        writer.writerow(
            [
                r.dataset,
                format_epsilon(r.eps_train),
                format_epsilon(r.eps_cal),
                format_epsilon(r.eps_test),
                r.seed,
                _format_metric(r.coverage),
                _format_metric(r.mean_set_size),
                _format_metric(r.q_hat),
                _format_metric(r.clean_acc),
                _format_metric(r.adv_acc),
            ]
        )
    return buf.getvalue()


def emit_csv(records, path) -> None:
    """Write the sweep CSV; epsilons serialize as 'k/255' when exact."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(csv_lines(records))


def parse_csv(path) -> list[ExperimentRecord]:
    """Read back a sweep CSV written by :func:`emit_csv`."""
    from .attack import parse_epsilon

    records = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER.split(","):
            raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
        for row in reader:
            failed = row["coverage"] == ""
            records.append(
                ExperimentRecord(
                    dataset=row["dataset"],
                    eps_train=parse_epsilon(row["eps_train"]),
                    eps_cal=parse_epsilon(row["eps_cal"]),
                    eps_test=parse_epsilon(row["eps_test"]),
                    seed=int(row["seed"]),
                    coverage=float("nan") if failed else float(row["coverage"]),
                    mean_set_size=float("nan") if failed else float(row["mean_set_size"]),
                    q_hat=float("nan") if failed else float(row["q_hat"]),
                    clean_acc=float("nan") if failed else float(row["clean_acc"]),
                    adv_acc=float("nan") if failed else float(row["adv_acc"]),
                    error="failed" if failed else None,
                )
            )
    return records


def summarize(records, cfg: SweepConfig) -> dict:
    """Per-configuration means and standard errors across seeds."""
    groups: dict[tuple[float, float, float], list[ExperimentRecord]] = {}
    failures = []
    for r in records:
        if r.error is not None:
            failures.append(
                {
                    "eps_train": format_epsilon(r.eps_train),
                    "eps_cal": format_epsilon(r.eps_cal),
                    "eps_test": format_epsilon(r.eps_test),
                    "seed": r.seed,
                    "error": r.error,
                }
            )
            continue
        groups.setdefault((r.eps_train, r.eps_cal, r.eps_test), []).append(r)

    def _mean_se(values):
        arr = np.asarray(values, dtype=np.float64)
        mean = float(arr.mean())
        se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
        return mean, se

    per_config = []
    for (eps_train, eps_cal, eps_test), rs in sorted(groups.items()):
        mean_cov, se_cov = _mean_se([r.coverage for r in rs])
        mean_size, se_size = _mean_se([r.mean_set_size for r in rs])
        per_config.append(
            {
                "eps_train": format_epsilon(eps_train),
                "eps_cal": format_epsilon(eps_cal),
                "eps_test": format_epsilon(eps_test),
                "mean_coverage": mean_cov,
                "se_coverage": se_cov,
                "mean_set_size": mean_size,
                "se_set_size": se_size,
            }
        )
    return {
        "config_echo": config_echo(cfg),
        "per_config": per_config,
        "failures": failures,
    }


def config_echo(cfg: SweepConfig) -> dict:
    return {
        "dataset": cfg.dataset.name,
        "hidden_width": cfg.hidden_width,
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "score_kind": cfg.score_kind.value,
        "norm": cfg.norm,
        "eps_train": [format_epsilon(e) for e in cfg.eps_train],
        "eps_cal": [format_epsilon(e) for e in cfg.eps_cal],
        "eps_test": [[format_epsilon(e) for e in grid] for grid in cfg.eps_test],
        "seeds": list(cfg.seeds),
        "epochs": cfg.train.epochs,
        "lr": cfg.train.lr,
        "batch_size": cfg.train.batch_size,
        "split_fractions": list(cfg.split_fractions),
    }


def emit_json(summary: dict, path) -> None:
    """Write the JSON summary with a stable layout."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
