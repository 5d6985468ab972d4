"""Command-line interface.

Subcommands: gen-data, train, calibrate, evaluate, sweep, check-theory,
check-band. Configuration comes from an INI file (--config, see
:mod:`advconform.config` for the schema) with flag overrides; --seed, --out,
--alpha and --beta are global flags. Exit codes: 0 success, 1 config error,
2 partial failures in a sweep, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import conformal, dataio, model as model_mod, sweep as sweep_mod, theory
from .attack import AttackSpec, format_epsilon, parse_epsilon
from .config import ConfigError, load_sweep_config
from .conformal import ScoreKind
from .seeding import derive_seed
from .train import accuracy, train

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PARTIAL = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; the contract wants 1 for config errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="advconform", description=__doc__)
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--seed", type=int, default=0, help="master seed")
    parser.add_argument("--out", help="output directory or file")
    parser.add_argument("--alpha", type=float, help="target miscoverage level")
    parser.add_argument("--beta", type=float, help="coverage tolerance band half-width")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a Gaussian mixture and write it as IDX")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--sep", type=float)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    p.add_argument("--eps-train", default="0/255", help="training attack strength")
    p.add_argument("--norm", choices=("linf", "l2"))

    p = sub.add_parser("calibrate", help="calibrate a saved model on the calibration split")
    p.add_argument("--model", required=True)
    p.add_argument("--eps-cal", default="0/255")
    p.add_argument("--norm", choices=("linf", "l2"))
    p.add_argument("--score", choices=("hps", "aps"))

    p = sub.add_parser("evaluate", help="evaluate coverage/set size on the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--eps-test", default="0/255")
    p.add_argument("--norm", choices=("linf", "l2"))

    p = sub.add_parser("sweep", help="run the (eps_train, eps_cal, eps_test, seed) grid")

    p = sub.add_parser("check-theory", help="numerical checks of the coverage bounds (l2 attacks)")
    p.add_argument("--eps-cal", default="0.02", help="l2 calibration attack strength")
    p.add_argument("--n-mc", type=int, default=1_000_000, help="Monte-Carlo draws for the quantile-shift check")

    p = sub.add_parser("check-band", help="report in-band eps_test runs from a sweep CSV")
    p.add_argument("--csv", required=True)

    return parser


def _outdir(args, cfg) -> str:
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def _apply_globals(args, cfg):
    if args.alpha is not None:
        cfg = replace(cfg, alpha=args.alpha)
    if args.beta is not None:
        cfg = replace(cfg, beta=args.beta)
    return cfg


def _load_split(cfg, seed):
    ds = cfg.dataset.load()
    split = dataio.split_dataset(ds, cfg.split_fractions, derive_seed(seed, "split"))
    return ds, split


def cmd_gen_data(args, cfg, budget) -> int:
    spec = cfg.dataset
    if args.num_classes is not None:
        spec = replace(spec, num_classes=args.num_classes)
    if args.dim is not None:
        spec = replace(spec, dim=args.dim)
    if args.n is not None:
        spec = replace(spec, n_samples=args.n)
    if args.sep is not None:
        spec = replace(spec, class_separation=args.sep)
    spec = replace(spec, kind="gaussian", seed=args.seed)
    ds = spec.load()
    # IDX stores bytes, so map features affinely onto [0, 1] (one global scale)
    lo, hi = ds.features.min(), ds.features.max()
    scaled = dataio.LabeledDataset(
        features=(ds.features - lo) / (hi - lo),
        labels=ds.labels,
        num_classes=ds.num_classes,
    )
    out = _outdir(args, cfg)
    images = os.path.join(out, "images.idx")
    labels = os.path.join(out, "labels.idx")
    dataio.save_idx(scaled, images, labels)
    print(f"wrote {images} and {labels} ({ds.n_samples} samples, "
          f"{ds.n_features} features, {ds.num_classes} classes)")
    return EXIT_OK


def cmd_train(args, cfg, budget) -> int:
    ds, split = _load_split(cfg, args.seed)
    eps = parse_epsilon(args.eps_train)
    norm = args.norm or cfg.norm
    train_cfg = replace(
        cfg.train, attack=AttackSpec(norm, eps), seed=derive_seed(args.seed, "train", eps)
    )
    init = model_mod.init_classifier(
        ds.n_features, ds.num_classes, cfg.hidden_width,
        seed=derive_seed(args.seed, "init", eps),
    )
    out = _outdir(args, cfg)
    log_path = os.path.join(out, "train_log.csv")
    trained = train(init, ds, split.train, train_cfg, log_path=log_path)
    ckpt = os.path.join(out, "model.json")
    model_mod.save_checkpoint(trained, ckpt)
    clean = accuracy(trained, ds, split.test, AttackSpec(norm, 0.0))
    adv = accuracy(trained, ds, split.test, AttackSpec(norm, eps)) if eps > 0 else clean
    print(f"saved {ckpt} (clean_acc={clean:.4f}, adv_acc@{format_epsilon(eps)}={adv:.4f})")
    print(f"training log: {log_path}")
    return EXIT_OK


def cmd_calibrate(args, cfg, budget) -> int:
    ds, split = _load_split(cfg, args.seed)
    trained = model_mod.load_checkpoint(args.model)
    eps = parse_epsilon(args.eps_cal)
    norm = args.norm or cfg.norm
    kind = ScoreKind(args.score) if args.score else cfg.score_kind
    result = conformal.calibrate(
        trained, ds, split.cal, cfg.alpha, kind, AttackSpec(norm, eps),
        seed=derive_seed(args.seed, "cal", eps),
    )
    out = _outdir(args, cfg)
    path = os.path.join(out, "calibration.json")
    conformal.save_calibration(result, path)
    print(f"saved {path} (q_hat={result.q_hat!r}, alpha={cfg.alpha}, "
          f"score={kind.value}, eps_cal={format_epsilon(eps)})")
    return EXIT_OK


def cmd_evaluate(args, cfg, budget) -> int:
    ds, split = _load_split(cfg, args.seed)
    trained = model_mod.load_checkpoint(args.model)
    result = conformal.load_calibration(args.calibration)
    eps = parse_epsilon(args.eps_test)
    norm = args.norm or cfg.norm
    coverage, size = conformal.evaluate(
        trained, ds, split.test, result, AttackSpec(norm, eps),
        seed=derive_seed(args.seed, "eval", eps),
    )
    print(f"eps_test: {format_epsilon(eps)}")
    print(f"coverage: {coverage:.4f}")
    print(f"mean_set_size: {size:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "evaluation.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"eps_test": format_epsilon(eps), "coverage": coverage,
                       "mean_set_size": size}, f, indent=2)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(args, cfg, budget) -> int:
    out = _outdir(args, cfg)

    def progress(done, total):
        print(f"\r[sweep] {done}/{total} (eps_train, seed) cells", end="", flush=True)

    records = sweep_mod.run_sweep(cfg, progress=progress)
    print()
    csv_path = os.path.join(out, "sweep.csv")
    json_path = os.path.join(out, "summary.json")
    sweep_mod.emit_csv(records, csv_path)
    summary = sweep_mod.summarize(records, cfg)
    sweep_mod.emit_json(summary, json_path)
    n_failed = len(summary["failures"])
    print(f"wrote {csv_path} ({len(records)} rows) and {json_path}")
    if n_failed:
        print(f"{n_failed} grid points failed (tagged rows kept)", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_check_theory(args, cfg, budget) -> int:
    """Estimate the local geometry, evaluate the bounds, and run the MC checks.

    Bound evaluation uses l2 attacks (the analysis normalizes the attack
    direction in l2), independent of the sweep's norm choice.
    """
    ds, split = _load_split(cfg, args.seed)
    eps_cal = parse_epsilon(args.eps_cal)
    train_cfg = replace(
        cfg.train, attack=AttackSpec("l2", 0.0), seed=derive_seed(args.seed, "train", 0.0)
    )
    init = model_mod.init_classifier(
        ds.n_features, ds.num_classes, cfg.hidden_width,
        seed=derive_seed(args.seed, "init", 0.0),
    )
    trained = train(init, ds, split.train, train_cfg)

    # geometry anchors come from the clean calibration distribution
    clean_cal = conformal.calibrate(
        trained, ds, split.cal, cfg.alpha, ScoreKind.HPS, AttackSpec("l2", 0.0)
    )
    prob_quantile = 1.0 - clean_cal.q_hat
    cal_probs = 1.0 - clean_cal.cal_scores
    bandwidth = theory.silverman_bandwidth(cal_probs)
    geom = theory.LocalGeometry(
        grad_norm=theory.estimate_grad_norm(trained, ds, split.test),
        c=theory.estimate_c(trained, ds, split.test, prob_quantile, window=0.05),
        density_at_q=theory.estimate_density_at(cal_probs, prob_quantile, bandwidth),
    )
    band = theory.theorem2_band(budget, geom, eps_cal, cfg.beta)

    attacked_cal = conformal.calibrate(
        trained, ds, split.cal, cfg.alpha, ScoreKind.HPS, AttackSpec("l2", eps_cal),
        seed=derive_seed(args.seed, "cal", eps_cal),
    )
    rows = []
    for eps_test in (0.0, 0.5 * eps_cal, eps_cal, 1.5 * eps_cal, 2.0 * eps_cal):
        coverage, size = conformal.evaluate(
            trained, ds, split.test, attacked_cal, AttackSpec("l2", eps_test),
            seed=derive_seed(args.seed, "eval", eps_cal, eps_test),
        )
        rows.append(
            {
                "eps_test": eps_test,
                "coverage": coverage,
                "mean_set_size": size,
                "coverage_deviation": abs(coverage - (1.0 - cfg.alpha)),
                "theorem1_bound": theory.theorem1_bound(budget, geom, eps_cal, eps_test),
            }
        )

    lemma = theory.lemma1_check(
        lambda rng, n: (lambda f: (f, f))(rng.uniform(size=n)),
        alpha=cfg.alpha,
        eps_grid=(0.01, 0.02, 0.03, 0.04, 0.05),
        n_mc=args.n_mc,
        seed=derive_seed(args.seed, "lemma1"),
    )

    report = {
        "alpha": cfg.alpha,
        "beta": cfg.beta,
        "eps_cal": eps_cal,
        "budget": {"e_train": budget.e_train, "d_cal": budget.d_cal, "e_cal": budget.e_cal},
        "grad_norm": geom.grad_norm,
        "c": geom.c,
        "density_at_q": geom.density_at_q,
        "kde_bandwidth": bandwidth,
        "q_hat_clean": clean_cal.q_hat,
        "prob_quantile": prob_quantile,
        "theorem2_eps_lo": band.eps_lo,
        "theorem2_eps_hi": band.eps_hi,
        "theorem2_length": band.length,
        "theorem1_rows": rows,
        "lemma1_q0": lemma.q0,
        "lemma1_cond_mean": lemma.cond_mean,
        "lemma1_fitted_slope": lemma.fitted_slope,
        "lemma1_max_abs_deviation": lemma.max_abs_deviation,
    }
    for key, value in report.items():
        if key == "theorem1_rows":
            for row in value:
                print(
                    f"theorem1[eps_test={row['eps_test']:.6g}]: "
                    f"bound={row['theorem1_bound']:.6g} "
                    f"coverage_dev={row['coverage_deviation']:.6g} "
                    f"coverage={row['coverage']:.4f}"
                )
        elif isinstance(value, dict):
            for k, v in value.items():
                print(f"{key}.{k}: {v}")
        else:
            print(f"{key}: {value}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "theory_report.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_check_band(args, cfg, budget) -> int:
    records = sweep_mod.parse_csv(args.csv)
    reports = sweep_mod.check_band(records, cfg.alpha, cfg.beta)
    lo, hi = 1.0 - cfg.alpha - cfg.beta, 1.0 - cfg.alpha + cfg.beta
    print(f"band: [{lo:.4f}, {hi:.4f}]")
    payload = []
    for rep in reports:
        run_text = (
            f"{format_epsilon(rep.run[0])}..{format_epsilon(rep.run[-1])}"
            if rep.run
            else "(empty)"
        )
        print(
            f"eps_train={format_epsilon(rep.eps_train)} "
            f"eps_cal={format_epsilon(rep.eps_cal)}: run={run_text} "
            f"length={rep.run_length} contiguous={rep.contiguous}"
        )
        payload.append(
            {
                "eps_train": format_epsilon(rep.eps_train),
                "eps_cal": format_epsilon(rep.eps_cal),
                "eps_test_grid": [format_epsilon(e) for e in rep.eps_test_grid],
                "mean_coverage": list(rep.mean_coverage),
                "in_band": [format_epsilon(e) for e in rep.in_band],
                "run": [format_epsilon(e) for e in rep.run],
                "run_length": rep.run_length,
                "run_span": rep.run_span,
                "contiguous": rep.contiguous,
            }
        )
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "band_report.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"band": [lo, hi], "reports": payload}, f, indent=2)
        print(f"wrote {path}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "check-theory": cmd_check_theory,
    "check-band": cmd_check_band,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg, budget = load_sweep_config(args.config)
        cfg = _apply_globals(args, cfg)
        return _COMMANDS[args.command](args, cfg, budget)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
