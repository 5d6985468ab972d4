"""INI config parsing for the sweep runner and CLI.

Schema (all keys optional; defaults mirror the reference protocol):

    [data]
    kind = gaussian              ; or idx
    num_classes = 5
    dim = 16
    n_samples = 5000
    class_separation = 5.0
    seed = 0
    images_path = ...            ; idx only
    labels_path = ...            ; idx only

    [model]
    hidden_width = 0             ; 0 = linear softmax model

    [train]
    epochs = 120
    lr = 0.5
    batch_size = 64

    [conformal]
    alpha = 0.1
    beta = 0.02
    score = hps                  ; or aps

    [sweep]
    norm = linf                  ; or l2
    eps_train = {0,4,8,12,16}/255
    eps_cal = {8,16}/255
    eps_test = {2..14}/255 ; {10..22}/255
    seeds = 0..9
    budget = 0.01 0.01 0.01      ; e_train d_cal e_cal, used by check-theory

    [output]
    dir = results

Epsilon lists accept '{a..b}/255' integer ranges, '{k1,k2,...}/255' sets,
bare 'k/255' rationals, and decimals, separated by commas or spaces. The
eps_test value takes one ';'-separated group per eps_cal entry (or a single
group applied to every eps_cal). Seeds accept 'a..b' ranges and comma lists.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import replace

from .attack import parse_epsilon
from .conformal import ScoreKind
from .sweep import DatasetSpec, SweepConfig, default_sweep_config
from .theory import ErrorBudget
from .train import TrainConfig

__all__ = ["ConfigError", "load_sweep_config", "parse_eps_list", "parse_seed_list"]

_RANGE = re.compile(r"^\{(-?\d+)\.\.(-?\d+)\}/(\d+)$")
_SET = re.compile(r"^\{([^{}]*)\}/(\d+)$")


class ConfigError(ValueError):
    """Malformed configuration file or value."""


def parse_eps_list(text: str) -> tuple[float, ...]:
    """Parse one epsilon list: ranges, brace sets, rationals, decimals."""
    values: list[float] = []
    for token in re.split(r"[,\s]+", text.strip()):
        if not token:
            continue
        m = _RANGE.match(token)
        if m:
            lo, hi, den = int(m.group(1)), int(m.group(2)), int(m.group(3))
            if hi < lo:
                raise ConfigError(f"empty range in {token!r}")
            values.extend(float(k) / den for k in range(lo, hi + 1))
            continue
        m = _SET.match(token)
        if m:
            den = int(m.group(2))
            values.extend(float(int(k)) / den for k in m.group(1).split(","))
            continue
        try:
            values.append(parse_epsilon(token))
        except ValueError as exc:
            raise ConfigError(f"bad epsilon token {token!r}: {exc}") from exc
    if not values:
        raise ConfigError(f"empty epsilon list: {text!r}")
    return tuple(values)


def parse_seed_list(text: str) -> tuple[int, ...]:
    """Parse a seeds value: 'a..b' ranges and comma/space-separated ints."""
    seeds: list[int] = []
    for token in re.split(r"[,\s]+", text.strip()):
        if not token:
            continue
        if ".." in token:
            lo, _, hi = token.partition("..")
            try:
                lo_i, hi_i = int(lo), int(hi)
            except ValueError as exc:
                raise ConfigError(f"bad seed range {token!r}") from exc
            if hi_i < lo_i:
                raise ConfigError(f"empty seed range {token!r}")
            seeds.extend(range(lo_i, hi_i + 1))
        else:
            try:
                seeds.append(int(token))
            except ValueError as exc:
                raise ConfigError(f"bad seed {token!r}") from exc
    if not seeds:
        raise ConfigError(f"empty seed list: {text!r}")
    return tuple(seeds)


def _get(parser, section, key, cast, default):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        return cast(raw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def load_sweep_config(path=None, text: str | None = None) -> tuple[SweepConfig, ErrorBudget]:
    """Build a SweepConfig (and the theory error budget) from an INI file.

    With no path or text, returns the default configuration unchanged.
    """
    cfg = default_sweep_config()
    budget = ErrorBudget(0.01, 0.01, 0.01)
    if path is None and text is None:
        return cfg, budget
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        if text is not None:
            parser.read_string(text)
        else:
            with open(path, "r", encoding="utf-8") as f:
                parser.read_file(f)
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc

    known = {"data", "model", "train", "conformal", "sweep", "output"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    ds = cfg.dataset
    ds = replace(
        ds,
        kind=_get(parser, "data", "kind", str, ds.kind),
        num_classes=_get(parser, "data", "num_classes", int, ds.num_classes),
        dim=_get(parser, "data", "dim", int, ds.dim),
        n_samples=_get(parser, "data", "n_samples", int, ds.n_samples),
        class_separation=_get(parser, "data", "class_separation", float, ds.class_separation),
        seed=_get(parser, "data", "seed", int, ds.seed),
        images_path=_get(parser, "data", "images_path", str, ds.images_path),
        labels_path=_get(parser, "data", "labels_path", str, ds.labels_path),
    )
    train_cfg = TrainConfig(
        epochs=_get(parser, "train", "epochs", int, cfg.train.epochs),
        lr=_get(parser, "train", "lr", float, cfg.train.lr),
        batch_size=_get(parser, "train", "batch_size", int, cfg.train.batch_size),
    )
    score_text = _get(parser, "conformal", "score", str, cfg.score_kind.value)
    try:
        score_kind = ScoreKind(score_text.lower())
    except ValueError as exc:
        raise ConfigError(f"[conformal] score = {score_text!r}: must be hps or aps") from exc

    eps_cal = _get(parser, "sweep", "eps_cal", parse_eps_list, cfg.eps_cal)
    if parser.has_option("sweep", "eps_test"):
        groups = [g for g in parser.get("sweep", "eps_test").split(";") if g.strip()]
        if len(groups) == 1:
            eps_test = tuple(parse_eps_list(groups[0]) for _ in eps_cal)
        elif len(groups) == len(eps_cal):
            eps_test = tuple(parse_eps_list(g) for g in groups)
        else:
            raise ConfigError(
                f"eps_test has {len(groups)} groups for {len(eps_cal)} eps_cal values"
            )
    elif eps_cal == cfg.eps_cal:
        eps_test = cfg.eps_test
    else:
        raise ConfigError("eps_cal changed without a matching eps_test")

    budget_values = _get(
        parser, "sweep", "budget", lambda s: [float(v) for v in s.split()], None
    )
    if budget_values is not None:
        if len(budget_values) != 3:
            raise ConfigError("budget needs three values: e_train d_cal e_cal")
        budget = ErrorBudget(*budget_values)

    try:
        cfg = replace(
            cfg,
            dataset=ds,
            hidden_width=_get(parser, "model", "hidden_width", int, cfg.hidden_width),
            alpha=_get(parser, "conformal", "alpha", float, cfg.alpha),
            beta=_get(parser, "conformal", "beta", float, cfg.beta),
            score_kind=score_kind,
            norm=_get(parser, "sweep", "norm", str, cfg.norm),
            eps_train=_get(parser, "sweep", "eps_train", parse_eps_list, cfg.eps_train),
            eps_cal=eps_cal,
            eps_test=eps_test,
            seeds=_get(parser, "sweep", "seeds", parse_seed_list, cfg.seeds),
            train=train_cfg,
            output_dir=_get(parser, "output", "dir", str, cfg.output_dir),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, budget
