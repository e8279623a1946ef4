"""Command-line entry point: ``smcr gen-data | pretrain | adapt | eval``.

Exit codes: 0 on success, 1 on a runtime failure (including a missing
upstream artifact), 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from typing import Dict, List, Optional

from threadpoolctl import threadpool_limits

from . import __version__
from .benchmark import REFERENCE_TRAIN, SpecKeyError, reference_spec_kv, specs_from_kv
from .data import generate_domain, load_dataset, save_dataset
from .errors import DomainError, ParseError, SMCRError
from .numerics import load_encoder, save_encoder
from .pipeline import (
    PurityMonitor,
    TrainConfig,
    adapt,
    evaluate_model,
    final_metrics,
    initial_encoder,
    load_branch,
    save_branch,
    synthetic_pretrain,
)
from .textio import format_kv, parse_kv_lines, write_kv

log = logging.getLogger("smcr")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

DOMAINS = ("synthetic", "source", "target")
PRETRAINED_FILE = "pretrained.txt"
BRANCH_FILES = {"dthr": "dthr.txt", "rihr": "rihr.txt"}
REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"
METRICS_FILE = "metrics.txt"
PER_QUERY_FILE = "per_query.csv"


class ConfigError(SMCRError):
    pass


# ---------------------------------------------------------------------------
# experiment configuration

_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_PATH_KEYS = ("data", "synthetic", "source", "target", "pretrained")


def _to_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert_field(name: str, text: str):
    ann = str(_TRAIN_FIELDS[name].type)
    try:
        if ann.startswith("Optional") and text.lower() in ("", "none"):
            return None
        if "Tuple" in ann:
            return tuple(int(t) for t in text.split(",") if t.strip())
        if "bool" in ann:
            return _to_bool(text)
        if "int" in ann:
            return int(text)
        if "float" in ann:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: {exc}") from None


@dataclasses.dataclass
class ExperimentConfig:
    paths: Dict[str, str]
    train: TrainConfig


def _read_config_file(path: str) -> Dict[str, str]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return parse_kv_lines(fh)
        except ParseError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def load_experiment(args) -> ExperimentConfig:
    kv = _read_config_file(args.config) if args.config else {}
    base = os.path.dirname(os.path.abspath(args.config)) if args.config else os.getcwd()
    paths: Dict[str, str] = {}
    train_kw = {}
    for key, value in kv.items():
        if key in _PATH_KEYS:
            paths[key] = value if os.path.isabs(value) else os.path.join(base, value)
        elif key in _TRAIN_FIELDS:
            train_kw[key] = _convert_field(key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if "data" in paths:
        for d in DOMAINS:
            paths.setdefault(d, os.path.join(paths["data"], d))
    overrides = {
        "seed": args.seed, "mode": getattr(args, "mode", None),
        "alpha": getattr(args, "alpha", None), "beta": getattr(args, "beta", None),
        "lam": getattr(args, "lam", None), "tau": getattr(args, "tau", None),
    }
    if getattr(args, "no_criteria", False):
        overrides["criteria_enabled"] = False
    if getattr(args, "no_pretrain", False):
        overrides["use_pretraining"] = False
    train_kw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        train = TrainConfig(**train_kw)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(paths, train)


def _dataset(cfg: ExperimentConfig, name: str):
    if name not in cfg.paths:
        raise ConfigError(f"no path for the {name} dataset (set 'data' or '{name}' in the config)")
    path = cfg.paths[name]
    if not os.path.isdir(path):
        raise ConfigError(f"{name} dataset directory does not exist: {path}")
    return load_dataset(path)


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"expected upstream artifact {path}")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.reference or args.noisy:
        kv = reference_spec_kv(args.seed if args.seed is not None else 1, noisy=args.noisy)
    elif args.config:
        kv = _read_config_file(args.config)
    else:
        raise ConfigError("gen-data needs --config <spec file> or --reference")
    try:
        specs = specs_from_kv(kv)
    except SpecKeyError as exc:
        raise ConfigError(f"{exc} (key: {exc.key})") from None
    os.makedirs(args.out, exist_ok=True)
    for name, spec in zip(DOMAINS, specs):
        save_dataset(generate_domain(spec), os.path.join(args.out, name))
    write_kv(os.path.join(args.out, "spec.txt"), kv)
    experiment = {"data": ".", **REFERENCE_TRAIN}
    if args.seed is not None:
        experiment["seed"] = args.seed
    with open(os.path.join(args.out, "experiment.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(f"{k}={v}\n" for k, v in experiment.items()))
    log.info("wrote %s", ", ".join(DOMAINS))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_experiment(args)
    synthetic, source = _dataset(cfg, "synthetic"), _dataset(cfg, "source")
    os.makedirs(args.out, exist_ok=True)
    encoder = synthetic_pretrain(synthetic, source, cfg.train)
    save_encoder(encoder, os.path.join(args.out, PRETRAINED_FILE))
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = load_experiment(args)
    source, target = _dataset(cfg, "source"), _dataset(cfg, "target")
    if cfg.train.use_pretraining:
        init = load_encoder(_require(cfg.paths.get("pretrained", os.path.join(args.out, PRETRAINED_FILE))))
    else:
        init = initial_encoder(source.dim, cfg.train)
    os.makedirs(args.out, exist_ok=True)
    monitor = PurityMonitor(target.identity) if target.labeled else None
    b1, b2, report = adapt(init, source, target, cfg.train, monitor=monitor)
    if target.labeled:
        report.final = final_metrics(b1, b2, target, cfg.train.alpha)
    save_branch(b1, os.path.join(args.out, BRANCH_FILES["dthr"]))
    save_branch(b2, os.path.join(args.out, BRANCH_FILES["rihr"]))
    report.to_csv(os.path.join(args.out, REPORT_CSV))
    with open(os.path.join(args.out, REPORT_TXT), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.metrics_text())
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_experiment(args)
    target = _dataset(cfg, "target")
    if not target.labeled:
        raise ConfigError("evaluation needs identity labels on the target dataset")
    branch_paths = {k: os.path.join(args.out, f) for k, f in BRANCH_FILES.items()}
    pretrained_path = cfg.paths.get("pretrained", os.path.join(args.out, PRETRAINED_FILE))
    metrics: Dict[str, float] = {}
    if all(os.path.exists(p) for p in branch_paths.values()):
        b1, b2 = (load_branch(p) for p in branch_paths.values())
        metrics.update(final_metrics(b1, b2, target, cfg.train.alpha))
        result = evaluate_model((b1, b2), target, cfg.train.alpha)
    else:
        result = evaluate_model(load_encoder(_require(pretrained_path)), target)
    if os.path.exists(pretrained_path):
        metrics["pretrained_mAP"] = evaluate_model(load_encoder(pretrained_path), target).mAP
    metrics["mAP"] = result.mAP
    for k, v in result.cmc.items():
        metrics[f"rank{k}"] = v
    metrics["skipped_queries"] = len(result.skipped)
    with open(os.path.join(args.out, METRICS_FILE), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_kv(dict(sorted(metrics.items()))))
    result.write_per_query(os.path.join(args.out, PER_QUERY_FILE))
    print(f"mAP={result.mAP:.4f} rank1={result.cmc[1]:.4f}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smcr", description="Two-branch unsupervised domain adaptation on toy domains.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value file (spec file for gen-data, experiment file otherwise)")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    g = common(sub.add_parser("gen-data", help="generate synthetic/source/target datasets"))
    g.add_argument("--reference", action="store_true", help="use the built-in reference spec for --seed")
    g.add_argument("--noisy", action="store_true", help="use the noisy reference spec for --seed")
    common(sub.add_parser("pretrain", help="synthetic pretraining"))
    a = common(sub.add_parser("adapt", help="two-branch adaptation"))
    a.add_argument("--mode", choices=("ind", "col"))
    a.add_argument("--no-criteria", action="store_true", help="keep every clustered point")
    a.add_argument("--no-pretrain", action="store_true", help="start from the random initialization")
    a.add_argument("--alpha", type=float)
    a.add_argument("--beta", type=float)
    a.add_argument("--lambda", dest="lam", type=float)
    a.add_argument("--tau", type=float)
    common(sub.add_parser("eval", help="retrieval metrics on the target dataset"))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SMCRError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
