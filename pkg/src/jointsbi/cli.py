"""Command line surface: simulate, train, diagnose, estimate.

Every command reads the same YAML run configuration, validated against
``CONFIG_SCHEMA`` before any work happens; unknown keys are rejected.  The
sha256 hash of the validated configuration is embedded in every artifact a
command writes, so outputs can always be traced back to the exact settings
that produced them.  Exit codes: 0 success, 1 usage error, 2 runtime error.

Wall-clock timestamps appear only in sidecar metadata ("created" fields),
never inside report bodies; re-running a command with the same config and
seed reproduces report files byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import yaml

from . import FORMAT_VERSION, __version__
from .diagnostics import fault_attribution, run_calibration, save_calibration_report
from .errors import CheckpointError, JointSbiError, ModelMismatchError
from .estimators import estimate_elpd, estimate_lml, loo_cv, save_estimate
from .kernel.dense import ACTIVATIONS
from .kernel.rng import derive_seed, make_rng
from .simulators import MODELS, load_dataset, make_model, presimulate, save_dataset
from .training import (
    ArchitectureConfig,
    TrainingConfig,
    checkpoint_load,
    checkpoint_save,
    default_architecture,
    default_training_config,
    train,
)

# paths may be overridden from the environment; nothing else may be
_ENV_PATH_KEYS = {
    "dataset": "JOINTSBI_DATASET",
    "checkpoint": "JOINTSBI_CHECKPOINT",
    "reports": "JOINTSBI_REPORTS",
}

_TRAINING_PROPS = {
    "budget": {"type": "integer", "minimum": 1},
    "epochs": {"type": "integer", "minimum": 1},
    "batch_size": {"type": "integer", "minimum": 1},
    "initial_lr": {"type": "number", "exclusiveMinimum": 0},
    "min_lr": {"type": "number", "minimum": 0},
    "lambda_mmd": {"type": "number", "minimum": 0},
    "weight_decay": {"type": "number", "minimum": 0},
    "regime": {"enum": ["offline", "online"]},
    "validation_fraction": {"type": "number", "minimum": 0,
                            "exclusiveMaximum": 0.5},
    "seed": {"type": "integer", "minimum": 0},
}

_ARCHITECTURE_PROPS = {
    "posterior_layers": {"type": "integer", "minimum": 1},
    "likelihood_layers": {"type": "integer", "minimum": 1},
    "subnet_hidden": {"type": "array", "minItems": 1,
                      "items": {"type": "integer", "minimum": 1}},
    "activation": {"enum": sorted(ACTIVATIONS)},
    "summary_dim": {"type": "integer", "minimum": 1},
    "equivariant_modules": {"type": "integer", "minimum": 1},
    "equivariant_dim": {"type": "integer", "minimum": 1},
    "recurrent_hidden": {"type": "integer", "minimum": 1},
    "memory_hidden": {"type": "integer", "minimum": 1},
    "posterior_latent": {"enum": ["gaussian", "student_t"]},
    "posterior_df": {"type": "number", "exclusiveMinimum": 2},
    "likelihood_latent": {"enum": ["gaussian", "student_t"]},
    "likelihood_df": {"type": "number", "exclusiveMinimum": 2},
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["model"],
    "properties": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                "name": {"enum": sorted(MODELS)},
                "constants": {"type": "object"},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": _TRAINING_PROPS,
        },
        "architecture": {
            "type": "object",
            "additionalProperties": False,
            "properties": _ARCHITECTURE_PROPS,
        },
        "diagnostics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_datasets": {"type": "integer", "minimum": 1},
                "n_posterior_draws": {"type": "integer", "minimum": 1},
                "level": {"type": "number", "exclusiveMinimum": 0,
                          "exclusiveMaximum": 1},
            },
        },
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dataset": {"type": "string"},
                "checkpoint": {"type": "string"},
                "reports": {"type": "string"},
            },
        },
    },
}


class UsageError(Exception):
    """Bad invocation or bad configuration; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # route argparse's own complaints through the usage exit code
    def error(self, message):
        raise UsageError(message)


def load_config(path: str | Path) -> dict:
    """Read and schema-validate a YAML run configuration."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as err:
        raise UsageError(f"could not parse {path}: {err}") from err
    if raw is None:
        raw = {}
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        where = "/".join(str(part) for part in err.absolute_path) or "<root>"
        raise UsageError(f"invalid config at {where}: {err.message}") from err
    return raw


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _resolve_path(config: dict, key: str, flag_value) -> Path | None:
    """Precedence: command flag, then environment, then config."""
    if flag_value:
        return Path(flag_value)
    env = os.environ.get(_ENV_PATH_KEYS[key])
    if env:
        return Path(env)
    configured = config.get("paths", {}).get(key)
    return Path(configured) if configured else None


def _build_model(config: dict):
    section = config["model"]
    constants = section.get("constants", {})
    try:
        return make_model(section["name"], **constants)
    except TypeError as err:
        raise UsageError(
            f"bad constants for model {section['name']!r}: {err}") from err


def _training_config(config: dict, seed_flag: int | None,
                     regime_flag: str | None = None) -> TrainingConfig:
    overrides = dict(config.get("training", {}))
    if seed_flag is not None:
        overrides["seed"] = seed_flag
    if regime_flag is not None:
        overrides["regime"] = regime_flag
    return default_training_config(config["model"]["name"], **overrides)


def _architecture(config: dict, model) -> ArchitectureConfig:
    section = config.get("architecture")
    base = default_architecture(model)
    if not section:
        return base
    merged = {**base.to_json(), **section}
    return ArchitectureConfig.from_json(merged)


def _print_format_version():
    print(f"format version {FORMAT_VERSION}")


# -- commands -------------------------------------------------------------


def cmd_simulate(args) -> int:
    config = load_config(args.config)
    digest = config_hash(config)
    model = _build_model(config)
    tcfg = _training_config(config, args.seed)
    n_rows = args.n if args.n is not None else tcfg.budget
    if n_rows < 1:
        raise UsageError(f"--n must be >= 1, got {n_rows}")
    out = _resolve_path(config, "dataset", args.out)
    if out is None:
        raise UsageError("no dataset path: pass --out or set paths.dataset")
    _print_format_version()
    batch = presimulate(model, n_rows, derive_seed(tcfg.seed, "dataset"))
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(batch, model, out,
                 extra_metadata={"config_hash": digest, "seed": tcfg.seed})
    print(f"wrote {n_rows} rows for {model.name} to {out}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    digest = config_hash(config)
    model = _build_model(config)
    tcfg = _training_config(config, args.seed,
                            "online" if args.online else None)
    arch = _architecture(config, model)
    out = _resolve_path(config, "checkpoint", args.out_checkpoint)
    if out is None:
        raise UsageError(
            "no checkpoint path: pass --out-checkpoint or set paths.checkpoint")
    data = None
    if args.data is not None:
        data_path = Path(args.data)
        if not data_path.exists():
            raise JointSbiError(f"dataset file not found: {data_path}")
        data, _ = load_dataset(data_path)
    _print_format_version()
    approx, trace = train(model, tcfg, arch, data=data)
    if trace.best_params is not None:
        approx = approx.with_params(trace.best_params)
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint_save(approx, out)
    trace_payload = {
        "format_version": FORMAT_VERSION,
        "config_hash": digest,
        "seed": tcfg.seed,
        "trace": trace.to_json(),
    }
    Path(f"{out}.trace.json").write_text(
        json.dumps(trace_payload, sort_keys=True), encoding="utf-8")
    meta = {
        "format_version": FORMAT_VERSION,
        "config_hash": digest,
        "model": model.name,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    Path(f"{out}.meta.json").write_text(
        json.dumps(meta, sort_keys=True), encoding="utf-8")
    best = trace.best_epoch if trace.best_epoch is not None else "n/a"
    print(f"checkpoint {out} (best validation epoch {best})")
    return 0


def _load_checkpoint_or_fail(path: Path):
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return checkpoint_load(path)


def cmd_diagnose(args) -> int:
    config = load_config(args.config)
    digest = config_hash(config)
    model = _build_model(config)
    ckpt = _resolve_path(config, "checkpoint", args.checkpoint)
    if ckpt is None:
        raise UsageError(
            "no checkpoint path: pass --checkpoint or set paths.checkpoint")
    approx = _load_checkpoint_or_fail(ckpt)
    if approx.model_name != model.name:
        raise ModelMismatchError(
            f"checkpoint was trained on {approx.model_name!r}, "
            f"config names {model.name!r}")
    section = config.get("diagnostics", {})
    n_datasets = args.n_datasets or section.get("n_datasets", 100)
    n_draws = args.s or section.get("n_posterior_draws", 100)
    level = section.get("level", 0.95)
    seed = args.seed if args.seed is not None else \
        config.get("training", {}).get("seed", 0)
    out_dir = _resolve_path(config, "reports", args.out_dir) or Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    _print_format_version()
    modes = ["sbc", "jsbc"] if args.mode == "both" else [args.mode]
    reports = {}
    for mode in modes:
        rng = make_rng(derive_seed(seed, "diagnose", mode))
        report = run_calibration(approx, model, n_datasets, n_draws, mode,
                                 rng, level=level)
        reports[mode] = report
        save_calibration_report(
            report, out_dir / f"{mode}_report.ndjson",
            plot_path=out_dir / f"{mode}_plot.json",
            extra={"config_hash": digest, "seed": seed})
        verdict = "pass" if report.verdict else "fail"
        print(f"{mode}: {verdict} ({n_datasets} datasets, {n_draws} draws)")
    if args.mode == "both":
        fault = fault_attribution(reports["sbc"], reports["jsbc"])
        payload = {"format_version": FORMAT_VERSION, "config_hash": digest,
                   "seed": seed, **fault}
        (out_dir / "fault_attribution.json").write_text(
            json.dumps(payload, sort_keys=True), encoding="utf-8")
        print(f"implicated: {fault['implicated']}")
    return 0


def cmd_estimate(args) -> int:
    config = load_config(args.config)
    digest = config_hash(config)
    model = _build_model(config)
    ckpt = _resolve_path(config, "checkpoint", args.checkpoint)
    if ckpt is None:
        raise UsageError(
            "no checkpoint path: pass --checkpoint or set paths.checkpoint")
    approx = _load_checkpoint_or_fail(ckpt)
    if approx.model_name != model.name:
        raise ModelMismatchError(
            f"checkpoint was trained on {approx.model_name!r}, "
            f"config names {model.name!r}")
    data_path = _resolve_path(config, "dataset", args.data)
    if data_path is None:
        raise UsageError("no dataset path: pass --data or set paths.dataset")
    if not data_path.exists():
        raise JointSbiError(f"dataset file not found: {data_path}")
    batch, _ = load_dataset(data_path)
    if not 0 <= args.index < len(batch):
        raise UsageError(
            f"--index {args.index} outside dataset of {len(batch)} rows")
    x = batch.x[args.index]
    seed = args.seed if args.seed is not None else \
        config.get("training", {}).get("seed", 0)
    rng = make_rng(derive_seed(seed, "estimate", args.what))
    out_dir = _resolve_path(config, "reports", args.out_dir) or Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    _print_format_version()
    if args.what == "lml":
        est = estimate_lml(approx, x, model, args.s, rng)
        headline = f"point estimate {est.point_estimate:+.4f}"
    elif args.what == "elpd":
        holdout = args.holdout
        if not 1 <= holdout < x.shape[0]:
            raise UsageError(
                f"--holdout {holdout} must leave at least one fit point "
                f"of {x.shape[0]}")
        est = estimate_elpd(approx, x[:-holdout], x[-holdout:], args.s, rng)
        headline = f"total {est.total:+.4f} over {holdout} held-out points"
    else:
        est = loo_cv(approx, x, args.s, rng)
        headline = f"total {est.total:+.4f} over {x.shape[0]} folds"
    out = out_dir / f"estimate_{args.what}.ndjson"
    save_estimate(est, out, extra={
        "config_hash": digest, "seed": seed, "dataset_index": args.index,
        "model": model.name,
    })
    print(f"{args.what}: {headline} -> {out}")
    return 0


# -- wiring ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="jointsbi",
        description="Joint amortized posterior and likelihood estimation.",
        epilog="Run configuration schema (YAML):\n"
               + json.dumps(CONFIG_SCHEMA, indent=2, sort_keys=True),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--format-version", action="version",
                        version=str(FORMAT_VERSION),
                        help="print the artifact format version and exit")
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True,
                        help="YAML run configuration file")
    common.add_argument("--seed", type=int, default=None,
                        help="override the training seed for this command")
    common.add_argument("--format-version", action="version",
                        version=str(FORMAT_VERSION),
                        help="print the artifact format version and exit")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common],
                       help="write a prior-predictive dataset file")
    p.add_argument("--n", type=int, default=None,
                   help="rows to simulate (default: training budget)")
    p.add_argument("--out", default=None, help="dataset output path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common],
                       help="fit the joint networks, write a checkpoint")
    source = p.add_mutually_exclusive_group()
    source.add_argument("--data", default=None,
                        help="train from this presimulated dataset file")
    source.add_argument("--online", action="store_true",
                        help="simulate fresh batches during training")
    p.add_argument("--out-checkpoint", default=None, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("diagnose", parents=[common],
                       help="rank-based calibration reports")
    p.add_argument("--checkpoint", default=None, help="checkpoint to diagnose")
    p.add_argument("--mode", choices=["sbc", "jsbc", "both"], default="both")
    p.add_argument("--n-datasets", type=int, default=None)
    p.add_argument("--s", type=int, default=None,
                   help="posterior draws per dataset")
    p.add_argument("--out-dir", default=None, help="report directory")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("estimate", parents=[common],
                       help="log marginal likelihood / predictive estimates")
    p.add_argument("--checkpoint", default=None, help="checkpoint to use")
    p.add_argument("--what", choices=["lml", "elpd", "loo"], required=True)
    p.add_argument("--data", default=None, help="dataset file with the target rows")
    p.add_argument("--s", type=int, default=100, help="posterior draws")
    p.add_argument("--index", type=int, default=0,
                   help="dataset row to estimate on")
    p.add_argument("--holdout", type=int, default=5,
                   help="points held out from the end of the row for elpd")
    p.add_argument("--out-dir", default=None, help="report directory")
    p.set_defaults(func=cmd_estimate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and --format-version exit here
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (JointSbiError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
