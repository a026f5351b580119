"""Command-line entry point.

Commands: synth, benchmark, ablate-losses, feature-importance,
export-embeddings. Exit codes: 0 success, 1 runtime/training failure,
2 config/validation failure. ``MASKMLP_LOG`` picks the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .data import SynthConfig, compute_missing_rate, derive_labels, generate_synthetic, write_csv
from .errors import ConfigError, MaskMlpError, ParseError, SchemaError
from .pipeline import (
    RunConfig,
    run_benchmark,
    run_export_embeddings,
    run_feature_importance,
    run_loss_ablation,
    write_ablation_outputs,
    write_benchmark_outputs,
    _write_importance,
)
from .serialize import dumps_canonical

log = logging.getLogger("maskmlp")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _setup_logging() -> None:
    level = os.environ.get("MASKMLP_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--csv", help="dataset CSV path")
    p.add_argument("--schema", help="schema JSON path (defaults to the ECRI schema)")
    p.add_argument("--students", type=int, help="synthetic: number of students")
    p.add_argument("--schools", type=int, help="synthetic: number of schools")
    p.add_argument("--missing-rate", type=float, help="synthetic: target missing rate")
    p.add_argument("--mechanism", choices=("MCAR", "MAR"), help="synthetic: missingness mechanism")
    p.add_argument("--intervention-effect", type=float, help="synthetic: treated improvement shift")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override file values")
    p.add_argument("--seed", type=int, help="master seed (mandatory here or in the config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--task", choices=("word-id", "word-attack"), help="prediction task")
    p.add_argument("--split", choices=("school", "student"), help="grouped split mode")
    p.add_argument("--k", type=int, help="number of folds")
    p.add_argument("--models", help="comma-separated model kinds")
    _add_data_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskmlp",
        description="Masked self-supervised MLP pre-training for tabular prediction "
                    "under missing data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    p.add_argument("--students", type=int, default=1000)
    p.add_argument("--schools", type=int, default=10)
    p.add_argument("--missing-rate", type=float, default=0.3048)
    p.add_argument("--mechanism", choices=("MCAR", "MAR"), default="MAR")
    p.add_argument("--intervention-effect", type=float, default=1.5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("benchmark", help="run the grouped-CV model comparison")
    _add_run_flags(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("ablate-losses", help="sweep pre-training loss configurations")
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate_losses)

    p = sub.add_parser("feature-importance", help="drop-one-feature retraining")
    _add_run_flags(p)
    p.set_defaults(func=cmd_feature_importance)

    p = sub.add_parser("export-embeddings", help="train once and dump embeddings")
    _add_run_flags(p)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def _resolve_config(args) -> RunConfig:
    payload: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        payload = json.loads(path.read_text())
    if args.seed is not None:
        payload["seed"] = args.seed
    if args.out:
        payload["out"] = args.out
    if args.task:
        payload["task"] = args.task
    if args.split:
        payload["split"] = args.split
    if args.k is not None:
        payload["k"] = args.k
    if args.models:
        payload["models"] = [m.strip() for m in args.models.split(",") if m.strip()]

    data = dict(payload.get("data", {}))
    if args.csv:
        data["csv"] = args.csv
        data.pop("synth", None)
    if args.schema:
        data["schema"] = args.schema
    synth_flags = {
        "n_students": args.students,
        "n_schools": args.schools,
        "missing_rate": args.missing_rate,
        "missing_mechanism": args.mechanism,
        "intervention_effect": args.intervention_effect,
    }
    if any(v is not None for v in synth_flags.values()):
        synth = dict(data.get("synth", {}))
        synth.update({k: v for k, v in synth_flags.items() if v is not None})
        data["synth"] = synth
        data.pop("csv", None)
    payload["data"] = data
    if "seed" not in payload or payload["seed"] is None:
        raise ConfigError("--seed is mandatory (wall-clock seeding is not supported)")
    return RunConfig.from_dict(payload)


def _require_out(config: RunConfig) -> Path:
    if not config.out:
        raise ConfigError("--out (or config 'out') is required for this command")
    return Path(config.out)


def _fail_marker(out_dir: Path | None, message: str) -> None:
    if out_dir is None:
        return
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "FAILED").write_text(message + "\n")
    except OSError:
        log.error("could not write FAILED marker to %s", out_dir)


def cmd_synth(args) -> int:
    config = SynthConfig(
        n_students=args.students,
        n_schools=args.schools,
        missing_rate=args.missing_rate,
        missing_mechanism=args.mechanism,
        intervention_effect=args.intervention_effect,
        seed=args.seed,
    )
    config.validate()
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory not writable: {exc}") from None

    dataset = generate_synthetic(config)
    write_csv(dataset, out / "dataset.csv")
    dataset.schema.to_json(out / "schema.json")

    tasks = {}
    for task in dataset.schema.tasks:
        view = derive_labels(dataset, task)
        tasks[task] = {
            "n_labeled": int(view.n_rows),
            "control_mean_improvement": float(view.threshold),
            "positive_fraction": float(view.labels.mean()),
        }
    manifest = {
        "generator": {
            "n_students": config.n_students,
            "n_schools": config.n_schools,
            "latent_dim": config.latent_dim,
            "missing_rate": config.missing_rate,
            "missing_mechanism": config.missing_mechanism,
            "intervention_effect": config.intervention_effect,
            "seed": config.seed,
            "class_size": config.class_size,
        },
        "n_rows": int(dataset.n_rows),
        "n_schools": int(len(set(dataset.school_id.tolist()))),
        "n_teachers": int(len(set(dataset.teacher_id.tolist()))),
        "realized_missing_rate": compute_missing_rate(dataset),
        "intervention_fraction": float(dataset.intervention.mean()),
        "tasks": tasks,
    }
    (out / "manifest.json").write_text(dumps_canonical(manifest))
    log.info("wrote %s rows to %s", dataset.n_rows, out / "dataset.csv")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    config = _resolve_config(args)
    out = _require_out(config)
    try:
        result = run_benchmark(config)
        write_benchmark_outputs(result, out)
    except MaskMlpError as exc:
        _fail_marker(out, f"benchmark failed: {exc}")
        raise
    log.info("benchmark report written to %s", out / "report.json")
    return EXIT_OK


def cmd_ablate_losses(args) -> int:
    config = _resolve_config(args)
    out = _require_out(config)
    try:
        rows = run_loss_ablation(config)
        write_ablation_outputs(rows, out)
    except MaskMlpError as exc:
        _fail_marker(out, f"loss ablation failed: {exc}")
        raise
    log.info("loss ablation written to %s", out)
    return EXIT_OK


def cmd_feature_importance(args) -> int:
    config = _resolve_config(args)
    out = _require_out(config)
    try:
        run_feature_importance(config, out_dir=out)
    except MaskMlpError as exc:
        _fail_marker(out, f"feature importance failed: {exc}")
        raise
    log.info("feature importance written to %s", out)
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    config = _resolve_config(args)
    out = _require_out(config)
    try:
        path = run_export_embeddings(config, out)
    except MaskMlpError as exc:
        _fail_marker(out, f"embedding export failed: {exc}")
        raise
    log.info("embeddings written to %s", path)
    return EXIT_OK


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemaError, ParseError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except MaskMlpError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
