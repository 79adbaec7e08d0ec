"""Command-line interface for batch use.

Every subcommand is reproducible given identical flags and seed, and writes
exactly one run manifest (command, resolved configuration, seed, input and
output paths, checkpoint fingerprint, wall clock, artifact versions)
alongside its outputs.

Exit codes: 0 success, 2 usage error, 3 data/schema error, 4 numerical
failure. Failures print a single machine-parseable line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, fields

import numpy as np
import torch

from . import __version__
from .errors import ConfigError, DataError, NumericalFailure, SchemaError
from .evaluation import (
    ablate_single_step_vs_diffusion,
    generate_synthetic,
    leave_one_out_metrics,
    masking_sweep,
    optimal_constants,
    sweep_csv,
    toy_datasets,
    TOY_NAMES,
)
from .generation import SampleConfig, impute, mask_unobserved, sampler_rngs
from .model import (
    ModelConfig,
    checkpoint_fingerprint,
    load_checkpoint,
)
from .schema import (
    EntitySchema,
    fit_normalizers,
    infer_schema_from_csv,
    load_schema,
    read_csv_dataset,
    read_jsonl_dataset,
    save_schema,
    write_csv_dataset,
    write_jsonl_dataset,
)
from .seeding import numpy_rng, split_seed
from .training import TrainConfig, fit


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line machine-parseable usage errors
        raise UsageError(message)


class UsageError(Exception):
    pass


def _read_text(path: str) -> str:
    try:
        with open(path, "r") as fh:
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc


def _write_text(path: str, content: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(content)


def _load_dataset(path: str, schema: EntitySchema):
    text = _read_text(path)
    if path.endswith((".jsonl", ".json")):
        return read_jsonl_dataset(text, schema)
    return read_csv_dataset(text, schema)


def _write_dataset(path: str, entities, schema: EntitySchema):
    if path.endswith((".jsonl", ".json")):
        _write_text(path, write_jsonl_dataset(entities, schema))
    else:
        _write_text(path, write_csv_dataset(entities, schema))


def _manifest(
    command: str,
    config: dict,
    seed: int,
    inputs: list[str],
    outputs: list[str],
    started: float,
    ckpt_fingerprint: str | None = None,
) -> dict:
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": sorted(inputs),
        "outputs": sorted(outputs),
        "checkpoint_fingerprint": ckpt_fingerprint,
        "wall_clock_s": round(time.time() - started, 3),
        "versions": {
            "entdiff": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
    }


def _write_manifest(anchor_path: str, manifest: dict) -> None:
    if os.path.isdir(anchor_path):
        path = os.path.join(anchor_path, "manifest.json")
    else:
        path = anchor_path + ".manifest.json"
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _coerce(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _parse_config_file(path: str) -> dict:
    """Flat key=value lines with dotted keys, '#' comments allowed."""
    tree: dict = {}
    for lineno, line in enumerate(_read_text(path).splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        _assign_dotted(tree, key.strip(), _coerce(value.strip()))
    return tree


def _assign_dotted(tree: dict, dotted: str, value) -> None:
    node = tree
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"config key {dotted!r} nests under a scalar")
    node[parts[-1]] = value


def _dataclass_from_dict(cls, values: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} option(s): {sorted(unknown)}")
    return cls(**values)


def _parse_paths_arg(raw: str) -> list[str]:
    return [p for p in (part.strip() for part in raw.split(",")) if p]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_schema_infer(args) -> int:
    started = time.time()
    hints = {}
    for hint in args.hint or []:
        if "=" not in hint:
            raise UsageError(f"--hint takes column=kind, got {hint!r}")
        col, kind = hint.split("=", 1)
        hints[col] = kind
    schema = infer_schema_from_csv(
        _read_text(args.csv),
        type_hints=hints or None,
        categorical_cutoff=args.cutoff,
        missing_sentinel=args.missing_sentinel,
    )
    _write_text(args.output, save_schema(schema))
    _write_manifest(
        args.output,
        _manifest(
            "schema-infer",
            {"cutoff": args.cutoff, "missing_sentinel": args.missing_sentinel, "hints": hints},
            seed=0,
            inputs=[args.csv],
            outputs=[args.output],
            started=started,
        ),
    )
    return 0


def _cmd_train(args) -> int:
    started = time.time()
    config_tree = _parse_config_file(args.config) if args.config else {}
    for override in args.set or []:
        if "=" not in override:
            raise UsageError(f"--set takes dotted.key=value, got {override!r}")
        key, value = override.split("=", 1)
        _assign_dotted(config_tree, key.strip(), _coerce(value.strip()))

    train_values = dict(config_tree.get("train", {}))
    if args.seed is not None:
        train_values["seed"] = args.seed
    if args.epochs is not None:
        train_values["epochs"] = args.epochs
    model_cfg = _dataclass_from_dict(ModelConfig, dict(config_tree.get("model", {})), "model")
    train_cfg = _dataclass_from_dict(TrainConfig, train_values, "train")

    schema = load_schema(_read_text(args.schema))
    dataset = _load_dataset(args.data, schema)
    schema = fit_normalizers(schema, dataset)
    dataset = _load_dataset(args.data, schema)

    model, _curve = fit(dataset, schema, model_cfg, train_cfg, rundir=args.output)
    ckpt_path = os.path.join(args.output, "checkpoint.pt")
    _write_manifest(
        args.output,
        _manifest(
            "train",
            {"model": asdict(model_cfg), "train": asdict(train_cfg)},
            seed=train_cfg.seed,
            inputs=[args.data, args.schema],
            outputs=[ckpt_path, os.path.join(args.output, "loss_curve.csv")],
            started=started,
            ckpt_fingerprint=checkpoint_fingerprint(ckpt_path),
        ),
    )
    return 0


def _check_schema_match(model, schema_path: str | None):
    if schema_path is None:
        return
    schema = load_schema(_read_text(schema_path))
    if schema.fingerprint() != model.schema.fingerprint():
        raise DataError(
            "schema fingerprint mismatch: checkpoint was trained with a different schema"
        )


def _cmd_sample(args) -> int:
    started = time.time()
    model = load_checkpoint(args.ckpt)
    _check_schema_match(model, args.schema)
    d_eff = model.schema.n_leaves
    leap = args.leap
    if leap > d_eff:
        print(f"warning: leap {leap} exceeds the {d_eff} leaves; clamping", file=sys.stderr)
        leap = d_eff
    entities = generate_synthetic(
        model, args.n, leap=leap, seed=args.seed, numeric_mode=args.numeric_mode
    )
    _write_dataset(args.output, entities, model.schema)
    _write_manifest(
        args.output,
        _manifest(
            "sample",
            {"n": args.n, "leap": leap, "numeric_mode": args.numeric_mode},
            seed=args.seed,
            inputs=[args.ckpt],
            outputs=[args.output],
            started=started,
            ckpt_fingerprint=checkpoint_fingerprint(args.ckpt),
        ),
    )
    return 0


def _cmd_impute(args) -> int:
    started = time.time()
    model = load_checkpoint(args.ckpt)
    _check_schema_match(model, args.schema)
    dataset = _load_dataset(args.data, model.schema)
    observed = None if args.observe == "auto" else set(_parse_paths_arg(args.observe))
    if observed is not None:
        known = {leaf.path for leaf in model.schema.leaves}
        unknown = observed - known
        if unknown:
            raise DataError(f"--observe names unknown leaves: {sorted(unknown)}")
    mode = "point" if args.point else "sample"
    cfg = SampleConfig(leap=args.leap, seed=args.seed, numeric_mode=mode)
    results = []
    for i, entity in enumerate(dataset):
        partial = mask_unobserved(entity, observed, model.schema)
        rngs = sampler_rngs(split_seed(args.seed, "impute", i))
        results.append(impute(model, partial, cfg, rngs=rngs))
    _write_dataset(args.output, results, model.schema)
    _write_manifest(
        args.output,
        _manifest(
            "impute",
            {"observe": args.observe, "leap": args.leap, "numeric_mode": mode},
            seed=args.seed,
            inputs=[args.ckpt, args.data],
            outputs=[args.output],
            started=started,
            ckpt_fingerprint=checkpoint_fingerprint(args.ckpt),
        ),
    )
    return 0


def _cmd_evaluate(args) -> int:
    started = time.time()
    model = load_checkpoint(args.ckpt)
    _check_schema_match(model, args.schema)
    dataset = _load_dataset(args.data, model.schema)
    constants = None
    inputs = [args.ckpt, args.data]
    if args.train_data:
        constants = optimal_constants(_load_dataset(args.train_data, model.schema), model.schema)
        inputs.append(args.train_data)
    report = leave_one_out_metrics(model, dataset, constants=constants)
    _write_text(args.output, json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    _write_manifest(
        args.output,
        _manifest(
            "evaluate",
            {"train_data": args.train_data},
            seed=0,
            inputs=inputs,
            outputs=[args.output],
            started=started,
            ckpt_fingerprint=checkpoint_fingerprint(args.ckpt),
        ),
    )
    return 0


def _cmd_sweep(args) -> int:
    started = time.time()
    model = load_checkpoint(args.ckpt)
    _check_schema_match(model, args.schema)
    dataset = _load_dataset(args.data, model.schema)
    fractions = [float(f) for f in _parse_paths_arg(args.fractions)]
    reports = masking_sweep(
        model, dataset, fractions, trials=args.trials, rng=numpy_rng(args.seed, "sweep")
    )
    _write_text(args.output, sweep_csv(reports))
    _write_manifest(
        args.output,
        _manifest(
            "sweep",
            {"fractions": fractions, "trials": args.trials},
            seed=args.seed,
            inputs=[args.ckpt, args.data],
            outputs=[args.output],
            started=started,
            ckpt_fingerprint=checkpoint_fingerprint(args.ckpt),
        ),
    )
    return 0


def _cmd_ablate(args) -> int:
    started = time.time()
    model = load_checkpoint(args.ckpt)
    _check_schema_match(model, args.schema)
    dataset = _load_dataset(args.data, model.schema)
    if args.test_data:
        test = _load_dataset(args.test_data, model.schema)
        train = dataset
    else:
        order = numpy_rng(args.seed, "ablate-split").permutation(len(dataset))
        n_test = max(1, len(dataset) // 5)
        test_idx = set(order[:n_test].tolist())
        train = [dataset[i] for i in range(len(dataset)) if i not in test_idx]
        test = [dataset[i] for i in sorted(test_idx)]
    if (args.target is None) != (args.task is None):
        raise UsageError("--target and --task must be given together")
    report, _sets = ablate_single_step_vs_diffusion(
        model,
        train,
        test,
        seed=args.seed,
        n_synthetic=args.n,
        target_path=args.target,
        task=args.task,
    )
    _write_text(args.output, json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    _write_manifest(
        args.output,
        _manifest(
            "ablate",
            {"target": args.target, "task": args.task, "n": args.n, "test_data": args.test_data},
            seed=args.seed,
            inputs=[p for p in (args.ckpt, args.data, args.test_data) if p],
            outputs=[args.output],
            started=started,
            ckpt_fingerprint=checkpoint_fingerprint(args.ckpt),
        ),
    )
    return 0


def _cmd_toy(args) -> int:
    started = time.time()
    entities, schema = toy_datasets(args.name, args.n, noise=args.noise, seed=args.seed)
    _write_dataset(args.output, entities, schema)
    schema_out = args.schema_out or args.output + ".schema.json"
    _write_text(schema_out, save_schema(schema))
    _write_manifest(
        args.output,
        _manifest(
            "toy",
            {"name": args.name, "n": args.n, "noise": args.noise},
            seed=args.seed,
            inputs=[],
            outputs=[args.output, schema_out],
            started=started,
        ),
    )
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="entdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schema-infer", help="infer a schema from a CSV")
    p.add_argument("csv")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--cutoff", type=int, default=20)
    p.add_argument("--missing-sentinel", default="NA")
    p.add_argument("--hint", action="append", metavar="COLUMN=KIND")
    p.set_defaults(func=_cmd_schema_infer)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("-o", "--output", required=True, help="run directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sample", help="draw unconditional synthetic entities")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--schema", default=None)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--leap", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--numeric-mode", choices=["sample", "point"], default="sample")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("impute", help="fill unobserved properties")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--schema", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--observe", default="auto", help="comma-separated leaf paths, or 'auto'")
    p.add_argument("--leap", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--point", action="store_true", help="deterministic point imputation")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_impute)

    p = sub.add_parser("evaluate", help="leave-one-out point-prediction metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--schema", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--train-data", default=None, help="source for the constant baseline")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="metrics across masking fractions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--schema", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--fractions", required=True, help="comma-separated fractions in [0,1)")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("ablate", help="autoregressive vs single-step synthesis")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--schema", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--test-data", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--task", choices=["regression", "classification"], default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("toy", help="emit a built-in toy dataset")
    p.add_argument("--name", choices=list(TOY_NAMES), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schema-out", default=None)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=_cmd_toy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except (SchemaError, DataError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    except NumericalFailure as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
