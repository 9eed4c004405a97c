"""``difsr`` command line: prepare, train, evaluate, diagnose.

Exit codes: 0 success, 1 validation error (bad config, missing or malformed
input), 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataset import DatasetParseError, InteractionDataset, ingest, make_batches, split_leave_one_out
from .diagnostics import (
    RigidityViolation,
    export_attention,
    gradient_rigidity_check,
    logit_ranks,
    rank_profile,
    summarize_ranks,
    write_rank_csv,
)
from .evaluation import evaluate
from .model import ConfigError, ModelConfig, load_checkpoint, save_checkpoint
from .train import fit

logger = logging.getLogger("difsr")

FORMAT_VERSION = 1


class ValidationError(Exception):
    pass


def _load_config(path) -> ModelConfig:
    if path is None:
        return ModelConfig()
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file {p} does not exist")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {p} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    return ModelConfig.from_dict(raw)


def _load_data(path) -> InteractionDataset:
    d = Path(path)
    if not (d / "vocab.json").is_file() or not (d / "dataset.npz").is_file():
        raise ValidationError(f"{d} is not a prepared dataset directory (run `difsr prepare`)")
    return InteractionDataset.load(d)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} {p} does not exist")
    return p


def _check_attributes(config: ModelConfig, ds: InteractionDataset) -> None:
    missing = [a.name for a in config.side_attributes if a.name not in ds.attribute_vocabs]
    if missing:
        raise ValidationError(f"config attributes {missing} not found in dataset (has {ds.attribute_names})")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    ds = ingest(
        _require(args.interactions, "interactions file"),
        _require(args.attributes, "attributes file") if args.attributes else None,
        min_count=args.min_count,
        max_values=args.max_values,
    )
    ds.save(args.out)
    sys.stdout.write(_dump(ds.manifest()))
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    ds = _load_data(args.data)
    _check_attributes(config, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    split = split_leave_one_out(ds)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log:
        params, state, reports = fit(ds, config, split.train, split.valid, log_file=log)
    save_checkpoint(out / "best.json", params, config, {"epoch": state.best_epoch})
    save_checkpoint(out / "last.json", state.last_params, config, {"epoch": config.epochs - 1 if config.epochs else None})
    with open(out / "eval_reports.jsonl", "w", encoding="utf-8") as fh:
        for epoch, rep in enumerate(reports):
            fh.write(json.dumps({"epoch": epoch, **rep.to_dict()}) + "\n")
    summary = {"format_version": FORMAT_VERSION, "best_epoch": state.best_epoch, "steps": state.step}
    if len(split.test):
        summary["test_best"] = evaluate(params, config, split.test).to_dict()
        summary["test_last"] = evaluate(state.last_params, config, split.test).to_dict()
    (out / "summary.json").write_text(_dump(summary))
    sys.stdout.write(_dump(summary))
    return 0


def cmd_evaluate(args) -> int:
    params, config = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    ds = _load_data(args.data)
    _check_attributes(config, ds)
    if params.n_items != ds.n_items:
        raise ValidationError(f"checkpoint has {params.n_items} items, dataset has {ds.n_items}")
    split = split_leave_one_out(ds)
    view = split.test if args.split == "test" else split.valid
    exclude = None if args.exclude_seen is None else args.exclude_seen == "true"
    report = evaluate(params, config, view, exclude_seen=exclude)
    sys.stdout.write(json.dumps(report.to_dict(timing=True), sort_keys=True) + "\n")
    return 0


RANK_DEFAULT = {"d": 32, "heads": 2, "layers": 2, "max_len": 64, "attributes": [{"name": "position", "dim": 16}], "dropout": 0.0}
GRAD_DEFAULT = {
    "d": 32, "heads": 2, "layers": 2, "max_len": 20, "dropout": 0.0,
    "attributes": [{"name": "category", "dim": 32}, {"name": "brand", "dim": 32}],
}


def cmd_diagnose(args) -> int:
    out = Path(args.out) if args.out else None
    if args.kind == "rank":
        if args.checkpoint:
            params, config = load_checkpoint(_require(args.checkpoint, "checkpoint"))
            if not args.data:
                raise ValidationError("diagnose rank with --checkpoint also needs --data")
            ds = _load_data(args.data)
            test = split_leave_one_out(ds).test
            rows = []
            for batch in make_batches(test, config.max_len, 64, shuffle=False):
                full = batch.lengths == config.max_len
                if full.any():  # padded sequences would cap the rank artificially
                    rows += [r for r in logit_ranks(params, config, batch, args.tol) if full[r["sample"]]]
        else:
            config = _load_config(args.config) if args.config else ModelConfig(**RANK_DEFAULT)
            rows = rank_profile(config, args.trials, args.tol, variants=args.variants.split(","))
        if out:
            write_rank_csv(rows, out)
        sys.stdout.write(_dump(summarize_ranks(rows)))
        return 0
    if args.kind == "grad":
        config = _load_config(args.config) if args.config else ModelConfig(**GRAD_DEFAULT)
        verdict = gradient_rigidity_check(args.variant, config, seed=args.seed, strict=False)
        text = _dump(verdict)
        if out:
            out.write_text(text)
        sys.stdout.write(text)
        if args.variant != "dif" and not verdict["equal"]:
            logger.error("gradient rigidity violated: %s", verdict.get("violations"))
            return 2
        return 0
    # attention
    if not (args.checkpoint and args.data and args.user and out):
        raise ValidationError("diagnose attention needs --checkpoint, --data, --user and --out")
    params, config = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    ds = _load_data(args.data)
    export_attention(params, config, ds, args.user, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="difsr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest, 5-core filter and cache a dataset")
    p.add_argument("--interactions", required=True)
    p.add_argument("--attributes")
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--max-values", type=int, default=8)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="full-ranking metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("valid", "test"), default="test")
    p.add_argument("--exclude-seen", choices=("true", "false"))
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="rank profile, gradient rigidity, attention export")
    p.add_argument("kind", choices=("rank", "grad", "attention"))
    p.add_argument("--config")
    p.add_argument("--variant", default="sasrec_f", choices=("sasrec_f", "nova", "dif"))
    p.add_argument("--variants", default="sasrec_f,nova,dif")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--user")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigError, DatasetParseError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except (RigidityViolation, LookupError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except Exception as exc:  # noqa: BLE001
        sys.stderr.write(f"runtime error: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
