"""Command-line entry point: ``aov {synth,train,score,eval,maps,dedup,pipeline}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
With ``--json`` exactly one JSON document is written to stdout; logs go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import jsonschema

from .autodiff import NumericError
from .errors import DataError, DegenerateWeights
from .evaluation import evaluate_records, export_map, format_table, run_benchmark
from .features import load_bundle, read_manifest, write_manifest
from .model import predict
from .params import load_checkpoint
from .pipeline import ConfigError, load_config_file, pipeline_run, resolve_config
from .scoring import assemble_prompt
from .synth import write_dataset
from .training import train_stage1
from .data_pipeline import CollectedItem, dedup_items

log = logging.getLogger("anomaly_expert")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file (flat keys or [synth]/[model]/[train] tables)")
    p.add_argument("--seed", type=int, help="seed applied to every config section")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    p.add_argument("--json", action="store_true", help="emit one JSON document on stdout")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aov", description="Anomaly expert: synthetic features, training, scoring, evaluation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a planted-anomaly feature dataset")
    _common(p)

    p = sub.add_parser("train", help="stage-1 training from a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("score", help="score one bundle and print its prompt layout")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--thresholds", default="0.3,0.7", help="s_low,s_high")

    p = sub.add_parser("eval", help="AUROC / text metrics for a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", help="required when the manifest lists bundle paths")

    p = sub.add_parser("maps", help="export significance maps as PGM images")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--bundle")
    group.add_argument("--manifest")

    p = sub.add_parser("dedup", help="per-class near-duplicate removal of a JSONL item manifest")
    _common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--threshold", type=float, default=0.99)

    p = sub.add_parser("pipeline", help="synth -> train -> eval end to end")
    _common(p)
    p.add_argument("--epochs", type=int)
    return parser


def _resolve(args):
    flat = load_config_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flat[k.strip()] = v.strip()
    if getattr(args, "epochs", None) is not None:
        flat["train.epochs"] = args.epochs
    cfg = resolve_config(flat, seed=args.seed)
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    return cfg


def _need_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} requires --out")
    return Path(args.out)


def cmd_synth(args) -> dict:
    cfg = _resolve(args)
    manifest = write_dataset(cfg.synth, _need_out(args))
    entries = read_manifest(manifest)
    return {
        "manifest": str(manifest),
        "n_bundles": len(entries),
        "n_anomalous": sum(e["label"] for e in entries),
        "n_test": sum(e["split"] == "test" for e in entries),
    }


def cmd_train(args) -> dict:
    cfg = _resolve(args)
    report = train_stage1(args.manifest, cfg.train, cfg.model, _need_out(args), args.val_manifest)
    return report.to_dict()


def _thresholds(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--thresholds expects 's_low,s_high', got {text!r}") from exc
    if not 0.0 <= lo < hi <= 1.0:
        raise UsageError("thresholds must satisfy 0 <= s_low < s_high <= 1")
    return lo, hi


def cmd_score(args) -> dict:
    thresholds = _thresholds(args.thresholds)
    params = load_checkpoint(args.checkpoint)
    bundle = load_bundle(args.bundle)
    selection, _ = predict(bundle, params)
    layout = assemble_prompt(bundle, selection, thresholds)
    return {"id": bundle.id, **layout.to_dict()}


def cmd_eval(args) -> dict:
    entries = read_manifest(args.manifest)
    if not entries:
        raise DataError(f"{args.manifest}: manifest is empty")
    if all("path" in e for e in entries):
        if not args.checkpoint:
            raise UsageError("eval over bundle paths requires --checkpoint")
        report = run_benchmark(args.manifest, args.checkpoint)
    else:
        report = evaluate_records(entries)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
        if "per_class" in report:
            (out / "report.txt").write_text(format_table(report) + "\n")
    return report


def cmd_maps(args) -> dict:
    params = load_checkpoint(args.checkpoint)
    out = _need_out(args)
    out.mkdir(parents=True, exist_ok=True)
    paths = [args.bundle] if args.bundle else [e["path"] for e in read_manifest(args.manifest)]
    files = []
    for path in paths:
        bundle = load_bundle(path)
        _, sig = predict(bundle, params)
        for j in range(sig.averaged.shape[0]):
            files.append(str(export_map(sig, j, out / f"{bundle.id}_crop{j}.pgm")))
    return {"maps": files}


def cmd_dedup(args) -> dict:
    raw = read_manifest(args.input)
    try:
        items = [CollectedItem.from_dict(d) for d in raw]
    except (KeyError, ValueError) as exc:
        raise DataError(f"{args.input}: {exc}") from exc
    if any(it.embedding is None for it in items):
        raise DataError(f"{args.input}: every item needs an 'embedding'")
    kept, removed = dedup_items(items, args.threshold)
    if args.out:
        write_manifest([it.to_dict() for it in kept], args.out)
    return {"n_input": len(items), "n_kept": len(kept), "removed_per_class": removed, "kept_ids": [it.id for it in kept]}


def cmd_pipeline(args) -> dict:
    cfg = _resolve(args)
    return pipeline_run(cfg, _need_out(args))


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "maps": cmd_maps,
    "dedup": cmd_dedup,
    "pipeline": cmd_pipeline,
}


def _emit(args, result: dict) -> None:
    if args.json:
        sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    elif args.command == "eval" and "per_class" in result:
        print(format_table(result))
        if "detection" in result:
            print(json.dumps({k: result[k] for k in ("detection", "rouge_l") if k in result}, indent=2))
    else:
        print(json.dumps(result, indent=2, sort_keys=True))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"aov: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        result = COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (NumericError, DegenerateWeights, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, jsonschema.ValidationError, OSError, ValueError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    _emit(args, result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
