"""Command-line front end: gen-data, inject-noise, train, eval, detect-report.

Exit codes: 0 success, 2 usage or configuration error, 3 data or contract
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from npc_lab import __version__
from npc_lab.data import NoiseSpec, generate_synthetic, inject_noise, load_pairs, split_dev, write_collection, write_pairs
from npc_lab.detection import detection_report
from npc_lab.encoder import atomic_write_text, load_checkpoint
from npc_lab.errors import ConfigurationError, DataParseError, NpcError
from npc_lab.evaluation import DEFAULT_DEPTH, evaluate_pairs, export_ppl_histogram
from npc_lab.training import METHODS, NEGATIVE_MODES, TrainConfig, detect_epoch, run

log = logging.getLogger("npc_lab")

# keys a config file may carry besides TrainConfig fields
PATH_KEYS = ("pairs", "collection", "dev", "out_dir")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name, raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise ConfigurationError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:
            # the only optional field is an integer batch size
            return None if raw.lower() in ("", "none") else int(raw)
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {raw!r}") from None
    return raw


def read_config_file(path):
    """Parse a flat ``key = value`` file into (TrainConfig overrides, resolved paths)."""
    defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    base = os.path.dirname(os.path.abspath(path))
    values, paths = {}, {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key in PATH_KEYS:
                paths[key] = os.path.normpath(os.path.join(base, raw))
            elif key in defaults:
                values[key] = _coerce(key, raw, defaults[key])
            else:
                raise ConfigurationError(f"{path}:{lineno}: unknown config key {key!r}")
    return values, paths


def _write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _config_from_checkpoint(record):
    try:
        return TrainConfig.from_dict(record.get("config", {}))
    except ConfigurationError as exc:
        raise DataParseError(f"checkpoint carries an invalid config: {exc}") from None


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args):
    pairs, collection = generate_synthetic(
        args.topics, args.pairs_per_topic, args.vocab_size, args.tokens_per_text, args.seed
    )
    os.makedirs(args.out_dir, exist_ok=True)
    train, dev = split_dev(pairs, args.dev_fraction, args.seed)
    write_pairs(os.path.join(args.out_dir, "pairs.jsonl"), train)
    if dev:
        write_pairs(os.path.join(args.out_dir, "dev.jsonl"), dev)
    write_collection(os.path.join(args.out_dir, "collection.jsonl"), collection)
    print(f"wrote {len(train)} training pairs, {len(dev)} dev pairs, {len(collection)} documents to {args.out_dir}")


def cmd_inject(args):
    pairs, _ = load_pairs(args.pairs)
    noisy = inject_noise(pairs, NoiseSpec(args.ratio, args.seed))
    os.makedirs(args.out_dir, exist_ok=True)
    out = os.path.join(args.out_dir, "pairs.jsonl")
    write_pairs(out, noisy)
    print(f"corrupted {sum(not p.truth_clean for p in noisy)} of {len(noisy)} pairs; wrote {out}")


def cmd_train(args):
    values, paths = read_config_file(args.config) if args.config else ({}, {})
    overrides = {
        "method": args.method,
        "negatives": args.negatives,
        "hard_negatives_per_query": args.hard_k,
        "total_epochs": args.epochs,
        "warmup_epochs": args.warmup,
        "seed": args.seed,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("pairs", "collection", "dev", "out_dir"):
        flag = getattr(args, key)
        if flag is not None:
            paths[key] = flag
    for key in ("pairs", "collection", "out_dir"):
        if key not in paths:
            raise ConfigurationError(f"train needs --{key.replace('_', '-')} (flag or config key {key})")
    config = TrainConfig.from_dict(values)

    pairs, collection = load_pairs(paths["pairs"], paths["collection"])
    dev = None
    if paths.get("dev"):
        dev, _ = load_pairs(paths["dev"])
        collection.check_pairs(dev)
    result = run(config, pairs, collection, dev, out_dir=paths["out_dir"])
    final = result.final
    summary = {"epochs": len(result.log), "best_epoch": result.best_epoch}
    if final and "dev" in final:
        summary["final_dev"] = final["dev"]
    print(json.dumps(summary, sort_keys=True))


def cmd_eval(args):
    vocab, params, record = load_checkpoint(args.checkpoint)
    config = _config_from_checkpoint(record)
    pairs, collection = load_pairs(args.pairs, args.collection)
    report = evaluate_pairs(params, vocab, pairs, collection, config.similarity, depth=args.depth)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        _write_json(os.path.join(args.out_dir, "eval.json"), report)
    print(json.dumps(report, sort_keys=True))


def cmd_detect_report(args):
    vocab, params, record = load_checkpoint(args.checkpoint)
    config = _config_from_checkpoint(record)
    updates = {"ppl_negatives": args.negatives_for_ppl, "seed": args.seed}
    if args.batch_size is not None:
        updates["detect_batch_size"] = args.batch_size
    if args.hard_k is not None:
        updates["hard_negatives_per_query"] = args.hard_k
    if args.threshold is not None:
        updates["threshold"] = args.threshold
    config = dataclasses.replace(config, **updates)
    pairs, collection = load_pairs(args.pairs, args.collection)

    records, fit, flags = detect_epoch(params, vocab, pairs, collection, config, args.epoch)
    truth = {p.pair_id: p.truth_clean for p in pairs}
    report = {
        "negatives_for_ppl": config.ppl_negatives,
        "num_pairs": len(pairs),
        "gmm": fit.to_dict() if fit is not None else None,
        "flags": {"clean": flags.num_clean, "noisy": flags.num_noisy},
    }
    if all(t is not None for t in truth.values()) and pairs:
        report["detection"] = detection_report(flags, pairs)
        for label, wanted in (("clean", True), ("noisy", False)):
            values = [r.ppl for r in records if truth[r.pair_id] is wanted]
            report[f"ppl_mean_{label}"] = sum(values) / len(values) if values else None
    os.makedirs(args.out_dir, exist_ok=True)
    _write_json(os.path.join(args.out_dir, "detect_report.json"), report)
    export_ppl_histogram(records, flags, truth, os.path.join(args.out_dir, "ppl_histogram.csv"))
    print(json.dumps(report.get("detection", report["flags"]), sort_keys=True))


# -- parser ------------------------------------------------------------------


def _ratio(text):
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="npc-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p, out_required=True, seed_default=0):
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--out-dir", required=out_required)

    p = sub.add_parser("gen-data", help="generate a synthetic topic corpus")
    p.add_argument("--topics", type=int, required=True)
    p.add_argument("--pairs-per-topic", type=int, required=True)
    p.add_argument("--vocab-size", type=int, default=500)
    p.add_argument("--tokens-per-text", type=int, default=16)
    p.add_argument("--dev-fraction", type=float, default=0.0, help="hold out this share as dev.jsonl")
    shared(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("inject-noise", help="corrupt a share of pairs with unrelated documents")
    p.add_argument("--pairs", required=True)
    p.add_argument("--ratio", type=_ratio, required=True)
    shared(p)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("train", help="train a baseline or noise-corrected retriever")
    p.add_argument("--config", help="key=value file with training options and data paths")
    p.add_argument("--pairs")
    p.add_argument("--collection")
    p.add_argument("--dev")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--negatives", choices=NEGATIVE_MODES)
    p.add_argument("--hard-k", type=int)
    p.add_argument("--epochs", type=int, help="total epochs, warmup included")
    p.add_argument("--warmup", type=int)
    shared(p, out_required=False, seed_default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True, help="queries with their gold documents")
    p.add_argument("--collection")
    p.add_argument("--depth", type=int, default=DEFAULT_DEPTH)
    shared(p, out_required=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect-report", help="noise detection metrics and perplexity histogram")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--collection")
    p.add_argument("--negatives-for-ppl", choices=NEGATIVE_MODES, default="in_batch")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--hard-k", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--epoch", type=int, default=0, help="epoch index keying the detection shuffle")
    shared(p)
    p.set_defaults(func=cmd_detect_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except NpcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
