"""Command-line entry point: ``kprn {gen,train,eval,ablate,inspect}``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error
(missing or malformed files, checkpoint/dataset mismatch), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from kprn import grounder as gr
from kprn import scene as sc
from kprn import synthgen as sg
from kprn.errors import CheckpointError, ConfigError, ContractViolation, NumericDomainError, ParseError
from kprn.trainkit import (
    TrainConfig,
    build_model,
    evaluate,
    expand_grid,
    format_table,
    load_checkpoint,
    parse_key_values,
    run_ablation,
    train_loop,
)
from kprn.trainkit.ablation import write_csv
from kprn.wordvec import load_embeddings

log = logging.getLogger("kprn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    """Input files are missing, malformed or inconsistent with each other."""


# --------------------------------------------------------------------------
# Shared helpers
# --------------------------------------------------------------------------


def _overrides(args):
    values = {}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc.strerror}") from None
        values.update(parse_key_values(text))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for key in ("iters", "seed"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    return values


def _train_config(args):
    return TrainConfig.from_mapping(_overrides(args))


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _load_split(data_dir, name):
    path = _require(Path(data_dir) / f"{name}.jsonl", f"{name} split")
    try:
        return sc.read_dataset(path)
    except (ParseError, ContractViolation) as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_table(data_dir):
    path = _require(Path(data_dir) / "embeddings.txt", "embedding file")
    try:
        return load_embeddings(path)
    except (ParseError, ContractViolation) as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_attributes(data_dir):
    path = Path(data_dir) / "attributes.txt"
    if not path.exists():
        return None
    try:
        return sg.read_attributes(path)
    except (ParseError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _check_features(model, scenes):
    for s in scenes:
        try:
            model.check_scene(gr.SceneFeatures(s))
        except ConfigError as exc:
            raise DataError(f"checkpoint and dataset disagree: {exc}") from None


def _load_model(checkpoint, data_dir):
    table = _load_table(data_dir)
    _require(checkpoint, "checkpoint")
    return load_checkpoint(checkpoint, table)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_gen(args):
    config = sg.SynthConfig.from_mapping(_overrides(args))
    summary = sg.generate_dataset(config, args.out)
    for k, v in summary.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_train(args):
    config = _train_config(args)
    train = _load_split(args.data, "train")
    val_path = Path(args.data) / "val.jsonl"
    val = _load_split(args.data, "val") if val_path.exists() else None
    table = _load_table(args.data)
    out = Path(args.out)
    ckpt = out / "checkpoint.json"
    start, state = 0, None
    if args.resume and ckpt.exists():
        model, state, start, saved = load_checkpoint(ckpt, table)
        # Everything but the run length must match the interrupted run.
        config = saved.with_overrides({"iters": config.iters})
        print(f"resuming from iteration {start}")
    else:
        model = build_model(train, table, config, _load_attributes(args.data))
    _check_features(model, train)
    result = train_loop(model, train, config, out_dir=out, eval_scenes=val, state=state, start_iter=start)
    if result.rows:
        last = result.rows[-1]
        print(f"iteration {last[0]}: total loss {last[5]:.4f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args):
    model, _, iteration, config = _load_model(args.checkpoint, args.data)
    overrides = _overrides(args)
    if overrides:
        config = config.with_overrides(overrides)
    scenes = _load_split(args.data, args.split)
    _check_features(model, scenes)
    try:
        result = evaluate(model, scenes, config, workers=args.workers)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    report = Path(args.report) if args.report else Path(args.checkpoint).with_name(f"eval_{args.split}.jsonl")
    report.parent.mkdir(parents=True, exist_ok=True)
    with open(report, "w", encoding="utf-8") as fh:
        for r in result.records:
            fh.write(json.dumps(r) + "\n")
    print(f"{config.label} @ iteration {iteration}: accuracy {result.accuracy:.4f} "
          f"({result.correct}/{result.total}, skipped {result.skipped})")
    print(f"report: {report}")
    return EXIT_OK


def cmd_ablate(args):
    base = _train_config(args)
    grid_path = _require(args.grid, "grid file")
    grid = expand_grid(grid_path.read_text(encoding="utf-8").splitlines())
    if not grid:
        raise ConfigError(f"{grid_path}: grid has no cells")
    train = _load_split(args.data, "train")
    val = _load_split(args.data, args.split)
    table = _load_table(args.data)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = run_ablation(train, val, table, base, grid, seeds=seeds, attr_freqs=_load_attributes(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", rows)
    text = format_table(rows)
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_inspect(args):
    scenes = _load_split(args.data, args.split)
    scene = scenes[0] if args.image is None else next((s for s in scenes if s.image_id == args.image), None)
    if scene is None:
        raise DataError(f"image {args.image!r} not in the {args.split} split")
    print(f"{scene.image_id}: {scene.width:g}x{scene.height:g}, {len(scene.proposals)} proposals")
    for p in scene.proposals:
        print(f"  [{p.id}] {p.category:<10} " + " ".join(f"{v:7.1f}" for v in p.box))
    model = config = None
    if args.checkpoint:
        model, _, _, config = _load_model(args.checkpoint, args.data)
        overrides = _overrides(args)
        if overrides:
            config = config.with_overrides(overrides)
        _check_features(model, [scene])
    for q in scene.queries:
        print(f"query: {' '.join(q.tokens)}")
        print(f"  parsed: {json.dumps({k: v for k, v in q.parsed.items() if v})}")
        if model is None:
            continue
        res = gr.ground(model, scene, q, config.grounding)
        print(f"  subject proposal {res.subject_index}, object proposal {res.object_index}")
        for i, s in zip(res.pair_subjects, res.scores):
            print(f"    pair ({i}, {res.object_index}): {s:.4f}")
        if q.gt_box is not None:
            print(f"  IoU with ground truth: {sc.iou(res.subject_box, q.gt_box):.3f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kprn", description="Weakly supervised referring-expression grounding on proposal pairs."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out=True):
        p.add_argument("--config", help="key=value config file, applied before --set")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p, data=False)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--iters", type=int)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.json if present")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    common(p, out=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--report", help="per-query JSONL path (default: next to the checkpoint)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a grid of configurations")
    common(p)
    p.add_argument("--grid", required=True, help="grid file, one 'key=v1,v2 ...' line per block")
    p.add_argument("--iters", type=int)
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p.add_argument("--split", default="val")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="print a scene, its queries and (with a checkpoint) pair scores")
    common(p, out=False)
    p.add_argument("--split", default="val")
    p.add_argument("--image", help="image id (default: first scene)")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"kprn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"kprn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericDomainError as exc:
        print(f"kprn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
