"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage
error. Every command that writes artifacts also writes a run.json beside
them capturing the resolved configuration and seed, which is sufficient to
reproduce the run bit-identically in deterministic mode.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
from PIL import Image

from . import cam as cam_mod
from . import data as data_mod
from .errors import EngrafError
from .model import EngrafConfig, build_model
from .taxonomy import (
    LabelPair,
    generate_synthetic_taxonomy,
    load_taxonomy,
    validate_taxonomy,
)
from .train import (
    TrainConfig,
    ablation_rows_to_tsv,
    evaluate,
    fit,
    format_coarse_fine,
    history_to_json,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
)

__all__ = ["run", "main", "parse_grid_spec"]

_MODEL_FIELDS = ("variant", "backbone_depth", "graft_size", "hierarchy_depth",
                 "num_fine", "num_coarse", "input_size", "stem",
                 "stage_widths", "blocks_per_stage")
_TRAIN_FIELDS = ("learning_rate", "momentum", "weight_decay", "epochs",
                 "batch_size", "seed", "deterministic")


def parse_grid_spec(spec: str):
    """Parse `variant=resnet,graft,engraf;G=2..5` into grid entries.

    The G range applies to the engraf variant; the standalone graft variant
    always runs with a single graft block, and branch-only variants carry
    no graft size.
    """
    try:
        fields = {}
        for part in spec.split(";"):
            key, _, value = part.partition("=")
            if not value:
                raise ValueError(f"malformed grid component {part!r}")
            fields[key.strip()] = value.strip()
        variants = [v.strip() for v in fields["variant"].split(",") if v.strip()]
        if not variants:
            raise ValueError("no variants listed")
        graft_sizes = [4]
        if "G" in fields:
            g = fields["G"]
            if ".." in g:
                lo, hi = g.split("..")
                graft_sizes = list(range(int(lo), int(hi) + 1))
            else:
                graft_sizes = [int(x) for x in g.split(",")]
        entries = []
        for v in variants:
            if v in ("resnet", "two_branch"):
                entries.append((v, None))
            elif v == "graft":
                entries.append((v, 1))
            elif v == "engraf":
                entries.extend((v, g) for g in graft_sizes)
            else:
                raise ValueError(f"unknown variant {v!r}")
        return entries
    except (ValueError, KeyError) as exc:
        raise argparse.ArgumentTypeError(f"bad grid spec {spec!r}: {exc}") from exc


def _write_run_json(directory, command: str, resolved: dict) -> None:
    os.makedirs(directory, exist_ok=True)
    payload = {"command": command, "resolved": resolved}
    with open(os.path.join(directory, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    unknown = set(raw) - set(_MODEL_FIELDS) - set(_TRAIN_FIELDS)
    if unknown:
        raise EngrafError(f"unknown config keys {sorted(unknown)} in {path}")
    return raw


def _resolve_configs(args, tax) -> tuple[EngrafConfig, TrainConfig]:
    raw = _load_config_file(getattr(args, "config", None))
    model_kv = {k: raw[k] for k in _MODEL_FIELDS if k in raw}
    train_kv = {k: raw[k] for k in _TRAIN_FIELDS if k in raw}
    overrides = {
        "variant": getattr(args, "variant", None),
        "graft_size": getattr(args, "graft", None),
        "backbone_depth": getattr(args, "depth", None),
    }
    for key, value in overrides.items():
        if value is not None:
            model_kv[key] = value
    model_kv.setdefault("variant", "engraf")
    model_kv.setdefault("num_fine", tax.num_fine)
    model_kv.setdefault("num_coarse", tax.num_coarse)
    for key in ("epochs", "batch_size", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            train_kv[key] = value
    if getattr(args, "lr", None) is not None:
        train_kv["learning_rate"] = args.lr
    if getattr(args, "deterministic", None) is not None:
        train_kv["deterministic"] = args.deterministic
    return EngrafConfig.from_dict({f: model_kv[f] for f in model_kv}), \
        TrainConfig.from_dict(train_kv)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with model and training fields")
    p.add_argument("--variant", choices=("resnet", "two_branch", "graft", "engraf"))
    p.add_argument("--graft", type=int, help="graft block count G")
    p.add_argument("--depth", type=int, help="backbone depth (18/50/101/152)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, help="master seed for init, batching, augmentation")
    det = p.add_mutually_exclusive_group()
    det.add_argument("--deterministic", dest="deterministic", action="store_true",
                     default=None)
    det.add_argument("--no-deterministic", dest="deterministic", action="store_false",
                     default=None)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="engraf",
        description="Hierarchical fine/coarse multi-branch classifier toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-taxonomy", help="check a taxonomy TSV")
    p.add_argument("--map", required=True, help="taxonomy TSV path")

    p = sub.add_parser("synth-data", help="generate a synthetic hierarchical dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--taxonomy", help="existing taxonomy TSV (else synthesized)")
    p.add_argument("--fine", type=int, default=20)
    p.add_argument("--coarse", type=int, default=4)
    p.add_argument("--n-per-fine", dest="n_per_fine", type=int, default=100)
    p.add_argument("--test-per-fine", dest="test_per_fine", type=int, default=20)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("ablate", help="run an architecture grid")
    p.add_argument("--grid", required=True, type=parse_grid_spec,
                   help="e.g. 'variant=resnet,two_branch,graft,engraf;G=2..5'")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)

    p = sub.add_parser("cam", help="render a Grad-CAM overlay")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input image (PNG etc.)")
    p.add_argument("--branch", required=True,
                   choices=("fine", "coarse", "graft-main", "graft-sub"))
    p.add_argument("--class", dest="target_class", required=True, type=int)
    p.add_argument("--head", default=None, help="logit head z0..z4 (default per branch)")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--out", required=True)
    return parser


def _cmd_validate_taxonomy(args) -> int:
    tax = load_taxonomy(args.map)
    violations = validate_taxonomy(tax)
    if violations:
        for v in violations:
            print(str(v), file=sys.stderr)
        return 1
    print(f"fine={tax.num_fine} coarse={tax.num_coarse}")
    return 0


def _cmd_synth_data(args) -> int:
    if args.taxonomy:
        tax = load_taxonomy(args.taxonomy)
    else:
        tax = generate_synthetic_taxonomy(args.fine, args.coarse)
    train = data_mod.generate_synthetic_dataset(tax, args.n_per_fine, args.size, args.seed)
    test = data_mod.generate_synthetic_dataset(tax, args.test_per_fine, args.size,
                                               args.seed + 1)
    data_mod.save_dataset_dir(args.out, train, test, tax)
    _write_run_json(args.out, "synth-data", {
        "taxonomy": args.taxonomy, "fine": tax.num_fine, "coarse": tax.num_coarse,
        "n_per_fine": args.n_per_fine, "test_per_fine": args.test_per_fine,
        "size": args.size, "seed": args.seed, "out": args.out,
    })
    print(f"wrote {len(train)} train / {len(test)} test records to {args.out}")
    return 0


def _cmd_train(args) -> int:
    train_data, test_data, tax = data_mod.load_dataset_dir(args.data)
    model_cfg, train_cfg = _resolve_configs(args, tax)
    model = build_model(model_cfg, init_seed=train_cfg.seed)
    _write_run_json(args.out, "train", {
        "data": args.data, "out": args.out,
        "model_config": model_cfg.to_dict(), "train_config": train_cfg.to_dict(),
        "seed": train_cfg.seed,
    })
    model, history = fit(model, train_data, test_data, tax, train_cfg,
                         checkpoint_dir=args.out,
                         log=lambda msg: print(msg, file=sys.stderr))
    final = history[-1].metrics
    save_checkpoint(model, train_cfg, train_cfg.epochs - 1, final, args.out)
    with open(os.path.join(args.out, "history.json"), "w", encoding="utf-8") as fh:
        fh.write(history_to_json(history))
    print(f"acc coarse-fine: {format_coarse_fine(final)}")
    return 0


def _cmd_eval(args) -> int:
    model, _, _, _ = load_checkpoint(args.checkpoint)
    train_data, test_data, tax = data_mod.load_dataset_dir(args.data)
    data = train_data if args.split == "train" else test_data
    metrics = evaluate(model, data, tax)
    print(f"acc coarse-fine: {format_coarse_fine(metrics)}")
    print(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))
    return 0


def _cmd_ablate(args) -> int:
    train_data, test_data, tax = data_mod.load_dataset_dir(args.data)
    model_cfg, train_cfg = _resolve_configs(args, tax)
    rows = run_ablation(args.grid, train_data, test_data, tax, train_cfg,
                        base_config=model_cfg, init_seed=train_cfg.seed,
                        log=lambda msg: print(msg, file=sys.stderr))
    os.makedirs(args.out, exist_ok=True)
    tsv = ablation_rows_to_tsv(rows)
    with open(os.path.join(args.out, "ablation.tsv"), "w", encoding="utf-8") as fh:
        fh.write(tsv)
    with open(os.path.join(args.out, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in rows], fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_run_json(args.out, "ablate", {
        "data": args.data, "out": args.out, "grid": [list(e) for e in args.grid],
        "model_config": model_cfg.to_dict(), "train_config": train_cfg.to_dict(),
        "seed": train_cfg.seed,
    })
    print(tsv, end="")
    return 0


def _cmd_cam(args) -> int:
    model, (model_cfg, _), _, _ = load_checkpoint(args.checkpoint)
    with Image.open(args.image) as im:
        rgb = im.convert("RGB")
        side = model_cfg.input_size
        if rgb.size != (side, side):
            rgb = rgb.resize((side, side), Image.BILINEAR)
        pixels = np.asarray(rgb, dtype=np.uint8).transpose(2, 0, 1)
    record = data_mod.ImageRecord(pixels=pixels, labels=LabelPair(0, 0))
    head = args.head or cam_mod.DEFAULT_HEAD_FOR_BRANCH[args.branch]
    heatmap = cam_mod.grad_cam(model, cam_mod.normalized_input(record),
                               args.branch, head, args.target_class)
    cam_mod.render_overlay(heatmap, record, args.alpha, args.out)
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    _write_run_json(out_dir, "cam", {
        "checkpoint": args.checkpoint, "image": args.image, "branch": args.branch,
        "head": head, "class": args.target_class, "alpha": args.alpha,
        "out": args.out,
    })
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "validate-taxonomy": _cmd_validate_taxonomy,
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "cam": _cmd_cam,
}


def run(argv) -> int:
    """Parse argv (no program name) and dispatch; never raises."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except EngrafError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # keep contract: diagnostics, not tracebacks
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
