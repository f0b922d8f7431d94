"""Command-line entry point: synth, train, eval, predict, ablate.

Every command writes a run manifest (command, resolved config, paths,
seed, artifact checksums) into its output directory before doing work,
then rewrites it with checksums once the artifacts exist. All outputs are
deterministic given the same flags, so reruns produce bitwise-identical
files.

Exit codes: 0 success, 2 usage, 3 config errors, 4 data/input errors,
5 training divergence.
"""

import argparse
import hashlib
import json
import math
import os
import sys
from dataclasses import asdict
from typing import Dict, List, Optional

import numpy as np

from . import data as data_mod
from .data import (
    ClassSchema,
    ImageTile,
    Sample,
    default_scene_spec,
    generate_scene_full,
    load_sample,
    read_split_manifest,
    split_spatial,
    write_scene_files,
    write_split_manifest,
)
from .depth_branch import FilePseudoLabelProvider
from .errors import DepthPromptError, InputError, UndefinedMetricError
from .figures import save_ablation_chart, save_confusion_heatmap, save_loss_curves
from .metrics import report_to_text
from .seg_decoder import predict_mask
from .trainer import (
    TrainConfig,
    evaluate_matrix,
    load_checkpoint,
    read_config,
    restore_model,
    run_ablation,
    train,
)

MANIFEST_NAME = "run_manifest.json"


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_run_manifest(
    out_dir: str,
    command: str,
    config: Dict,
    inputs: Dict[str, str],
    seed: Optional[int],
    artifacts: Optional[List[str]] = None,
) -> str:
    """Write the manifest; call again with artifacts to add checksums."""
    os.makedirs(out_dir, exist_ok=True)
    checksums = {}
    for name in sorted(artifacts or []):
        full = os.path.join(out_dir, name)
        if os.path.isfile(full):
            checksums[name] = _sha256(full)
    payload = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "output_dir": ".",
        "seed": seed,
        "artifacts": checksums,
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _grid_for(tiles: int):
    """Most-square nrows x ncols factorization of the tile count."""
    best = (1, tiles)
    for rows in range(1, int(math.isqrt(tiles)) + 1):
        if tiles % rows == 0:
            best = (rows, tiles // rows)
    return best


def _list_artifacts(out_dir: str) -> List[str]:
    found = []
    for root, _, files in os.walk(out_dir):
        for name in files:
            if name == MANIFEST_NAME:
                continue
            full = os.path.join(root, name)
            found.append(os.path.relpath(full, out_dir))
    return sorted(found)


def cmd_synth(args) -> int:
    if args.size % 32 != 0 or args.size <= 0:
        raise InputError("--size must be a positive multiple of 32")
    if args.tiles < 3:
        raise InputError("--tiles must be >= 3 (three non-empty splits)")
    config = {
        "tiles": args.tiles,
        "size": args.size,
        "seed": args.seed,
        "shadow_stress": bool(args.shadow_stress),
    }
    write_run_manifest(args.out, "synth", config, {}, args.seed)

    nrows, ncols = _grid_for(args.tiles)
    splits = split_spatial((nrows, ncols), (0.46, 0.27, 0.27))
    ordered = splits["train"] + splits["val"] + splits["test"]
    for index, tile_id in enumerate(sorted(ordered)):
        spec = default_scene_spec(
            seed=args.seed * 1000003 + index,
            size=args.size,
            shadow_stress=bool(args.shadow_stress),
        )
        scene = generate_scene_full(spec)
        write_scene_files(args.out, tile_id, scene)
    write_split_manifest(os.path.join(args.out, "splits.tsv"), splits)

    write_run_manifest(
        args.out, "synth", config, {}, args.seed, artifacts=_list_artifacts(args.out)
    )
    print("wrote %d tiles to %s" % (args.tiles, args.out))
    return 0


def _load_split_samples(data_dir: str, split: str, require_depth: bool) -> List[Sample]:
    splits = read_split_manifest(os.path.join(data_dir, "splits.tsv"))
    if split not in splits:
        raise InputError("unknown split %r" % split)
    samples = []
    for tile_id in splits[split]:
        samples.append(
            load_sample(
                data_mod.image_path(data_dir, tile_id),
                data_mod.mask_path(data_dir, tile_id),
                data_mod.depth_path(data_dir, tile_id),
                require_depth=require_depth,
                tile_id=tile_id,
            )
        )
    if not samples:
        raise UndefinedMetricError("split %r is empty" % split)
    return samples


def _resolve_config(args) -> TrainConfig:
    cfg = read_config(args.config) if args.config else TrainConfig()
    if getattr(args, "no_adapter", False):
        cfg.adapter_enabled = False
    if getattr(args, "no_prompter", False):
        cfg.prompter_enabled = False
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "max_steps", None) is not None:
        cfg.max_steps = args.max_steps
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    inputs = {"data": args.data, "config": args.config or "<defaults>"}
    write_run_manifest(args.out, "train", asdict(cfg), inputs, cfg.seed)

    samples = _load_split_samples(args.data, "train", require_depth=False)
    provider = FilePseudoLabelProvider(args.data)
    result = train(cfg, samples, provider=provider, out_dir=args.out)
    save_loss_curves(result.history, os.path.join(args.out, "loss_curves.png"))

    write_run_manifest(
        args.out,
        "train",
        asdict(cfg),
        inputs,
        cfg.seed,
        artifacts=_list_artifacts(args.out),
    )
    print(
        "trained %d steps, final total loss %s, checkpoint %s"
        % (result.final_step, repr(result.history[-1].total), result.checkpoint_path)
    )
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    inputs = {"checkpoint": args.checkpoint, "data": args.data, "split": args.split}
    write_run_manifest(out_dir, "eval", asdict(ckpt.config), inputs, ckpt.config.seed)

    model = restore_model(ckpt)
    samples = _load_split_samples(args.data, args.split, require_depth=False)
    cm, report = evaluate_matrix(model, samples)

    report_path = os.path.join(out_dir, "report_%s.txt" % args.split)
    with open(report_path, "w") as fh:
        fh.write(report_to_text(report))
    save_confusion_heatmap(
        cm.counts, os.path.join(out_dir, "confusion_%s.png" % args.split)
    )

    write_run_manifest(
        out_dir,
        "eval",
        asdict(ckpt.config),
        inputs,
        ckpt.config.seed,
        artifacts=["report_%s.txt" % args.split, "confusion_%s.png" % args.split],
    )
    print(
        "split=%s miou=%s oa=%s kappa=%s -> %s"
        % (args.split, repr(report.m_iou), repr(report.oa), repr(report.kappa), report_path)
    )
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    pixels = data_mod.load_image_png(args.input)
    h, w = pixels.shape[:2]
    if h % 32 != 0 or w % 32 != 0:
        raise InputError("input dims must be divisible by 32, got %dx%d" % (h, w))
    tile = ImageTile(pixels=pixels, tile_id=os.path.basename(args.input))

    import torch

    from .backbone import tile_to_tensor

    model.eval()
    with torch.no_grad():
        logits, _ = model(tile_to_tensor(tile))
    mask = predict_mask(logits)[0]
    if args.color:
        rendered = ClassSchema().render(mask)
        data_mod.save_image_png(args.output, rendered.astype(np.float32) / 255.0)
    else:
        data_mod.save_mask_png(args.output, mask)
    print("wrote %s" % args.output)
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    inputs = {"data": args.data, "config": args.config or "<defaults>"}
    config = dict(asdict(cfg), seeds=seeds)
    write_run_manifest(args.out, "ablate", config, inputs, None)

    train_samples = _load_split_samples(args.data, "train", require_depth=False)
    eval_samples = _load_split_samples(args.data, args.split, require_depth=False)
    provider = FilePseudoLabelProvider(args.data)
    table = run_ablation(cfg, train_samples, eval_samples, provider, seeds)

    table_path = os.path.join(args.out, "ablation.tsv")
    with open(table_path, "w") as fh:
        fh.write(table.to_text())
    save_ablation_chart(table, os.path.join(args.out, "ablation.png"))

    write_run_manifest(
        args.out,
        "ablate",
        config,
        inputs,
        None,
        artifacts=["ablation.tsv", "ablation.png"],
    )
    print("wrote %s (%d rows)" % (table_path, len(table.rows)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthprompt",
        description="Depth-prompted semantic segmentation of land-cover tiles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic tile dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--tiles", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shadow-stress", action="store_true", dest="shadow_stress")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None, dest="max_steps")
    p.add_argument("--no-adapter", action="store_true", dest="no_adapter")
    p.add_argument("--no-prompter", action="store_true", dest="no_prompter")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict a mask for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--color", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="run the module-toggle ablation")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--max-steps", type=int, default=None, dest="max_steps")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DepthPromptError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
