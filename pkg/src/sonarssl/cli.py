"""Command-line interface: data preparation, pretraining, probes, reports.

Subcommands:
  gen-synthetic    render labeled synthetic patches into a corpus directory
  extract-patches  cut patches from real images (+ optional annotations)
  pretrain         run self-supervised pretraining on a corpus
  probe            evaluate a checkpoint with a supervised probe
  report           aggregate probe results into tables and curves
"""

import argparse
import json
import pathlib
import sys

import numpy as np

from .patches import PatchTensor, SplitSpec, extract_grid_patches, \
    extract_labeled_patches, write_corpus
from .probes import ProbeConfig, run_probe, save_probe_result, \
    load_probe_result
from .reporting import ExperimentGrid, cell_from_probe_result, \
    load_metric_series, render_curves, resolve_run_provenance, write_report
from .seeding import derive_seed
from .synthetic import generate_labeled_patches
from .training import PretrainConfig, pretrain


def _split_spec(args) -> SplitSpec:
    train = 1.0 - args.val_frac - args.test_frac
    if train <= 0:
        raise SystemExit("val/test fractions leave no training data")
    return SplitSpec(fractions=(train, args.val_frac, args.test_frac),
                     seed=args.split_seed)


def cmd_gen_synthetic(args) -> int:
    patches, labels = generate_labeled_patches(
        args.n_per_class, patch_size=args.window, seed=args.seed)
    records = [
        PatchTensor(pixels=patches[i],
                    source_id=f"synthetic_{args.seed}_{i}", offset=(0, 0),
                    subset="synthetic", label=labels[i])
        for i in range(len(labels))
    ]
    manifest = write_corpus(args.out, records, _split_spec(args))
    print(f"wrote {len(manifest.entries)} synthetic patches to {args.out}")
    return 0


def _load_image(path) -> np.ndarray:
    from PIL import Image
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr.transpose(2, 0, 1)
    scale = 65535.0 if arr.max() > 255.0 else 255.0
    return np.clip(arr / scale, 0.0, 1.0).astype(np.float32)


def _read_annotations(path) -> dict:
    """Map image name -> [(label, (r0, c0, r1, c1)), ...].

    The file is JSON: {"images": [{"path": ..., "boxes": [{"label": ...,
    "row0": ..., "col0": ..., "row1": ..., "col1": ...}]}]}.
    """
    doc = json.loads(pathlib.Path(path).read_text())
    if "images" not in doc:
        raise SystemExit(f"{path}: annotation file needs an 'images' list")
    table = {}
    for rec in doc["images"]:
        boxes = [(b["label"], (b["row0"], b["col0"], b["row1"], b["col1"]))
                 for b in rec.get("boxes", [])]
        table[pathlib.Path(rec["path"]).name] = boxes
    return table


def cmd_extract_patches(args) -> int:
    annotations = _read_annotations(args.annotations) if args.annotations \
        else {}
    records = []
    for image_path in args.images:
        image_path = pathlib.Path(image_path)
        image = _load_image(image_path)
        boxes = annotations.get(image_path.name, [])
        if boxes:
            records.extend(extract_labeled_patches(
                image, boxes, window=args.window,
                bg_per_image=args.bg_per_image,
                seed=derive_seed(args.split_seed, "bg", image_path.name),
                source_id=image_path.name, subset=args.subset))
        else:
            records.extend(extract_grid_patches(
                image, window=args.window, stride=args.stride,
                source_id=image_path.name, subset=args.subset))
    if not records:
        raise SystemExit("no patches extracted")
    manifest = write_corpus(args.out, records, _split_spec(args))
    labeled = sum(1 for e in manifest.entries if e.label is not None)
    print(f"wrote {len(manifest.entries)} patches ({labeled} labeled) "
          f"to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    if args.config:
        doc = json.loads(pathlib.Path(args.config).read_text())
        config = PretrainConfig.from_json_dict(doc)
    else:
        config = PretrainConfig()
    overrides = {}
    if args.epochs is not None:
        overrides["n_epochs"] = args.epochs
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        import dataclasses
        config = dataclasses.replace(config, **overrides)
    result = pretrain(config, args.manifest, args.out)
    print(f"pretraining done: {result.n_steps} steps, "
          f"final loss {result.final_loss:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_probe(args) -> int:
    config = ProbeConfig(mode=args.mode, task=args.task, n_seeds=args.seeds,
                         base_seed=args.base_seed)
    result = run_probe(args.checkpoint, args.manifest, config)
    save_probe_result(result, args.out)
    agg = result["aggregate"]["test_f1"]
    print(f"test macro-F1 {agg['mean']:.4f} ± {agg['std']:.4f} "
          f"over {agg['n']} seeds")
    print(f"result: {args.out}")
    return 0


def cmd_report(args) -> int:
    grid = ExperimentGrid()
    for result_path in args.results:
        doc = load_probe_result(result_path)
        prov = resolve_run_provenance(doc["checkpoint"]["path"])
        grid.add(cell_from_probe_result(
            doc, source=result_path, method=prov["method"],
            arch=prov["arch"], data_mode=prov["data_mode"]))
    written = write_report(grid, args.out)
    if args.metrics:
        series = {pathlib.Path(m).parent.name or f"run{i}":
                  load_metric_series(m) for i, m in enumerate(args.metrics)}
        written.append(render_curves(series, pathlib.Path(args.out) /
                                     "loss_curves.png", title="training loss",
                                     ylabel="loss"))
    print(f"wrote {len(written)} report files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sonarssl",
        description="self-supervised sonar patch pretraining pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_split_args(p):
        p.add_argument("--val-frac", type=float, default=0.1)
        p.add_argument("--test-frac", type=float, default=0.1)
        p.add_argument("--split-seed", type=int, default=0)

    p = sub.add_parser("gen-synthetic",
                       help="render a labeled synthetic patch corpus")
    p.add_argument("--n-per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window", type=int, default=96)
    p.add_argument("--out", required=True)
    add_split_args(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("extract-patches",
                       help="cut patches from real images into a corpus")
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--annotations", default=None,
                   help="JSON file with per-image labeled boxes")
    p.add_argument("--window", type=int, default=96)
    p.add_argument("--stride", type=int, default=64)
    p.add_argument("--bg-per-image", type=int, default=3)
    p.add_argument("--subset", default="real")
    p.add_argument("--out", required=True)
    add_split_args(p)
    p.set_defaults(func=cmd_extract_patches)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    p.add_argument("--config", default=None,
                   help="JSON file with the training recipe; defaults apply "
                        "when omitted")
    p.add_argument("--manifest", required=True,
                   help="corpus directory with manifest.json")
    p.add_argument("--epochs", type=int, default=None,
                   help="override the configured epoch count")
    p.add_argument("--seed", type=int, default=None,
                   help="override the configured run seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="evaluate a checkpoint with a probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", default="linear",
                   choices=("linear", "mlp", "finetune", "finetune_mlp"))
    p.add_argument("--task", default="3class", choices=("3class", "binary"))
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--base-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="aggregate probe results into tables")
    p.add_argument("--results", nargs="+", required=True,
                   help="probe result JSON files")
    p.add_argument("--metrics", nargs="*", default=None,
                   help="metrics.jsonl files to plot as loss curves")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
