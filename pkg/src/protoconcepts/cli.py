"""Command-line entry point.

Subcommands cover the whole pipeline: ``synth-data``, ``train`` (warmup +
joint), ``prune``, ``finetune``, ``scan-members``, ``explain``, ``eval``,
and ``ablate``. Exit codes: 0 success, 1 runtime failure, 2 usage or
config error. Every human-readable number is mirrored into a sidecar
file, and commands sharing an output directory merge their keys into the
same ``metrics.txt``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import explain as explain_mod
from .config import ConfigError, RunConfig, config_help_text, load_config, resolve_config_path
from .data import SyntheticConceptSpec, generate_synthetic, load_image
from .model import load_checkpoint, save_checkpoint
from .sidecar import format_value, parse_sidecar, write_sidecar
from .training import (
    TrainSet,
    ensure_dataset,
    evaluate,
    finetune_last_layer,
    prune_empty_balls,
    run_ablation,
    run_pipeline,
)

logger = logging.getLogger(__name__)


@dataclass
class CommandConfig:
    """Parsed invocation: the command plus its config, overrides, and outputs."""

    command: str
    config_path: Path | None
    overrides: list[str] = field(default_factory=list)
    out_dir: Path | None = None
    seed: int | None = None

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "CommandConfig":
        return cls(
            command=args.command,
            config_path=resolve_config_path(args.config) if getattr(args, "config", None) else None,
            overrides=list(getattr(args, "set", None) or []),
            out_dir=Path(args.out) if getattr(args, "out", None) else None,
            seed=getattr(args, "seed", None),
        )

    def load(self) -> RunConfig:
        if self.config_path is None:
            raise ConfigError("this command requires --config")
        overrides = list(self.overrides)
        if self.seed is not None:
            overrides.append(f"data.seed={self.seed}")
        return load_config(self.config_path, overrides)


def _merge_metrics(path: Path, items: dict) -> None:
    existing: dict[str, str] = parse_sidecar(path) if path.is_file() else {}
    existing.update({k: format_value(v) for k, v in items.items()})
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={v}\n" for k, v in sorted(existing.items())))


def _print_metrics(items: dict) -> None:
    for key, value in sorted(items.items()):
        print(f"{key}={format_value(value)}")


def _check_compatibility(net, cfg: RunConfig) -> None:
    problems = []
    if net.geometry.value != cfg.get("geometry", "kind"):
        problems.append(f"geometry {net.geometry.value!r} vs config {cfg.get('geometry', 'kind')!r}")
    if net.latent_dim != cfg.get("model", "latent_dim"):
        problems.append(f"latent_dim {net.latent_dim} vs config {cfg.get('model', 'latent_dim')}")
    if net.num_classes != cfg.get("model", "num_classes"):
        problems.append(f"num_classes {net.num_classes} vs config {cfg.get('model', 'num_classes')}")
    if net.input_resolution != cfg.get("model", "resolution"):
        problems.append(f"resolution {net.input_resolution} vs config {cfg.get('model', 'resolution')}")
    if problems:
        raise ConfigError("checkpoint does not match config: " + "; ".join(problems))


def cmd_synth_data(cc: CommandConfig) -> int:
    cfg = cc.load()
    root = cc.out_dir or Path(cfg.get("data", "root"))
    spec = SyntheticConceptSpec(
        classes=cfg.synthetic_class_pairs(),
        image_size=cfg.get("model", "resolution"),
        train_per_class=cfg.get("data", "synthetic_train_per_class"),
        test_per_class=cfg.get("data", "synthetic_test_per_class"),
        noise=cfg.get("data", "synthetic_noise"),
        seed=cfg.get("data", "seed"),
    )
    manifest = generate_synthetic(spec, root)
    print(f"generated {len(manifest.records('train'))} train / {len(manifest.records('test'))} test images")
    print(f"classes: {', '.join(manifest.classes)}")
    print(f"root: {root}")
    return 0


def cmd_train(cc: CommandConfig) -> int:
    cfg = cc.load()
    out_dir = cc.out_dir or Path("runs/train")
    result = run_pipeline(cfg, out_dir, through="joint")
    _print_metrics(
        {
            "accuracy.before_prune": result.metrics["accuracy.before_prune"],
            "prototypes.total": result.metrics["prototypes.total"],
            "checkpoint": str(result.checkpoints["joint"]),
        }
    )
    return 0


def cmd_prune(cc: CommandConfig, checkpoint: str | None) -> int:
    cfg = cc.load()
    out_dir = cc.out_dir or Path("runs/train")
    ckpt_path = Path(checkpoint) if checkpoint else out_dir / "joint.ckpt"
    if not ckpt_path.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    net, meta = load_checkpoint(ckpt_path)
    _check_compatibility(net, cfg)
    manifest = ensure_dataset(cfg)
    mask, counts = prune_empty_balls(net, manifest, cfg.get("prune", "scan_batch_size"))
    meta = dict(meta, stage="pruned")
    save_checkpoint(net, out_dir / "pruned.ckpt", meta)
    surviving = int((mask > 0).sum())
    items = {
        "prototypes.total": net.num_prototypes,
        "prototypes.surviving": surviving,
        "prototypes.pruned": net.num_prototypes - surviving,
    }
    for j, count in enumerate(counts):
        items[f"prototype.{j:04d}.members"] = int(count)
    _merge_metrics(out_dir / "metrics.txt", items)
    _print_metrics({k: v for k, v in items.items() if not k.startswith("prototype.")})
    print(f"checkpoint={out_dir / 'pruned.ckpt'}")
    return 0


def cmd_finetune(cc: CommandConfig, checkpoint: str | None) -> int:
    import warnings as _warnings

    cfg = cc.load()
    out_dir = cc.out_dir or Path("runs/train")
    ckpt_path = Path(checkpoint) if checkpoint else out_dir / "pruned.ckpt"
    if not ckpt_path.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    net, meta = load_checkpoint(ckpt_path)
    _check_compatibility(net, cfg)
    if meta.get("stage") != "pruned":
        _warnings.warn(
            "finetuning a checkpoint that was never pruned; proceeding with its current (all-ones) mask",
            RuntimeWarning,
            stacklevel=2,
        )
    manifest = ensure_dataset(cfg)
    from .data import load_split_tensors

    train = TrainSet(*load_split_tensors(manifest, "train"))
    test = TrainSet(*load_split_tensors(manifest, "test"))
    log = finetune_last_layer(
        net,
        train,
        l1_weight=cfg.get("losses", "l1_weight"),
        epochs=cfg.get("schedule.finetune", "epochs"),
        lr=cfg.get("schedule.finetune", "lr_last_layer"),
        batch_size=cfg.get("data", "batch_size"),
        base_seed=cfg.get("data", "seed"),
    )
    meta = dict(meta, stage="final")
    save_checkpoint(net, out_dir / "final.ckpt", meta)
    result = evaluate(net, test.images, test.labels, cfg.get("data", "batch_size"))
    items: dict = {"accuracy.after_finetune": result["accuracy"]}
    items.update(log.as_metrics())
    _merge_metrics(out_dir / "metrics.txt", items)
    _print_metrics({"accuracy.after_finetune": result["accuracy"], "checkpoint": str(out_dir / "final.ckpt")})
    return 0


def cmd_scan_members(cc: CommandConfig, checkpoint: str) -> int:
    cfg = cc.load()
    out_dir = cc.out_dir or Path("runs/scan")
    net, _ = load_checkpoint(checkpoint)
    _check_compatibility(net, cfg)
    manifest = ensure_dataset(cfg)
    members = explain_mod.scan_members(
        net,
        manifest,
        batch_size=cfg.get("prune", "scan_batch_size"),
        cache_dir=explain_mod.default_cache_dir(),
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    import json

    (out_dir / "members.json").write_text(json.dumps(explain_mod._members_to_json(members), indent=0, sort_keys=True))
    items: dict = {}
    multi = 0
    nonempty = 0
    for j in range(net.num_prototypes):
        patches = members.get(j, [])
        items[f"prototype.{j:04d}.members"] = len(patches)
        images = {m.image_id for m in patches}
        items[f"prototype.{j:04d}.distinct_images"] = len(images)
        if patches:
            nonempty += 1
            if len(images) >= 2:
                multi += 1
    items["prototypes.with_members"] = nonempty
    items["prototypes.with_multi_image_members"] = multi
    write_sidecar(out_dir / "sidecar.txt", dict(sorted(items.items())))
    _print_metrics({"prototypes.with_members": nonempty, "prototypes.with_multi_image_members": multi})
    return 0


def cmd_eval(cc: CommandConfig, checkpoint: str, split: str) -> int:
    cfg = cc.load()
    net, _ = load_checkpoint(checkpoint)
    _check_compatibility(net, cfg)
    manifest = ensure_dataset(cfg)
    from .data import load_split_tensors

    images, labels = load_split_tensors(manifest, split)
    result = evaluate(net, images, labels, cfg.get("data", "batch_size"))
    items: dict = {"split": split, "accuracy": result["accuracy"], "n": result["n"]}
    for c, acc in enumerate(result["per_class"]):
        items[f"accuracy.class.{manifest.classes[c]}"] = acc
    out_dir = cc.out_dir or Path(checkpoint).parent
    write_sidecar(out_dir / f"eval_{split}.txt", dict(sorted(items.items())))
    _print_metrics(items)
    return 0


def cmd_explain(
    cc: CommandConfig,
    checkpoint: str,
    image: str | None,
    split: str,
    limit: int,
    top_p: int,
    top_n: int,
) -> int:
    cfg = cc.load()
    out_dir = cc.out_dir or Path("runs/explain")
    net, _ = load_checkpoint(checkpoint)
    _check_compatibility(net, cfg)
    manifest = ensure_dataset(cfg)
    members = explain_mod.scan_members(
        net,
        manifest,
        batch_size=cfg.get("prune", "scan_batch_size"),
        cache_dir=explain_mod.default_cache_dir(),
    )
    galleries = explain_mod.build_all_galleries(net, members, top_n=top_n)

    targets: list[tuple[str, torch.Tensor]] = []
    if image is not None:
        by_id = {r.image_id: r for records in manifest.splits.values() for r in records}
        record = by_id.get(image)
        if record is not None:
            targets.append((record.image_id, torch.from_numpy(load_image(record, manifest.resolution))))
        else:
            path = Path(image)
            if not path.is_file():
                raise FileNotFoundError(f"image not found: {image}")
            from .data import ImageRecord

            pseudo = ImageRecord(path=path, image_id=path.name, class_id=-1, class_name="?")
            targets.append((path.name, torch.from_numpy(load_image(pseudo, manifest.resolution))))
    else:
        for record in manifest.records(split)[:limit]:
            targets.append((record.image_id, torch.from_numpy(load_image(record, manifest.resolution))))

    for idx, (image_id, tensor) in enumerate(targets):
        sheet = explain_mod.local_explanation(net, tensor, image_id, galleries, top_p=top_p)
        safe = image_id.replace("/", "__").replace("#", "_")
        report_dir = out_dir / f"{idx:03d}_{safe}"
        explain_mod.render_report(sheet, manifest, report_dir, net=net)
        print(f"scoresheet: {report_dir / 'index.html'} (predicted class {sheet.predicted_class})")
    return 0


def cmd_ablate(cc: CommandConfig, axis: str, values: str) -> int:
    cfg = cc.load()
    out_dir = cc.out_dir or Path("runs/ablate")
    value_list = [v.strip() for v in values.split(",") if v.strip()]
    rows = run_ablation(cfg, axis, value_list, out_dir)
    header = f"{axis:>12} | {'prototypes':>12} | {'acc before':>10} | {'acc after':>10}"
    print(header)
    print("-" * len(header))
    items: dict = {"axis": axis}
    failures = 0
    for row in rows:
        if "error" in row:
            failures += 1
            print(f"{row['value']:>12} | FAILED: {row['error']}")
            items[f"run.{row['value']}.error"] = row["error"]
            continue
        print(
            f"{row['value']:>12} | {row['surviving']:>5}/{row['total']:<6} | "
            f"{row['accuracy_before_prune']:>10.4f} | {row['accuracy_after_finetune']:>10.4f}"
        )
        items[f"run.{row['value']}.surviving"] = row["surviving"]
        items[f"run.{row['value']}.total"] = row["total"]
        items[f"run.{row['value']}.accuracy_before_prune"] = row["accuracy_before_prune"]
        items[f"run.{row['value']}.accuracy_after_finetune"] = row["accuracy_after_finetune"]
    write_sidecar(out_dir / "ablation.txt", dict(sorted(items.items())))
    return 0 if failures < len(rows) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoconcepts",
        description="Train, prune, finetune, and explain ball-prototype image classifiers.",
        epilog=config_help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, *, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="config file path or shipped preset name")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override data.seed")

    p = sub.add_parser("synth-data", help="generate the synthetic concept dataset")
    add_common(p)

    p = sub.add_parser("train", help="run the warmup and joint stages")
    add_common(p)

    p = sub.add_parser("prune", help="mask every ball containing no training patch")
    add_common(p)
    p.add_argument("--checkpoint", help="joint-stage checkpoint (default: <out>/joint.ckpt)")

    p = sub.add_parser("finetune", help="sparse last-layer optimization after pruning")
    add_common(p)
    p.add_argument("--checkpoint", help="pruned checkpoint (default: <out>/pruned.ckpt)")

    p = sub.add_parser("scan-members", help="list the training patches contained in each ball")
    add_common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset split")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("explain", help="render evidence scoresheets with concept galleries")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="dataset image id or a path to an image file")
    p.add_argument("--split", default="test", help="split to explain when --image is absent")
    p.add_argument("--limit", type=int, default=1, help="number of split images to explain")
    p.add_argument("--top-p", type=int, default=explain_mod.DEFAULT_SCORESHEET_ROWS, help="scoresheet rows")
    p.add_argument("--top-n", type=int, default=explain_mod.DEFAULT_GALLERY_SIZE, help="gallery size per ball")

    p = sub.add_parser("ablate", help="sweep radius or k and tabulate the trend")
    add_common(p)
    p.add_argument("--axis", required=True, choices=("radius", "k"))
    p.add_argument("--values", required=True, help="comma-separated list of at least two values")

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cc = CommandConfig.from_args(args)
        if args.command == "synth-data":
            return cmd_synth_data(cc)
        if args.command == "train":
            return cmd_train(cc)
        if args.command == "prune":
            return cmd_prune(cc, args.checkpoint)
        if args.command == "finetune":
            return cmd_finetune(cc, args.checkpoint)
        if args.command == "scan-members":
            return cmd_scan_members(cc, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cc, args.checkpoint, args.split)
        if args.command == "explain":
            return cmd_explain(cc, args.checkpoint, args.image, args.split, args.limit, args.top_p, args.top_n)
        if args.command == "ablate":
            return cmd_ablate(cc, args.axis, args.values)
        parser.error(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary maps everything to exit codes
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
