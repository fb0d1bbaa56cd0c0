"""Staged training: warmup and joint SGD, empty-ball pruning, last-layer finetuning.

There is no prototype projection stage: balls are visualized by the
training patches they contain, so the pipeline goes straight from the
joint stage to pruning. Every stage reseeds from a seed derived from the
base seed and the stage name, which makes resuming from any intermediate
checkpoint reproduce the remaining stages exactly.
"""

from __future__ import annotations

import logging
import warnings
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .config import RunConfig, dump_config
from .data import (
    DatasetManifest,
    SyntheticConceptSpec,
    generate_synthetic,
    iter_image_batches,
    load_directory_dataset,
    load_split_tensors,
)
from .losses import (
    EXTRA_LOSSES,
    LossWeights,
    composite_objective,
    min_patch_distances,
    radius_penalty,
    separation_term,
    topk_cluster_term,
)
from .model import (
    ProtoConceptsNet,
    build_net,
    load_assignment_matrix,
    load_checkpoint,
    save_checkpoint,
)
from .sidecar import write_sidecar

logger = logging.getLogger(__name__)

PARAM_GROUPS = ("backbone", "addon", "centers", "radii", "last_layer")


class TrainingDivergence(RuntimeError):
    """Raised when a loss component goes non-finite; names the first offender."""

    def __init__(self, component: str, epoch: int):
        super().__init__(f"non-finite loss component {component!r} at epoch {epoch}")
        self.component = component
        self.epoch = epoch


class StageName(Enum):
    WARMUP = "warmup"
    JOINT = "joint"
    FINETUNE = "finetune"


_STAGE_ORDER = {StageName.WARMUP: 0, StageName.JOINT: 1, StageName.FINETUNE: 2}


@dataclass(frozen=True)
class StageSpec:
    """One stage: which parameter groups train at which rate, and for how long."""

    name: StageName
    epochs: int
    lrs: dict[str, float]
    loss_weights: LossWeights

    def __post_init__(self) -> None:
        unknown = set(self.lrs) - set(PARAM_GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.name is StageName.FINETUNE and set(self.active_groups()) - {"last_layer"}:
            raise ValueError("the finetuning stage may only train the last layer")
        if self.name is StageName.WARMUP and "backbone" in self.active_groups():
            raise ValueError("the warmup stage never trains the backbone")

    def active_groups(self) -> list[str]:
        return [g for g, lr in self.lrs.items() if lr > 0]


@dataclass(frozen=True)
class TrainingSchedule:
    """Ordered stages (warmup, joint, finetune) plus optimizer settings."""

    stages: tuple[StageSpec, ...]
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        order = [_STAGE_ORDER[s.name] for s in self.stages]
        if order != sorted(order) or len(set(order)) != len(order):
            raise ValueError("stages must appear once each, in warmup -> joint -> finetune order")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")

    def stage(self, name: StageName) -> StageSpec:
        for s in self.stages:
            if s.name is name:
                return s
        raise KeyError(name)


@dataclass
class EpochLog:
    epoch: int
    components: dict[str, float]
    accuracy: float


@dataclass
class StageLog:
    stage: str
    epochs: list[EpochLog] = field(default_factory=list)

    def as_metrics(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for e in self.epochs:
            prefix = f"{self.stage}.epoch{e.epoch:03d}"
            for comp, value in e.components.items():
                out[f"{prefix}.loss.{comp}"] = value
            out[f"{prefix}.accuracy"] = e.accuracy
        return out


class TrainSet(NamedTuple):
    images: Tensor
    labels: Tensor


def stage_seed(base_seed: int, stage: str) -> int:
    """Deterministic per-stage seed; stable across runs and platforms."""

    return zlib.crc32(f"{base_seed}:{stage}".encode()) & 0x7FFFFFFF


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)


def schedule_from_config(cfg: RunConfig) -> TrainingSchedule:
    weights = cfg.loss_weights()
    warmup = cfg.section("schedule.warmup")
    joint = cfg.section("schedule.joint")
    finetune = cfg.section("schedule.finetune")
    stages = (
        StageSpec(
            name=StageName.WARMUP,
            epochs=warmup["epochs"],
            lrs={"addon": warmup["lr_addon"], "centers": warmup["lr_centers"], "radii": warmup["lr_radius"]},
            loss_weights=weights,
        ),
        StageSpec(
            name=StageName.JOINT,
            epochs=joint["epochs"],
            lrs={
                "backbone": joint["lr_backbone"],
                "addon": joint["lr_addon"],
                "centers": joint["lr_centers"],
                "radii": joint["lr_radius"],
                "last_layer": joint["lr_last_layer"],
            },
            loss_weights=weights,
        ),
        StageSpec(
            name=StageName.FINETUNE,
            epochs=finetune["epochs"],
            lrs={"last_layer": finetune["lr_last_layer"]},
            loss_weights=weights,
        ),
    )
    return TrainingSchedule(stages=stages, seed=cfg.get("data", "seed"))


def _param_groups(net: ProtoConceptsNet) -> dict[str, list[torch.nn.Parameter]]:
    return {
        "backbone": list(net.backbone.module.parameters()),
        "addon": list(net.addon.parameters()),
        "centers": [net.centers],
        "radii": [net.radius_param],
        "last_layer": [net.evidence.weight],
    }


def _epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng((seed, epoch)).permutation(n)


def _check_finite(components: dict[str, Tensor], epoch: int) -> None:
    for name, value in components.items():
        if not bool(torch.isfinite(value)):
            raise TrainingDivergence(name, epoch)


def run_stage(
    net: ProtoConceptsNet,
    data: TrainSet,
    stage: StageSpec,
    *,
    batch_size: int,
    base_seed: int,
    extra_weights: dict[str, float] | None = None,
) -> StageLog:
    """Train one stage; parameters outside its groups are left untouched.

    The composite objective is cross entropy, the top-k cluster term, the
    separation term, the radius penalty, and any registered extra losses
    whose weight is nonzero.
    """

    log = StageLog(stage=stage.name.value)
    if stage.epochs == 0:
        return log
    seed = stage_seed(base_seed, stage.name.value)
    seed_everything(seed)

    groups = _param_groups(net)
    active = {g: stage.lrs[g] for g in stage.active_groups()}
    saved_grad_flags = {}
    for name, params in groups.items():
        for p in params:
            saved_grad_flags[id(p)] = p.requires_grad
            p.requires_grad_(name in active)
    optimizer = torch.optim.Adam([{"params": groups[name], "lr": lr} for name, lr in active.items()])

    view = net.evidence.assignment_view()
    pools = view.pool_sizes()
    weights = stage.loss_weights
    k_eff = weights.k
    if min(pools) < weights.k:
        k_eff = min(pools)
        logger.warning(
            "top-k count %d exceeds the smallest class pool (%d prototypes); clamping", weights.k, k_eff
        )
    extras = {
        name: w
        for name, w in (extra_weights or {}).items()
        if w != 0.0 and name in EXTRA_LOSSES
    }

    n = data.images.shape[0]
    train_backbone = "backbone" in active
    try:
        for epoch in range(stage.epochs):
            perm = _epoch_permutation(n, seed, epoch)
            sums = {"cross_entropy": 0.0, "cluster_topk": 0.0, "separation": 0.0, "radius": 0.0, "total": 0.0}
            correct = 0
            batches = 0
            for start in range(0, n, batch_size):
                idx = torch.from_numpy(perm[start : start + batch_size])
                images = data.images[idx]
                labels = data.labels[idx]
                grids = net.latent_grids(images, backbone_grad=train_backbone)
                sims, _ = net.similarities_from_grids(grids)
                logits = net.evidence(sims)
                ce = F.cross_entropy(logits, labels)
                flat = grids.reshape(grids.shape[0], -1, net.latent_dim)
                dmin = min_patch_distances(flat, net.centers, net.radius_param, net.geometry, net.geo_cfg)
                clstk = topk_cluster_term(dmin, labels, view, k_eff, clamp_k=True)
                sep = separation_term(dmin, labels, view)
                rad = radius_penalty(net.radius_param, net.geometry, net.geo_cfg)
                total = composite_objective(ce, clstk, sep, rad, weights)
                for name, w in extras.items():
                    total = total + w * EXTRA_LOSSES[name](net=net, grids=grids, labels=labels)
                components = {
                    "cross_entropy": ce,
                    "cluster_topk": clstk,
                    "separation": sep,
                    "radius": rad,
                    "total": total,
                }
                _check_finite(components, epoch)
                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                with torch.no_grad():
                    correct += int((logits.argmax(dim=1) == labels).sum())
                for name, value in components.items():
                    sums[name] += float(value.detach())
                batches += 1
            log.epochs.append(
                EpochLog(
                    epoch=epoch,
                    components={name: s / batches for name, s in sums.items()},
                    accuracy=correct / n,
                )
            )
    finally:
        for params in groups.values():
            for p in params:
                p.requires_grad_(saved_grad_flags[id(p)])
    return log


def evaluate(net: ProtoConceptsNet, images: Tensor, labels: Tensor, batch_size: int = 64) -> dict[str, Any]:
    """Overall and per-class accuracy of argmax predictions."""

    num_classes = net.num_classes
    correct = np.zeros(num_classes, dtype=np.int64)
    totals = np.zeros(num_classes, dtype=np.int64)
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            batch = images[start : start + batch_size]
            lab = labels[start : start + batch_size]
            pred = net(batch).logits.argmax(dim=1)
            for c in range(num_classes):
                sel = lab == c
                totals[c] += int(sel.sum())
                correct[c] += int((pred[sel] == c).sum())
    overall = float(correct.sum() / max(totals.sum(), 1))
    per_class = [float(correct[c] / totals[c]) if totals[c] else float("nan") for c in range(num_classes)]
    return {"accuracy": overall, "per_class": per_class, "n": int(totals.sum())}


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------


def member_counts(
    net: ProtoConceptsNet,
    source: Tensor | DatasetManifest,
    batch_size: int = 64,
) -> np.ndarray:
    """Number of training patches contained in each ball, streamed per batch."""

    from .geometry import batched_memberships  # local import keeps module top light

    counts = np.zeros(net.num_prototypes, dtype=np.int64)
    with torch.no_grad():
        if isinstance(source, DatasetManifest):
            batches = (images for images, _, _ in iter_image_batches(source, "train", batch_size))
        else:
            batches = (source[s : s + batch_size] for s in range(0, source.shape[0], batch_size))
        for images in batches:
            grids = net.latent_grids(images, backbone_grad=False)
            flat = grids.reshape(-1, net.latent_dim)
            inside = batched_memberships(flat, net.centers, net.radius_param, net.geometry, net.geo_cfg)
            counts += inside.sum(dim=0).numpy().astype(np.int64)
    return counts


def prune_empty_balls(
    net: ProtoConceptsNet,
    source: Tensor | DatasetManifest,
    batch_size: int = 64,
) -> tuple[Tensor, np.ndarray]:
    """Zero the mask of every ball containing no training patch.

    Balls with members keep their current mask entry. Returns the updated
    mask and the per-ball member counts.
    """

    if isinstance(source, Tensor) and source.shape[0] == 0:
        raise ValueError("cannot prune against an empty training set")
    if isinstance(source, DatasetManifest) and not source.records("train"):
        raise ValueError("cannot prune against an empty training set")
    counts = member_counts(net, source, batch_size)
    with torch.no_grad():
        empty = torch.from_numpy(counts == 0)
        net.evidence.prune_mask[empty] = 0.0
    if int(net.evidence.prune_mask.sum()) == 0:
        warnings.warn(
            "every ball is empty: the prune mask is all zeros and the model cannot classify",
            RuntimeWarning,
            stacklevel=2,
        )
    return net.evidence.prune_mask.clone(), counts


# ---------------------------------------------------------------------------
# Last-layer finetuning (sparse convex problem over frozen similarities)
# ---------------------------------------------------------------------------


def finetune_last_layer(
    net: ProtoConceptsNet,
    data: TrainSet,
    *,
    l1_weight: float,
    epochs: int,
    lr: float,
    batch_size: int,
    base_seed: int,
) -> StageLog:
    """Optimize the evidence weights under CE plus L1 on wrong-class connections.

    Everything below the last layer is frozen, so similarities are
    precomputed once and the optimization runs over the cached values.
    Weight rows of pruned prototypes are pinned to zero throughout.
    """

    log = StageLog(stage=StageName.FINETUNE.value)
    net.evidence.apply_mask_to_weight()
    if epochs == 0:
        return log
    seed = stage_seed(base_seed, StageName.FINETUNE.value)
    seed_everything(seed)

    with torch.no_grad():
        sims = []
        for start in range(0, data.images.shape[0], batch_size):
            out = net(data.images[start : start + batch_size], backbone_grad=False)
            sims.append(out.similarities)
        all_sims = torch.cat(sims)

    weight = net.evidence.weight
    wrong = ~net.evidence.assignment
    optimizer = torch.optim.Adam([weight], lr=lr)
    n = all_sims.shape[0]
    for epoch in range(epochs):
        perm = _epoch_permutation(n, seed, epoch)
        sums = {"cross_entropy": 0.0, "l1": 0.0, "total": 0.0}
        correct = 0
        batches = 0
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(perm[start : start + batch_size])
            logits = net.evidence(all_sims[idx])
            labels = data.labels[idx]
            ce = F.cross_entropy(logits, labels)
            l1 = weight[wrong].abs().sum()
            total = ce + l1_weight * l1
            _check_finite({"cross_entropy": ce, "l1": l1, "total": total}, epoch)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            net.evidence.apply_mask_to_weight()
            with torch.no_grad():
                correct += int((logits.argmax(dim=1) == labels).sum())
            for name, value in (("cross_entropy", ce), ("l1", l1), ("total", total)):
                sums[name] += float(value.detach())
            batches += 1
        log.epochs.append(
            EpochLog(epoch=epoch, components={k: v / batches for k, v in sums.items()}, accuracy=correct / n)
        )
    return log


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    metrics: dict[str, Any]
    checkpoints: dict[str, Path]
    manifest: DatasetManifest
    net: ProtoConceptsNet
    member_counts: np.ndarray | None = None


def ensure_dataset(cfg: RunConfig) -> DatasetManifest:
    """Load the configured dataset, generating the synthetic set if asked to."""

    root = Path(cfg.get("data", "root"))
    resolution = cfg.get("model", "resolution")
    if cfg.get("data", "synthetic") and not root.is_dir() and cfg.get("data", "generate_if_missing"):
        spec = SyntheticConceptSpec(
            classes=cfg.synthetic_class_pairs(),
            image_size=resolution,
            train_per_class=cfg.get("data", "synthetic_train_per_class"),
            test_per_class=cfg.get("data", "synthetic_test_per_class"),
            noise=cfg.get("data", "synthetic_noise"),
            seed=cfg.get("data", "seed"),
        )
        logger.info("generating synthetic dataset under %s", root)
        return generate_synthetic(spec, root)
    return load_directory_dataset(root, resolution)


def build_net_from_config(cfg: RunConfig) -> ProtoConceptsNet:
    assignment = None
    if cfg.get("model", "assignment") == "shared":
        assignment = load_assignment_matrix(cfg.get("model", "assignment_file"))
    return build_net(
        backbone=cfg.get("model", "backbone"),
        latent_dim=cfg.get("model", "latent_dim"),
        num_classes=cfg.get("model", "num_classes"),
        prototypes_per_class=cfg.get("model", "prototypes_per_class"),
        assignment=assignment,
        geometry=cfg.geometry(),
        radius_init=cfg.get("geometry", "radius_init"),
        resolution=cfg.get("model", "resolution"),
        geo_cfg=cfg.geometry_config(),
    )


def _extra_weights(cfg: RunConfig) -> dict[str, float]:
    return {
        "subspace_sep": cfg.get("losses", "w_subspace_sep"),
        "orthogonality": cfg.get("losses", "w_orthogonality"),
    }


def run_pipeline(
    cfg: RunConfig,
    out_dir: str | Path,
    *,
    through: str = "finetune",
    resume_from: str | None = None,
) -> PipelineResult:
    """Execute warmup, joint, prune, finetune, checkpointing after each step.

    ``through`` may be "joint" (stop after the pre-prune evaluation),
    "prune", or "finetune". ``resume_from`` names a stage checkpoint
    ("warmup" or "joint") already present in ``out_dir`` to continue from.
    """

    if through not in ("joint", "prune", "finetune"):
        raise ValueError(f"invalid pipeline endpoint {through!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = ensure_dataset(cfg)
    if manifest.num_classes != cfg.get("model", "num_classes"):
        raise ValueError(
            f"dataset has {manifest.num_classes} classes but config says {cfg.get('model', 'num_classes')}"
        )
    train = TrainSet(*load_split_tensors(manifest, "train"))
    test = TrainSet(*load_split_tensors(manifest, "test"))

    base_seed = cfg.get("data", "seed")
    batch_size = cfg.get("data", "batch_size")
    schedule = schedule_from_config(cfg)
    extras = _extra_weights(cfg)
    config_text = dump_config(cfg)
    metrics: dict[str, Any] = {"seed": base_seed}
    checkpoints: dict[str, Path] = {}

    def save(stage: str) -> None:
        meta = {"stage": stage, "seed": base_seed, "config": config_text}
        checkpoints[stage] = save_checkpoint(net, out_dir / f"{stage}.ckpt", meta)

    if resume_from is None:
        seed_everything(stage_seed(base_seed, "init"))
        net = build_net_from_config(cfg)
        for spec in (schedule.stage(StageName.WARMUP), schedule.stage(StageName.JOINT)):
            stage_log = run_stage(net, train, spec, batch_size=batch_size, base_seed=base_seed, extra_weights=extras)
            metrics.update(stage_log.as_metrics())
            save(spec.name.value)
    else:
        if resume_from not in ("warmup", "joint"):
            raise ValueError(f"can only resume from 'warmup' or 'joint', not {resume_from!r}")
        ckpt = out_dir / f"{resume_from}.ckpt"
        if not ckpt.is_file():
            raise FileNotFoundError(f"cannot resume: checkpoint {ckpt} not found")
        net, _ = load_checkpoint(ckpt)
        if resume_from == "warmup":
            spec = schedule.stage(StageName.JOINT)
            stage_log = run_stage(net, train, spec, batch_size=batch_size, base_seed=base_seed, extra_weights=extras)
            metrics.update(stage_log.as_metrics())
            save("joint")

    before = evaluate(net, test.images, test.labels, batch_size)
    metrics["accuracy.before_prune"] = before["accuracy"]
    metrics["prototypes.total"] = net.num_prototypes
    counts: np.ndarray | None = None

    if through in ("prune", "finetune"):
        _, counts = prune_empty_balls(net, train.images, cfg.get("prune", "scan_batch_size"))
        surviving = int((net.evidence.prune_mask > 0).sum())
        metrics["prototypes.surviving"] = surviving
        metrics["prototypes.pruned"] = net.num_prototypes - surviving
        save("pruned")

    if through == "finetune":
        finetune_cfg = cfg.section("schedule.finetune")
        stage_log = finetune_last_layer(
            net,
            train,
            l1_weight=cfg.get("losses", "l1_weight"),
            epochs=finetune_cfg["epochs"],
            lr=finetune_cfg["lr_last_layer"],
            batch_size=batch_size,
            base_seed=base_seed,
        )
        metrics.update(stage_log.as_metrics())
        after = evaluate(net, test.images, test.labels, batch_size)
        metrics["accuracy.after_finetune"] = after["accuracy"]
        for c, acc in enumerate(after["per_class"]):
            metrics[f"accuracy.after_finetune.class{c:02d}"] = acc
        save("final")

    write_sidecar(out_dir / "metrics.txt", dict(sorted(metrics.items())))
    return PipelineResult(
        metrics=metrics,
        checkpoints=checkpoints,
        manifest=manifest,
        net=net,
        member_counts=counts,
    )


# ---------------------------------------------------------------------------
# Ablation sweeps
# ---------------------------------------------------------------------------

ABLATION_AXES = {
    "radius": "geometry.radius_init",
    "k": "losses.k",
}


def run_ablation(cfg: RunConfig, axis: str, values: list[str], out_root: str | Path) -> list[dict[str, Any]]:
    """Train one full pipeline per value of the chosen axis, same seed each time.

    Failed runs are reported in their row instead of aborting the sweep.
    """

    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; have {sorted(ABLATION_AXES)}")
    if len(values) < 2:
        raise ValueError("an ablation needs at least two values")
    out_root = Path(out_root)
    rows: list[dict[str, Any]] = []
    for value in values:
        run_cfg = cfg.with_overrides([f"{ABLATION_AXES[axis]}={value}"])
        run_dir = out_root / f"{axis}_{value}"
        row: dict[str, Any] = {"axis": axis, "value": value}
        try:
            result = run_pipeline(run_cfg, run_dir)
            row.update(
                surviving=result.metrics["prototypes.surviving"],
                total=result.metrics["prototypes.total"],
                accuracy_before_prune=result.metrics["accuracy.before_prune"],
                accuracy_after_finetune=result.metrics["accuracy.after_finetune"],
            )
        except Exception as exc:  # noqa: BLE001 - partial tables are the contract
            logger.error("ablation run %s=%s failed: %s", axis, value, exc)
            row["error"] = str(exc)
        rows.append(row)
    return rows
