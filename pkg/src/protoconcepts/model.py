"""Classifier assembly: backbone, add-on layers, ball layer, evidence layer.

The forward pass maps an image batch to a latent patch grid, scores every
grid cell against every prototype ball, max-pools each ball's similarity
map, and aggregates the pooled similarities into class logits through the
evidence layer. Logits stay raw; softmax is applied only where
probabilities are reported.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import torch
from torch import Tensor, nn

from .geometry import (
    Geometry,
    GeometryConfig,
    PrototypeBall,
    batched_similarities,
)
from .losses import ClassAssignmentView


class TinyConvBackbone(nn.Module):
    """Three conv blocks with total stride 8, sized for small synthetic images.

    No normalization layers: keeps every forward pass a pure function of
    the parameters, so frozen stages leave the backbone bit-identical.
    """

    def __init__(self, out_channels: int = 128):
        super().__init__()
        self.out_channels = out_channels
        widths = (32, 64, out_channels)
        layers: list[nn.Module] = []
        in_ch = 3
        for w in widths:
            layers += [nn.Conv2d(in_ch, w, kernel_size=3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            in_ch = w
        self.blocks = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.blocks(x)


BackboneBuilder = Callable[[], nn.Module]

_BACKBONES: dict[str, BackboneBuilder] = {
    "tiny3": TinyConvBackbone,
}


def register_backbone(name: str, builder: BackboneBuilder) -> None:
    """Register a backbone under ``name``; builders must expose ``out_channels``."""

    if name in _BACKBONES:
        raise ValueError(f"backbone {name!r} already registered")
    _BACKBONES[name] = builder


def available_backbones() -> list[str]:
    return sorted(_BACKBONES)


@dataclass
class BackboneAdapter:
    """A named feature extractor with a known channel count."""

    name: str
    module: nn.Module
    output_dim: int
    _grid_cache: dict[int, tuple[int, int]] = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, name: str) -> "BackboneAdapter":
        try:
            builder = _BACKBONES[name]
        except KeyError:
            raise ValueError(
                f"unknown backbone {name!r}; available: {', '.join(available_backbones())}"
            ) from None
        module = builder()
        return cls(name=name, module=module, output_dim=module.out_channels)

    def output_grid(self, resolution: int) -> tuple[int, int]:
        """Spatial grid extents produced for square inputs of ``resolution``."""

        if resolution not in self._grid_cache:
            with torch.no_grad():
                out = self.module(torch.zeros(1, 3, resolution, resolution))
            self._grid_cache[resolution] = (out.shape[2], out.shape[3])
        return self._grid_cache[resolution]


class AddOnLayers(nn.Module):
    """Two pointwise convolutions mapping backbone channels to the latent width.

    For LOG geometry the output is squashed into [0, 1] per channel with a
    sigmoid; for COSINE geometry patches are compared by direction, so no
    squash is applied.
    """

    def __init__(self, in_channels: int, latent_dim: int, squash: bool):
        super().__init__()
        self.in_channels = in_channels
        self.latent_dim = latent_dim
        self.squash = squash
        self.conv1 = nn.Conv2d(in_channels, latent_dim, kernel_size=1)
        self.conv2 = nn.Conv2d(latent_dim, latent_dim, kernel_size=1)

    def forward(self, x: Tensor) -> Tensor:
        x = self.conv2(torch.relu(self.conv1(x)))
        return torch.sigmoid(x) if self.squash else x


class EvidenceLayer(nn.Module):
    """Prototype-to-class weights with a 0/1 prune mask.

    Logits are accumulated in value-sorted order so that summation cannot
    depend on how prototypes happen to be numbered: permuting balls,
    weight rows, and mask entries together leaves every logit bit-identical.
    """

    def __init__(self, weight: Tensor, assignment: Tensor):
        super().__init__()
        weight = torch.as_tensor(weight, dtype=torch.get_default_dtype())
        assignment = torch.as_tensor(assignment).bool()
        if weight.shape != assignment.shape:
            raise ValueError("weight and assignment shapes differ")
        self.weight = nn.Parameter(weight.clone())
        self.register_buffer("prune_mask", torch.ones(weight.shape[0], dtype=weight.dtype))
        self.register_buffer("assignment", assignment.clone())

    @property
    def num_prototypes(self) -> int:
        return self.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def forward(self, similarities: Tensor) -> Tensor:
        masked = similarities * self.prune_mask
        contributions = masked.unsqueeze(-1) * self.weight  # (B, m, C)
        ordered = torch.sort(contributions, dim=-2, stable=True).values
        return ordered.sum(dim=-2)

    def assignment_view(self) -> ClassAssignmentView:
        return ClassAssignmentView(self.assignment, active=self.prune_mask > 0)

    def apply_mask_to_weight(self) -> None:
        """Zero the weight rows of pruned prototypes in place."""

        with torch.no_grad():
            self.weight[self.prune_mask == 0] = 0.0


def init_evidence_class_specific(m_per_class: int, num_classes: int) -> EvidenceLayer:
    """Block assignment: prototype j belongs to class j // m_per_class.

    Assigned connections start at 1.0 and all others at -0.5.
    """

    if m_per_class < 1:
        raise ValueError(f"m_per_class must be >= 1, got {m_per_class}")
    m = m_per_class * num_classes
    assignment = torch.zeros(m, num_classes, dtype=torch.bool)
    for j in range(m):
        assignment[j, j // m_per_class] = True
    weight = torch.where(assignment, 1.0, -0.5)
    return EvidenceLayer(weight, assignment)


def init_evidence_shared(assignment: Tensor) -> EvidenceLayer:
    """Evidence layer over a fixed, possibly many-to-many assignment matrix."""

    assignment = torch.as_tensor(assignment).bool()
    if assignment.dim() != 2:
        raise ValueError("assignment must be an (m, C) matrix")
    if not assignment.any(dim=1).all():
        raise ValueError("every prototype must be assigned to at least one class")
    if not assignment.any(dim=0).all():
        raise ValueError("every class must have at least one prototype")
    weight = torch.where(assignment, 1.0, -0.5)
    return EvidenceLayer(weight, assignment)


def load_assignment_matrix(path: str | Path) -> Tensor:
    """Read a shared prototype-to-class assignment from a JSON file.

    Schema: ``{"num_classes": C, "assignments": [[class ids...], ...]}``
    with one id list per prototype.
    """

    with open(path) as f:
        payload = json.load(f)
    num_classes = int(payload["num_classes"])
    rows = payload["assignments"]
    matrix = torch.zeros(len(rows), num_classes, dtype=torch.bool)
    for j, ids in enumerate(rows):
        for c in ids:
            if not 0 <= int(c) < num_classes:
                raise ValueError(f"assignment for prototype {j} names invalid class {c}")
            matrix[j, int(c)] = True
    return matrix


class ForwardResult(NamedTuple):
    logits: Tensor
    similarities: Tensor
    maps: Tensor


class ProtoConceptsNet(nn.Module):
    """Backbone + add-on + prototype balls + evidence layer."""

    def __init__(
        self,
        backbone: BackboneAdapter,
        addon: AddOnLayers,
        centers: Tensor,
        radius_param: Tensor,
        evidence: EvidenceLayer,
        geometry: Geometry,
        geo_cfg: GeometryConfig,
        input_resolution: int,
    ):
        super().__init__()
        centers = torch.as_tensor(centers, dtype=torch.get_default_dtype())
        radius_param = torch.as_tensor(radius_param, dtype=torch.get_default_dtype())
        if centers.shape[0] != evidence.num_prototypes:
            raise ValueError("center count does not match evidence layer")
        if centers.shape[1] != addon.latent_dim:
            raise ValueError("center dimension does not match add-on latent width")
        if radius_param.shape != (centers.shape[0],):
            raise ValueError("radius_param must be one scalar per prototype")
        self.backbone = backbone
        self.addon = addon
        self.centers = nn.Parameter(centers.clone())
        self.radius_param = nn.Parameter(radius_param.clone())
        self.evidence = evidence
        self.geometry = geometry
        self.geo_cfg = geo_cfg
        self.input_resolution = input_resolution

    @property
    def num_prototypes(self) -> int:
        return self.centers.shape[0]

    @property
    def num_classes(self) -> int:
        return self.evidence.num_classes

    @property
    def latent_dim(self) -> int:
        return self.centers.shape[1]

    def balls(self) -> list[PrototypeBall]:
        return [
            PrototypeBall(center=self.centers[j], radius_param=self.radius_param[j], geometry=self.geometry)
            for j in range(self.num_prototypes)
        ]

    def _check_images(self, images: Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected image batch (B, 3, H, W), got shape {tuple(images.shape)}")
        res = self.input_resolution
        if images.shape[2] != res or images.shape[3] != res:
            raise ValueError(
                f"input resolution mismatch: images are {images.shape[2]}x{images.shape[3]}, "
                f"net expects {res}x{res}"
            )

    def latent_grids(self, images: Tensor, *, backbone_grad: bool = True) -> Tensor:
        """Latent patch grids ``(B, H, W, D)`` for an image batch."""

        self._check_images(images)
        if backbone_grad:
            features = self.backbone.module(images)
        else:
            with torch.no_grad():
                features = self.backbone.module(images)
        latent = self.addon(features)
        return latent.permute(0, 2, 3, 1)

    def similarities_from_grids(self, grids: Tensor) -> tuple[Tensor, Tensor]:
        """Pooled similarities and full maps from latent grids ``(B, H, W, D)``."""

        b, h, w, d = grids.shape
        flat = grids.reshape(b, h * w, d)
        maps_flat = batched_similarities(flat, self.centers, self.radius_param, self.geometry, self.geo_cfg)
        sims = maps_flat.max(dim=1).values
        maps = maps_flat.permute(0, 2, 1).reshape(b, self.num_prototypes, h, w)
        return sims, maps

    def forward(self, images: Tensor, *, backbone_grad: bool = True) -> ForwardResult:
        grids = self.latent_grids(images, backbone_grad=backbone_grad)
        sims, maps = self.similarities_from_grids(grids)
        logits = self.evidence(sims)
        return ForwardResult(logits=logits, similarities=sims, maps=maps)

    def predict_proba(self, images: Tensor) -> Tensor:
        with torch.no_grad():
            return torch.softmax(self.forward(images).logits, dim=1)


def build_net(
    *,
    backbone: str = "tiny3",
    latent_dim: int = 32,
    num_classes: int = 4,
    prototypes_per_class: int = 10,
    assignment: Tensor | None = None,
    geometry: Geometry = Geometry.LOG,
    radius_init: float = 1.0,
    resolution: int = 64,
    geo_cfg: GeometryConfig | None = None,
) -> ProtoConceptsNet:
    """Construct a fresh net; callers seed torch beforehand for determinism.

    With ``assignment`` given, the evidence layer uses that fixed shared
    matrix; otherwise prototypes are class-specific.
    """

    geo_cfg = geo_cfg or GeometryConfig()
    adapter = BackboneAdapter.create(backbone)
    addon = AddOnLayers(adapter.output_dim, latent_dim, squash=geometry is Geometry.LOG)
    if assignment is not None:
        evidence = init_evidence_shared(assignment)
        if evidence.num_classes != num_classes:
            raise ValueError("assignment matrix class count does not match num_classes")
    else:
        evidence = init_evidence_class_specific(prototypes_per_class, num_classes)
    m = evidence.num_prototypes
    if geometry is Geometry.LOG:
        centers = torch.rand(m, latent_dim)
    else:
        centers = torch.randn(m, latent_dim)
        if radius_init > math.pi:
            warnings.warn(
                f"cosine radius init {radius_init:g} exceeds pi; the effective radius is clamped to pi",
                RuntimeWarning,
                stacklevel=2,
            )
    radius_param = torch.full((m,), float(radius_init))
    return ProtoConceptsNet(
        backbone=adapter,
        addon=addon,
        centers=centers,
        radius_param=radius_param,
        evidence=evidence,
        geometry=geometry,
        geo_cfg=geo_cfg,
        input_resolution=resolution,
    )


# ---------------------------------------------------------------------------
# Logit decomposition (the per-image evidence scoresheet)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContributionRow:
    prototype_id: int
    similarity: float
    weight: float
    contribution: float


@dataclass
class Decomposition:
    """Per-class breakdown of the logits of one image."""

    logits: Tensor
    similarities: Tensor
    rows: list[list[ContributionRow]]

    def class_total(self, class_id: int) -> float:
        return float(sum(r.contribution for r in self.rows[class_id]))


def logit_decomposition(net: ProtoConceptsNet, image: Tensor) -> Decomposition:
    """Break one image's logits into per-prototype contributions.

    Masked prototypes appear with contribution exactly zero, so per-class
    sums reproduce the forward logits.
    """

    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.shape[0] != 1:
        raise ValueError("logit_decomposition takes a single image")
    with torch.no_grad():
        out = net(image)
    sims = out.similarities[0]
    mask = net.evidence.prune_mask.detach()
    weight = net.evidence.weight.detach()
    rows: list[list[ContributionRow]] = []
    for c in range(net.num_classes):
        class_rows = [
            ContributionRow(
                prototype_id=j,
                similarity=float(sims[j]),
                weight=float(weight[j, c]),
                contribution=float(sims[j] * mask[j] * weight[j, c]),
            )
            for j in range(net.num_prototypes)
        ]
        rows.append(class_rows)
    return Decomposition(logits=out.logits[0], similarities=sims, rows=rows)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(net: ProtoConceptsNet, path: str | Path, metadata: dict | None = None) -> Path:
    """Serialize a net into a single self-describing file.

    Layout (a flat dict): ``format_version``, ``geometry``,
    ``geometry_config`` (epsilon, min_radius), ``input_resolution``,
    ``backbone`` (name + state dict), ``addon`` (shape fields + state
    dict), ``centers`` (m x D), ``radius_param`` (m), ``evidence``
    (weight m x C, prune_mask m, assignment m x C), and a free-form
    ``metadata`` dict. Tensors round-trip bit-exactly.
    """

    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "geometry": net.geometry.value,
        "geometry_config": {"epsilon": net.geo_cfg.epsilon, "min_radius": net.geo_cfg.min_radius},
        "input_resolution": net.input_resolution,
        "backbone": {"name": net.backbone.name, "state": net.backbone.module.state_dict()},
        "addon": {
            "in_channels": net.addon.in_channels,
            "latent_dim": net.addon.latent_dim,
            "squash": net.addon.squash,
            "state": net.addon.state_dict(),
        },
        "centers": net.centers.detach().clone(),
        "radius_param": net.radius_param.detach().clone(),
        "evidence": {
            "weight": net.evidence.weight.detach().clone(),
            "prune_mask": net.evidence.prune_mask.clone(),
            "assignment": net.evidence.assignment.clone(),
        },
        "metadata": dict(metadata or {}),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[ProtoConceptsNet, dict]:
    """Rebuild a net (and its metadata) from :func:`save_checkpoint` output."""

    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    geometry = Geometry(payload["geometry"])
    geo_cfg = GeometryConfig(**payload["geometry_config"])
    adapter = BackboneAdapter.create(payload["backbone"]["name"])
    adapter.module.load_state_dict(payload["backbone"]["state"])
    addon_info = payload["addon"]
    addon = AddOnLayers(addon_info["in_channels"], addon_info["latent_dim"], addon_info["squash"])
    addon.load_state_dict(addon_info["state"])
    evidence = EvidenceLayer(payload["evidence"]["weight"], payload["evidence"]["assignment"])
    with torch.no_grad():
        evidence.weight.copy_(payload["evidence"]["weight"])
        evidence.prune_mask.copy_(payload["evidence"]["prune_mask"])
    net = ProtoConceptsNet(
        backbone=adapter,
        addon=addon,
        centers=payload["centers"],
        radius_param=payload["radius_param"],
        evidence=evidence,
        geometry=geometry,
        geo_cfg=geo_cfg,
        input_resolution=int(payload["input_resolution"]),
    )
    return net, payload.get("metadata", {})
