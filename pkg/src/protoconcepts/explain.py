"""Concept visualization and reporting.

A trained ball is explained by the training patches it contains: the scan
finds every member patch, galleries rank and deduplicate them per source
image, and scoresheets lay out the per-prototype evidence behind one
test prediction. Reports are static HTML plus PNG crops, mirrored into a
machine-readable sidecar, and regenerating a report over the same inputs
produces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import (
    DatasetManifest,
    ImageRecord,
    cell_concept_fraction,
    load_concept_mask,
    load_image,
    iter_image_batches,
    manifest_fingerprint,
)
from .geometry import (
    SimilarityMap,
    batched_memberships,
    batched_similarities,
    clamp_values,
    raw_center_distances,
)
from .model import ProtoConceptsNet, logit_decomposition
from .sidecar import format_sidecar

logger = logging.getLogger(__name__)

BBOX_PERCENTILE = 95.0
DEFAULT_GALLERY_SIZE = 5
DEFAULT_SCORESHEET_ROWS = 3

CACHE_ENV_VAR = "PROTOCONCEPTS_CACHE"


@dataclass(frozen=True)
class MemberPatch:
    """One training patch contained in a ball."""

    image_id: str
    row: int
    col: int
    similarity: float
    center_distance: float
    bbox: tuple[int, int, int, int]
    class_id: int
    class_name: str


@dataclass
class ConceptGallery:
    """Ranked, per-image-deduplicated member patches visualizing one ball."""

    prototype_id: int
    members: list[MemberPatch]
    assigned_classes: tuple[int, ...] = ()


@dataclass
class ScoresheetRow:
    prototype_id: int
    similarity: float
    weight: float
    contribution: float
    bbox: tuple[int, int, int, int]
    gallery: ConceptGallery | None = None


@dataclass
class Scoresheet:
    """Per-image evidence listing: top contributing balls and class totals."""

    image_id: str
    predicted_class: int
    class_totals: list[float]
    probabilities: list[float]
    rows: list[ScoresheetRow] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Bounding boxes
# ---------------------------------------------------------------------------


def extract_bbox(sim_map: SimilarityMap | torch.Tensor | np.ndarray, image_size: tuple[int, int]) -> tuple[int, int, int, int]:
    """Localize a similarity map in pixel space.

    The map is bilinearly upsampled to the image resolution, thresholded
    at its 95th percentile, and the tight rectangle of the surviving mask
    is returned as (left, top, right, bottom).
    """

    values = sim_map.values if isinstance(sim_map, SimilarityMap) else torch.as_tensor(sim_map)
    if values.numel() == 0:
        raise ValueError("cannot extract a bounding box from an empty map")
    h, w = image_size
    up = F.interpolate(
        values.detach().to(torch.float32).reshape(1, 1, *values.shape),
        size=(h, w),
        mode="bilinear",
        align_corners=False,
    )[0, 0].numpy()
    threshold = np.percentile(up, BBOX_PERCENTILE)
    mask = up >= threshold
    rows = np.any(mask, axis=1)
    cols = np.any(mask, axis=0)
    top = int(np.argmax(rows))
    bottom = int(len(rows) - np.argmax(rows[::-1]))
    left = int(np.argmax(cols))
    right = int(len(cols) - np.argmax(cols[::-1]))
    return left, top, right, bottom


# ---------------------------------------------------------------------------
# Member scan
# ---------------------------------------------------------------------------


def _net_fingerprint(net: ProtoConceptsNet) -> str:
    h = hashlib.sha256()
    h.update(net.geometry.value.encode())
    h.update(np.float64(net.geo_cfg.epsilon).tobytes())
    h.update(np.float64(net.geo_cfg.min_radius).tobytes())
    for state in (net.backbone.module.state_dict(), net.addon.state_dict()):
        for key in sorted(state):
            h.update(key.encode())
            h.update(state[key].detach().numpy().tobytes())
    for tensor in (net.centers, net.radius_param, net.evidence.weight, net.evidence.prune_mask):
        h.update(tensor.detach().numpy().tobytes())
    return h.hexdigest()


def _members_to_json(members: dict[int, list[MemberPatch]]) -> dict:
    return {
        str(pid): [
            [m.image_id, m.row, m.col, m.similarity, m.center_distance, list(m.bbox), m.class_id, m.class_name]
            for m in patches
        ]
        for pid, patches in members.items()
    }


def _members_from_json(payload: dict) -> dict[int, list[MemberPatch]]:
    out: dict[int, list[MemberPatch]] = {}
    for pid, rows in payload.items():
        out[int(pid)] = [
            MemberPatch(
                image_id=r[0], row=r[1], col=r[2], similarity=r[3],
                center_distance=r[4], bbox=tuple(r[5]), class_id=r[6], class_name=r[7],
            )
            for r in rows
        ]
    return out


def scan_members(
    net: ProtoConceptsNet,
    manifest: DatasetManifest,
    *,
    split: str = "train",
    batch_size: int = 64,
    cache_dir: str | Path | None = None,
) -> dict[int, list[MemberPatch]]:
    """Find every training patch contained in every ball.

    Images are streamed in batches; latents are discarded after each
    batch. Every hit records its grid cell, the plateau similarity, the
    unclamped center distance used for ranking, and a pixel bounding box
    from the ball's similarity map on that image. When ``cache_dir`` is
    given (the CLI wires it to $PROTOCONCEPTS_CACHE), results are keyed
    by digests of the net and the split and reused across runs.
    """

    cache_path = None
    if cache_dir is not None:
        key = hashlib.sha256(
            f"{_net_fingerprint(net)}|{manifest_fingerprint(manifest, split)}|{split}".encode()
        ).hexdigest()
        cache_path = Path(cache_dir) / f"members_{key}.json"
        if cache_path.is_file():
            logger.info("member scan cache hit: %s", cache_path)
            return _members_from_json(json.loads(cache_path.read_text()))

    grid_h, grid_w = net.backbone.output_grid(net.input_resolution)
    resolution = net.input_resolution
    members: dict[int, list[MemberPatch]] = {j: [] for j in range(net.num_prototypes)}
    with torch.no_grad():
        for images, _, records in iter_image_batches(manifest, split, batch_size):
            grids = net.latent_grids(images, backbone_grad=False)
            flat = grids.reshape(grids.shape[0], -1, net.latent_dim)
            inside = batched_memberships(flat, net.centers, net.radius_param, net.geometry, net.geo_cfg)
            if not inside.any():
                continue
            sims = batched_similarities(flat, net.centers, net.radius_param, net.geometry, net.geo_cfg)
            raw = raw_center_distances(flat, net.centers, net.geometry)
            for b, record in enumerate(records):
                hit_cells, hit_balls = torch.nonzero(inside[b], as_tuple=True)
                if len(hit_cells) == 0:
                    continue
                bboxes: dict[int, tuple[int, int, int, int]] = {}
                for cell, ball in zip(hit_cells.tolist(), hit_balls.tolist()):
                    if ball not in bboxes:
                        ball_map = sims[b, :, ball].reshape(grid_h, grid_w)
                        bboxes[ball] = extract_bbox(ball_map, (resolution, resolution))
                    members[ball].append(
                        MemberPatch(
                            image_id=record.image_id,
                            row=cell // grid_w,
                            col=cell % grid_w,
                            similarity=float(sims[b, cell, ball]),
                            center_distance=float(raw[b, cell, ball]),
                            bbox=bboxes[ball],
                            class_id=record.class_id,
                            class_name=record.class_name,
                        )
                    )

    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        cache_path.write_text(json.dumps(_members_to_json(members)))
    return members


def build_gallery(
    members: Sequence[MemberPatch],
    top_n: int,
    *,
    prototype_id: int = -1,
    assigned_classes: tuple[int, ...] = (),
) -> ConceptGallery:
    """Rank members by unclamped center distance, one entry per source image.

    The clamped similarity is constant across members by construction, so
    only the underlying distance can order them.
    """

    if top_n < 1:
        raise ValueError(f"top_n must be >= 1, got {top_n}")
    best: dict[str, MemberPatch] = {}
    for m in members:
        current = best.get(m.image_id)
        if current is None or m.center_distance < current.center_distance:
            best[m.image_id] = m
    ranked = sorted(best.values(), key=lambda m: (m.center_distance, m.image_id))
    return ConceptGallery(prototype_id=prototype_id, members=ranked[:top_n], assigned_classes=assigned_classes)


def build_all_galleries(
    net: ProtoConceptsNet,
    members: dict[int, list[MemberPatch]],
    top_n: int = DEFAULT_GALLERY_SIZE,
) -> dict[int, ConceptGallery]:
    galleries: dict[int, ConceptGallery] = {}
    for j in range(net.num_prototypes):
        assigned = tuple(torch.nonzero(net.evidence.assignment[j], as_tuple=False).flatten().tolist())
        galleries[j] = build_gallery(members.get(j, []), top_n, prototype_id=j, assigned_classes=assigned)
    return galleries


def concept_purity(
    net: ProtoConceptsNet,
    members: dict[int, list[MemberPatch]],
    manifest: DatasetManifest,
    *,
    overlap_threshold: float = 0.25,
) -> dict[int, float]:
    """Per-ball agreement between member concepts and the ball's modal concept.

    A member's ground-truth concept is its image's class concept when at
    least ``overlap_threshold`` of the member cell is covered by the
    concept mask, and background otherwise. Balls without members (or
    without mask data) are omitted.
    """

    records = {r.image_id: r for r in manifest.records("train")}
    grid_shape = net.backbone.output_grid(net.input_resolution)
    mask_cache: dict[str, np.ndarray | None] = {}
    purities: dict[int, float] = {}
    for ball, patches in members.items():
        if not patches:
            continue
        concepts: list[str] = []
        for m in patches:
            record = records.get(m.image_id)
            if record is None:
                continue
            if m.image_id not in mask_cache:
                mask_cache[m.image_id] = load_concept_mask(manifest, record)
            mask = mask_cache[m.image_id]
            if mask is None:
                continue
            fraction = cell_concept_fraction(mask, m.row, m.col, grid_shape)
            concepts.append(m.class_name if fraction >= overlap_threshold else "background")
        if not concepts:
            continue
        counts: dict[str, int] = {}
        for c in concepts:
            counts[c] = counts.get(c, 0) + 1
        purities[ball] = max(counts.values()) / len(concepts)
    return purities


# ---------------------------------------------------------------------------
# Scoresheets
# ---------------------------------------------------------------------------


def local_explanation(
    net: ProtoConceptsNet,
    image: torch.Tensor,
    image_id: str,
    galleries: dict[int, ConceptGallery] | None = None,
    top_p: int = DEFAULT_SCORESHEET_ROWS,
) -> Scoresheet:
    """Evidence scoresheet for one image: top contributing balls by weight x similarity."""

    if image.dim() == 3:
        image = image.unsqueeze(0)
    with torch.no_grad():
        out = net(image)
        probs = torch.softmax(out.logits, dim=1)[0]
    decomp = logit_decomposition(net, image[0])
    predicted = int(out.logits[0].argmax())
    totals = [decomp.class_total(c) for c in range(net.num_classes)]
    sheet = Scoresheet(
        image_id=image_id,
        predicted_class=predicted,
        class_totals=totals,
        probabilities=probs.tolist(),
    )
    if int((net.evidence.prune_mask > 0).sum()) == 0:
        return sheet
    grid_h, grid_w = net.backbone.output_grid(net.input_resolution)
    contributions = decomp.rows[predicted]
    ranked = sorted(contributions, key=lambda r: (-r.contribution, r.prototype_id))
    active = [r for r in ranked if float(net.evidence.prune_mask[r.prototype_id]) > 0]
    for row in active[:top_p]:
        j = row.prototype_id
        ball_map = out.maps[0, j]
        bbox = extract_bbox(ball_map, (net.input_resolution, net.input_resolution))
        sheet.rows.append(
            ScoresheetRow(
                prototype_id=j,
                similarity=row.similarity,
                weight=row.weight,
                contribution=row.contribution,
                bbox=bbox,
                gallery=None if galleries is None else galleries.get(j),
            )
        )
    return sheet


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

_PAGE = """<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="UTF-8" />
<title>{title}</title>
<style>
  body {{ font-family: Helvetica, Arial, sans-serif; margin: 20px; color: #222; }}
  h1 {{ font-size: 22px; }} h2 {{ font-size: 17px; margin: 18px 0 6px; }}
  table {{ border-collapse: collapse; }}
  td, th {{ border: 1px solid #ccc; padding: 6px 10px; font-size: 13px; text-align: left; }}
  img {{ image-rendering: pixelated; border: 1px solid #999; }}
  .muted {{ color: #777; font-size: 12px; }}
</style>
</head>
<body>
<h1>{title}</h1>
{body}
</body>
</html>
"""


def _save_crop(manifest: DatasetManifest, record: ImageRecord, bbox: tuple[int, int, int, int], out_path: Path, scale: int = 2) -> None:
    arr = load_image(record, manifest.resolution)
    img = Image.fromarray((arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8))
    left, top, right, bottom = bbox
    crop = img.crop((left, top, right, bottom))
    crop = crop.resize((crop.width * scale, crop.height * scale), Image.NEAREST)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    crop.save(out_path)


def _verify_gallery_members(net: ProtoConceptsNet, manifest: DatasetManifest, galleries: Iterable[ConceptGallery]) -> None:
    records = {r.image_id: r for r in manifest.records("train")}
    grid_w = net.backbone.output_grid(net.input_resolution)[1]
    by_image: dict[str, list[tuple[int, MemberPatch]]] = {}
    for gallery in galleries:
        for m in gallery.members:
            by_image.setdefault(m.image_id, []).append((gallery.prototype_id, m))
    with torch.no_grad():
        for image_id, entries in by_image.items():
            record = records[image_id]
            image = torch.from_numpy(load_image(record, manifest.resolution)).unsqueeze(0)
            grids = net.latent_grids(image, backbone_grad=False)
            flat = grids.reshape(1, -1, net.latent_dim)
            inside = batched_memberships(flat, net.centers, net.radius_param, net.geometry, net.geo_cfg)[0]
            for ball, m in entries:
                if not bool(inside[m.row * grid_w + m.col, ball]):
                    raise ValueError(
                        f"gallery patch {image_id} cell ({m.row}, {m.col}) is not a member of ball {ball}"
                    )


def render_report(
    payload: Sequence[ConceptGallery] | Scoresheet,
    manifest: DatasetManifest,
    out_dir: str | Path,
    *,
    net: ProtoConceptsNet | None = None,
) -> Path:
    """Write a self-contained HTML report plus its machine-readable sidecar.

    ``payload`` is either a list of galleries (one section per prototype)
    or a single scoresheet. With ``net`` given, gallery membership is
    re-verified before anything is written. Rendering is idempotent:
    identical inputs produce identical bytes.
    """

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out_dir}: {exc}") from exc
    if isinstance(payload, Scoresheet):
        return _render_scoresheet(payload, manifest, out_dir, net=net)
    return _render_galleries(list(payload), manifest, out_dir, net=net)


def _gallery_section(gallery: ConceptGallery, crop_paths: list[str]) -> str:
    rows = []
    for m, crop in zip(gallery.members, crop_paths):
        rows.append(
            f"<tr><td><img src='{crop}' alt='member'/></td><td>{m.image_id}</td>"
            f"<td>{m.class_name}</td><td>({m.row}, {m.col})</td>"
            f"<td>{m.similarity!r}</td><td>{m.center_distance!r}</td></tr>"
        )
    table = (
        "<table><tr><th>patch</th><th>image</th><th>class</th><th>cell</th>"
        "<th>similarity</th><th>center distance</th></tr>" + "".join(rows) + "</table>"
        if rows
        else "<p class='muted'>no member patches (pruned prototype)</p>"
    )
    classes = ", ".join(str(c) for c in gallery.assigned_classes) or "none"
    return f"<h2>Prototype {gallery.prototype_id}</h2><p class='muted'>assigned classes: {classes}</p>{table}"


def _render_galleries(
    galleries: list[ConceptGallery],
    manifest: DatasetManifest,
    out_dir: Path,
    *,
    net: ProtoConceptsNet | None,
) -> Path:
    if net is not None:
        _verify_gallery_members(net, manifest, galleries)
    records = {r.image_id: r for r in manifest.records("train")}
    sections = []
    sidecar: dict[str, object] = {"report.kind": "galleries", "report.prototypes": len(galleries)}
    for gallery in galleries:
        pid = gallery.prototype_id
        crop_rel_paths = []
        for rank, m in enumerate(gallery.members):
            rel = f"prototypes/{pid:04d}/member_{rank:02d}.png"
            _save_crop(manifest, records[m.image_id], m.bbox, out_dir / rel)
            crop_rel_paths.append(rel)
            prefix = f"prototype.{pid}.member.{rank}"
            sidecar[f"{prefix}.image_id"] = m.image_id
            sidecar[f"{prefix}.row"] = m.row
            sidecar[f"{prefix}.col"] = m.col
            sidecar[f"{prefix}.similarity"] = m.similarity
            sidecar[f"{prefix}.center_distance"] = m.center_distance
            sidecar[f"{prefix}.bbox"] = ",".join(str(v) for v in m.bbox)
            sidecar[f"{prefix}.class"] = m.class_name
        sidecar[f"prototype.{pid}.members"] = len(gallery.members)
        sidecar[f"prototype.{pid}.assigned_classes"] = ",".join(str(c) for c in gallery.assigned_classes)
        sections.append(_gallery_section(gallery, crop_rel_paths))
    (out_dir / "index.html").write_text(_PAGE.format(title="Prototype concept galleries", body="\n".join(sections)))
    (out_dir / "sidecar.txt").write_text(format_sidecar(sidecar))
    return out_dir / "index.html"


def _render_scoresheet(
    sheet: Scoresheet,
    manifest: DatasetManifest,
    out_dir: Path,
    *,
    net: ProtoConceptsNet | None,
) -> Path:
    if net is not None:
        galleries = [row.gallery for row in sheet.rows if row.gallery is not None]
        _verify_gallery_members(net, manifest, galleries)
    records = {r.image_id: r for r in manifest.records("train")}
    test_records = {r.image_id: r for split in manifest.splits.values() for r in split}
    sidecar: dict[str, object] = {
        "report.kind": "scoresheet",
        "image_id": sheet.image_id,
        "predicted_class": sheet.predicted_class,
    }
    for c, total in enumerate(sheet.class_totals):
        sidecar[f"class.{c}.total"] = total
        sidecar[f"class.{c}.probability"] = sheet.probabilities[c]

    test_record = test_records.get(sheet.image_id)
    body_parts = [
        f"<p>predicted class: <b>{sheet.predicted_class}</b> "
        f"({manifest.classes[sheet.predicted_class]})</p>"
    ]
    if test_record is not None:
        arr = load_image(test_record, manifest.resolution)
        img = Image.fromarray((arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8))
        img = img.resize((img.width * 2, img.height * 2), Image.NEAREST)
        img.save(out_dir / "test_image.png")
        body_parts.append("<p><img src='test_image.png' alt='test image'/></p>")

    row_sections = []
    for i, row in enumerate(sheet.rows):
        prefix = f"row.{i}"
        sidecar[f"{prefix}.prototype"] = row.prototype_id
        sidecar[f"{prefix}.similarity"] = row.similarity
        sidecar[f"{prefix}.weight"] = row.weight
        sidecar[f"{prefix}.contribution"] = row.contribution
        sidecar[f"{prefix}.bbox"] = ",".join(str(v) for v in row.bbox)
        test_crop_rel = ""
        if test_record is not None:
            test_crop_rel = f"rows/test_crop_{i:02d}.png"
            _save_crop(manifest, test_record, row.bbox, out_dir / test_crop_rel)
        gallery_html = "<span class='muted'>no gallery</span>"
        if row.gallery is not None:
            crops = []
            for rank, m in enumerate(row.gallery.members):
                rel = f"prototypes/{row.prototype_id:04d}/member_{rank:02d}.png"
                _save_crop(manifest, records[m.image_id], m.bbox, out_dir / rel)
                crops.append(f"<img src='{rel}' alt='member' title='{m.image_id}'/>")
            gallery_html = " ".join(crops) if crops else gallery_html
        test_img_html = f"<img src='{test_crop_rel}' alt='test patch'/>" if test_crop_rel else ""
        row_sections.append(
            f"<tr><td>{row.prototype_id}</td><td>{test_img_html}</td><td>{gallery_html}</td>"
            f"<td>{row.similarity!r}</td><td>{row.weight!r}</td><td>{row.contribution!r}</td></tr>"
        )
    table = (
        "<table><tr><th>prototype</th><th>this</th><th>looks like those</th>"
        "<th>similarity</th><th>weight</th><th>contribution</th></tr>"
        + "".join(row_sections)
        + "</table>"
        if row_sections
        else "<p class='muted'>no active prototypes (fully pruned model)</p>"
    )
    body_parts.append(table)
    totals = "".join(
        f"<tr><td>{manifest.classes[c]}</td><td>{t!r}</td><td>{p!r}</td></tr>"
        for c, (t, p) in enumerate(zip(sheet.class_totals, sheet.probabilities))
    )
    body_parts.append(
        "<h2>Class totals</h2><table><tr><th>class</th><th>logit</th><th>probability</th></tr>"
        + totals
        + "</table>"
    )
    (out_dir / "index.html").write_text(
        _PAGE.format(title=f"Evidence scoresheet for {sheet.image_id}", body="\n".join(body_parts))
    )
    (out_dir / "sidecar.txt").write_text(format_sidecar(sidecar))
    return out_dir / "index.html"


def default_cache_dir() -> Path | None:
    value = os.environ.get(CACHE_ENV_VAR)
    return Path(value) if value else None
