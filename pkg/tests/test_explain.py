"""Explain tests: member scans, bounding boxes, galleries, scoresheets, reports."""

import hashlib
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from protoconcepts.data import load_split_tensors
from protoconcepts.explain import (
    ConceptGallery,
    MemberPatch,
    Scoresheet,
    build_all_galleries,
    build_gallery,
    concept_purity,
    extract_bbox,
    local_explanation,
    render_report,
    scan_members,
)
from protoconcepts.geometry import SimilarityMap
from protoconcepts.sidecar import parse_sidecar


def plant_ball_on_patches(net, images, ball_index=0, radius=0.05, cells=((0, 0),)):
    """Point one ball at chosen latent cells of images[0]; exile the others."""

    with torch.no_grad():
        grids = net.latent_grids(images[:1])
        net.centers.add_(5.0)
        net.centers[ball_index] = grids[0][cells[0]]
        net.radius_param.fill_(1e-6)
        net.radius_param[ball_index] = radius
    return net


def reference_bilinear_upsample(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain pixel-center bilinear interpolation, written out longhand."""

    in_h, in_w = arr.shape
    out = np.zeros((out_h, out_w), dtype=np.float64)
    for i in range(out_h):
        for j in range(out_w):
            y = (i + 0.5) * in_h / out_h - 0.5
            x = (j + 0.5) * in_w / out_w - 0.5
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            dy, dx = y - y0, x - x0
            y0c, y1c = np.clip([y0, y0 + 1], 0, in_h - 1)
            x0c, x1c = np.clip([x0, x0 + 1], 0, in_w - 1)
            out[i, j] = (
                arr[y0c, x0c] * (1 - dy) * (1 - dx)
                + arr[y0c, x1c] * (1 - dy) * dx
                + arr[y1c, x0c] * dy * (1 - dx)
                + arr[y1c, x1c] * dy * dx
            )
    return out


class TestExtractBbox:
    def test_constant_map_covers_the_whole_image(self):
        bbox = extract_bbox(SimilarityMap(values=torch.full((4, 4), 0.3)), (64, 64))
        assert bbox == (0, 0, 64, 64)

    def test_single_peak_matches_reference_upsampling(self):
        values = torch.zeros(4, 4)
        values[1, 2] = 5.0
        bbox = extract_bbox(SimilarityMap(values=values), (32, 32))
        up = reference_bilinear_upsample(values.numpy().astype(np.float64), 32, 32)
        thresh = np.percentile(up, 95.0)
        mask = up >= thresh
        rows, cols = np.any(mask, axis=1), np.any(mask, axis=0)
        expected = (
            int(np.argmax(cols)),
            int(np.argmax(rows)),
            int(len(cols) - np.argmax(cols[::-1])),
            int(len(rows) - np.argmax(rows[::-1])),
        )
        assert bbox == expected
        # the peak cell's pixel footprint is inside the box
        assert bbox[0] <= 16 and bbox[2] >= 24 and bbox[1] <= 8 and bbox[3] >= 16

    def test_boxes_stay_within_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            values = torch.tensor(rng.normal(size=(5, 7)))
            left, top, right, bottom = extract_bbox(SimilarityMap(values=values), (40, 56))
            assert 0 <= left < right <= 56
            assert 0 <= top < bottom <= 40

    def test_empty_map_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            extract_bbox(SimilarityMap(values=torch.empty(0, 0)), (8, 8))


class TestScanMembers:
    def test_planted_ball_finds_exactly_its_cells(self, tiny_net_factory, tiny_dataset):
        net = tiny_net_factory()
        images, _ = load_split_tensors(tiny_dataset, "train")
        plant_ball_on_patches(net, images, radius=1e-8)
        members = scan_members(net, tiny_dataset, batch_size=8)
        assert len(members[0]) >= 1
        first = members[0][0]
        assert first.image_id == tiny_dataset.records("train")[0].image_id
        assert (first.row, first.col) == (0, 0)
        for j in range(1, net.num_prototypes):
            assert members[j] == []

    def test_members_sit_on_the_similarity_plateau(self, tiny_net_factory, tiny_dataset):
        net = tiny_net_factory()
        images, _ = load_split_tensors(tiny_dataset, "train")
        plant_ball_on_patches(net, images, radius=0.3)
        members = scan_members(net, tiny_dataset, batch_size=8)
        values = {m.similarity for m in members[0]}
        assert len(values) == 1  # identical clamped similarity, bit for bit

    def test_cache_round_trip(self, tiny_net_factory, tiny_dataset, tmp_path):
        net = tiny_net_factory()
        images, _ = load_split_tensors(tiny_dataset, "train")
        plant_ball_on_patches(net, images, radius=0.3)
        first = scan_members(net, tiny_dataset, batch_size=8, cache_dir=tmp_path)
        cached = scan_members(net, tiny_dataset, batch_size=8, cache_dir=tmp_path)
        assert list(tmp_path.glob("members_*.json"))
        assert cached == first


class TestBuildGallery:
    def _member(self, image_id, distance, row=0):
        return MemberPatch(
            image_id=image_id, row=row, col=0, similarity=1.0,
            center_distance=distance, bbox=(0, 0, 8, 8), class_id=0, class_name="a",
        )

    def test_ranks_by_center_distance_and_truncates(self):
        members = [self._member(f"img{i}", d) for i, d in enumerate([0.5, 0.1, 0.9, 0.3, 0.7])]
        gallery = build_gallery(members, top_n=3)
        assert [m.image_id for m in gallery.members] == ["img1", "img3", "img0"]

    def test_deduplicates_per_image_keeping_closest(self):
        members = [self._member("same", 0.8, row=1), self._member("same", 0.2, row=2), self._member("other", 0.5)]
        gallery = build_gallery(members, top_n=5)
        assert len(gallery.members) == 2
        kept = {m.image_id: m for m in gallery.members}
        assert kept["same"].center_distance == 0.2

    def test_top_n_larger_than_members_keeps_all(self):
        members = [self._member(f"img{i}", 0.1 * i) for i in range(3)]
        assert len(build_gallery(members, top_n=10).members) == 3

    def test_empty_member_list_gives_empty_gallery(self):
        assert build_gallery([], top_n=3).members == []

    def test_top_n_must_be_positive(self):
        with pytest.raises(ValueError, match="top_n"):
            build_gallery([], top_n=0)


class TestConceptPurity:
    def test_planted_ball_members_are_pure(self, tiny_net_factory, tiny_dataset):
        net = tiny_net_factory()
        images, _ = load_split_tensors(tiny_dataset, "train")
        plant_ball_on_patches(net, images, radius=0.5)
        members = scan_members(net, tiny_dataset, batch_size=8)
        purity = concept_purity(net, members, tiny_dataset)
        assert set(purity) <= set(range(net.num_prototypes))
        for value in purity.values():
            assert 0.0 < value <= 1.0


class TestLocalExplanation:
    def test_totals_match_logits(self, tiny_net_factory, tiny_dataset):
        net = tiny_net_factory(seed=4)
        images, _ = load_split_tensors(tiny_dataset, "test")
        sheet = local_explanation(net, images[0], "test/img", galleries=None, top_p=3)
        with torch.no_grad():
            logits = net(images[:1]).logits[0]
        for c in range(net.num_classes):
            assert sheet.class_totals[c] == pytest.approx(float(logits[c]), abs=1e-5)
        assert len(sheet.rows) == 3
        assert sheet.predicted_class == int(logits.argmax())

    def test_rows_sorted_by_contribution(self, tiny_net_factory, tiny_dataset):
        net = tiny_net_factory(seed=4)
        images, _ = load_split_tensors(tiny_dataset, "test")
        sheet = local_explanation(net, images[0], "x", galleries=None, top_p=5)
        contribs = [r.contribution for r in sheet.rows]
        assert contribs == sorted(contribs, reverse=True)

    def test_fully_masked_net_gives_empty_sheet_and_uniform_prediction(self, tiny_net_factory, tiny_dataset):
        net = tiny_net_factory()
        with torch.no_grad():
            net.evidence.prune_mask.zero_()
        images, _ = load_split_tensors(tiny_dataset, "test")
        sheet = local_explanation(net, images[0], "x", galleries=None, top_p=3)
        assert sheet.rows == []
        np.testing.assert_allclose(sheet.probabilities, 0.25, atol=1e-6)


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(path.relative_to(root).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()


class TestRenderReport:
    @pytest.fixture
    def scanned(self, tiny_net_factory, tiny_dataset):
        net = tiny_net_factory()
        images, _ = load_split_tensors(tiny_dataset, "train")
        plant_ball_on_patches(net, images, radius=0.5)
        members = scan_members(net, tiny_dataset, batch_size=8)
        galleries = build_all_galleries(net, members, top_n=3)
        return net, members, galleries

    def test_gallery_report_layout_and_sections(self, scanned, tiny_dataset, tmp_path):
        net, _, galleries = scanned
        out = tmp_path / "report"
        index = render_report(list(galleries.values()), tiny_dataset, out, net=net)
        assert index == out / "index.html"
        assert (out / "sidecar.txt").is_file()
        html = index.read_text()
        for j in range(net.num_prototypes):
            assert f"Prototype {j}" in html
        if galleries[0].members:
            assert (out / "prototypes" / "0000" / "member_00.png").is_file()

    def test_rendering_is_idempotent(self, scanned, tiny_dataset, tmp_path):
        net, _, galleries = scanned
        out = tmp_path / "report"
        render_report(list(galleries.values()), tiny_dataset, out, net=net)
        first = tree_digest(out)
        render_report(list(galleries.values()), tiny_dataset, out, net=net)
        assert tree_digest(out) == first

    def test_sidecar_round_trips_exact_values(self, scanned, tiny_dataset, tmp_path):
        net, _, galleries = scanned
        out = tmp_path / "report"
        render_report(list(galleries.values()), tiny_dataset, out, net=net)
        parsed = parse_sidecar(out / "sidecar.txt")
        for gallery in galleries.values():
            for rank, m in enumerate(gallery.members):
                key = f"prototype.{gallery.prototype_id}.member.{rank}.center_distance"
                assert float(parsed[key]) == m.center_distance

    def test_tampered_gallery_fails_verification(self, scanned, tiny_dataset, tmp_path):
        net, _, galleries = scanned
        source = next(g for g in galleries.values() if g.members)
        # ball 1 was exiled far from the data with a floor radius: nothing is inside it
        bad = MemberPatch(
            image_id=source.members[0].image_id, row=3, col=3, similarity=0.0,
            center_distance=99.0, bbox=(0, 0, 8, 8), class_id=0, class_name="a",
        )
        tampered = ConceptGallery(prototype_id=1, members=[bad])
        with pytest.raises(ValueError, match="not a member"):
            render_report([tampered], tiny_dataset, tmp_path / "r", net=net)

    def test_scoresheet_report(self, scanned, tiny_dataset, tmp_path):
        net, _, galleries = scanned
        images, _ = load_split_tensors(tiny_dataset, "test")
        record = tiny_dataset.records("test")[0]
        sheet = local_explanation(net, images[0], record.image_id, galleries, top_p=2)
        out = tmp_path / "sheet"
        render_report(sheet, tiny_dataset, out, net=net)
        parsed = parse_sidecar(out / "sidecar.txt")
        assert parsed["report.kind"] == "scoresheet"
        assert int(parsed["predicted_class"]) == sheet.predicted_class
        for c in range(net.num_classes):
            assert float(parsed[f"class.{c}.total"]) == sheet.class_totals[c]
        assert (out / "test_image.png").is_file()
