"""Model tests: forward contract, evidence layer, decomposition, checkpoints."""

import numpy as np
import pytest
import torch

from protoconcepts.geometry import Geometry, GeometryConfig
from protoconcepts.model import (
    AddOnLayers,
    BackboneAdapter,
    EvidenceLayer,
    ProtoConceptsNet,
    build_net,
    init_evidence_class_specific,
    init_evidence_shared,
    load_assignment_matrix,
    load_checkpoint,
    logit_decomposition,
    save_checkpoint,
)


@pytest.fixture
def small_net():
    torch.manual_seed(0)
    return build_net(num_classes=3, prototypes_per_class=2, latent_dim=16, resolution=32, radius_init=0.5)


class TestBackbone:
    def test_stride_eight_grid(self):
        adapter = BackboneAdapter.create("tiny3")
        assert adapter.output_grid(64) == (8, 8)
        assert adapter.output_grid(224) == (28, 28)

    def test_unknown_backbone_rejected(self):
        with pytest.raises(ValueError, match="unknown backbone"):
            BackboneAdapter.create("resnet50-inat")

    def test_features_are_finite(self):
        torch.manual_seed(1)
        adapter = BackboneAdapter.create("tiny3")
        out = adapter.module(torch.rand(2, 3, 64, 64))
        assert out.shape == (2, adapter.output_dim, 8, 8)
        assert torch.isfinite(out).all()


class TestAddOnLayers:
    def test_log_geometry_output_is_squashed(self):
        torch.manual_seed(2)
        addon = AddOnLayers(8, 4, squash=True)
        out = addon(torch.randn(2, 8, 5, 5) * 10)
        assert torch.all(out >= 0) and torch.all(out <= 1)

    def test_cosine_geometry_output_is_unsquashed(self):
        torch.manual_seed(3)
        addon = AddOnLayers(8, 4, squash=False)
        with torch.no_grad():
            out = addon(torch.randn(2, 8, 5, 5) * 10)
        assert float(out.min()) < 0 or float(out.max()) > 1


class TestEvidenceInit:
    def test_class_specific_counts(self):
        layer = init_evidence_class_specific(10, 200)
        assert layer.num_prototypes == 2000
        assert layer.assignment.sum(dim=0).unique().tolist() == [10]

    def test_two_class_weight_pattern(self):
        layer = init_evidence_class_specific(1, 2)
        assert layer.weight.detach().tolist() == [[1.0, -0.5], [-0.5, 1.0]]

    def test_synthetic_preset_size(self):
        layer = init_evidence_class_specific(2, 4)
        assert layer.num_prototypes == 8

    def test_shared_assignment_from_file(self, tmp_path):
        path = tmp_path / "assign.json"
        path.write_text('{"num_classes": 3, "assignments": [[0, 1], [2], [0, 2]]}')
        matrix = load_assignment_matrix(path)
        layer = init_evidence_shared(matrix)
        assert layer.num_prototypes == 3
        assert layer.assignment[0].tolist() == [True, True, False]
        assert float(layer.weight[1, 2]) == 1.0
        assert float(layer.weight[1, 0]) == -0.5

    def test_shared_assignment_requires_covering_all_classes(self, tmp_path):
        path = tmp_path / "assign.json"
        path.write_text('{"num_classes": 3, "assignments": [[0], [1]]}')
        with pytest.raises(ValueError, match="at least one prototype"):
            init_evidence_shared(load_assignment_matrix(path))

    def test_invalid_class_id_rejected(self, tmp_path):
        path = tmp_path / "assign.json"
        path.write_text('{"num_classes": 2, "assignments": [[0], [5]]}')
        with pytest.raises(ValueError, match="invalid class"):
            load_assignment_matrix(path)


class TestForward:
    def test_shapes_and_structure(self, small_net):
        out = small_net(torch.rand(4, 3, 32, 32))
        assert out.logits.shape == (4, 3)
        assert out.similarities.shape == (4, 6)
        assert out.maps.shape == (4, 6, 4, 4)

    def test_identity_evidence_passes_similarity_through(self):
        torch.manual_seed(4)
        net = build_net(num_classes=2, prototypes_per_class=1, latent_dim=8, resolution=32)
        with torch.no_grad():
            net.evidence.weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
        out = net(torch.rand(1, 3, 32, 32))
        assert float(out.logits[0, 0]) == pytest.approx(float(out.similarities[0, 0]), abs=1e-6)

    def test_all_masked_prototypes_give_uniform_softmax(self, small_net):
        with torch.no_grad():
            small_net.evidence.prune_mask.zero_()
        probs = small_net.predict_proba(torch.rand(2, 3, 32, 32))
        np.testing.assert_allclose(probs.numpy(), 1.0 / 3.0, atol=1e-7)

    def test_resolution_mismatch_rejected_before_compute(self, small_net):
        with pytest.raises(ValueError, match="resolution mismatch"):
            small_net(torch.rand(1, 3, 64, 64))

    def test_softmax_rows_sum_to_one(self, small_net):
        probs = small_net.predict_proba(torch.rand(5, 3, 32, 32))
        np.testing.assert_allclose(probs.sum(dim=1).numpy(), 1.0, atol=1e-6)

    def test_prototype_permutation_leaves_logits_bit_identical(self, small_net):
        torch.manual_seed(5)
        images = torch.rand(3, 3, 32, 32)
        base = small_net(images).logits
        perm = torch.randperm(small_net.num_prototypes)
        with torch.no_grad():
            small_net.centers.copy_(small_net.centers[perm])
            small_net.radius_param.copy_(small_net.radius_param[perm])
            small_net.evidence.weight.copy_(small_net.evidence.weight[perm])
            small_net.evidence.prune_mask.copy_(small_net.evidence.prune_mask[perm])
            small_net.evidence.assignment.copy_(small_net.evidence.assignment[perm])
        permuted = small_net(images).logits
        assert torch.equal(base, permuted)

    def test_vanishing_radii_recover_pointlike_forward(self):
        """With radii at the floor, the ball forward matches a plain unclamped
        log-activation forward over the same centers and weights."""

        torch.manual_seed(6)
        net = build_net(num_classes=2, prototypes_per_class=2, latent_dim=8, resolution=32, radius_init=1e-6)
        images = torch.rand(3, 3, 32, 32)
        out = net(images)
        with torch.no_grad():
            grids = net.latent_grids(images)
            flat = grids.reshape(3, -1, 8)
            d2 = ((flat.unsqueeze(2) - net.centers.reshape(1, 1, 4, 8)) ** 2).sum(-1)
            plain = torch.log((d2 + 1.0) / (d2 + net.geo_cfg.epsilon))
            sims = plain.max(dim=1).values
            logits = (sims * net.evidence.prune_mask) @ net.evidence.weight
        torch.testing.assert_close(out.similarities, sims, atol=1e-5, rtol=0)
        torch.testing.assert_close(out.logits, logits, atol=1e-5, rtol=0)


class TestLogitDecomposition:
    def test_contributions_sum_to_logits(self, small_net):
        image = torch.rand(3, 32, 32)
        decomp = logit_decomposition(small_net, image)
        for c in range(3):
            assert decomp.class_total(c) == pytest.approx(float(decomp.logits[c]), abs=1e-5)

    def test_masked_prototype_contributes_zero(self, small_net):
        with torch.no_grad():
            small_net.evidence.prune_mask[0] = 0.0
        decomp = logit_decomposition(small_net, torch.rand(3, 32, 32))
        for c in range(3):
            assert decomp.rows[c][0].contribution == 0.0
        assert decomp.rows[0][0].similarity != 0.0

    def test_single_prototype_contribution_is_product(self):
        torch.manual_seed(7)
        net = build_net(num_classes=2, prototypes_per_class=1, latent_dim=8, resolution=32)
        decomp = logit_decomposition(net, torch.rand(3, 32, 32))
        row = decomp.rows[0][0]
        assert row.contribution == pytest.approx(row.similarity * row.weight, abs=1e-7)


class TestCheckpoint:
    def test_round_trip_reproduces_forward_bit_exactly(self, small_net, tmp_path):
        images = torch.rand(2, 3, 32, 32)
        before = small_net(images)
        path = save_checkpoint(small_net, tmp_path / "net.ckpt", {"stage": "test", "note": "x"})
        loaded, meta = load_checkpoint(path)
        after = loaded(images)
        assert torch.equal(before.logits, after.logits)
        assert torch.equal(before.similarities, after.similarities)
        assert torch.equal(before.maps, after.maps)
        assert meta["stage"] == "test"

    def test_prune_mask_survives_round_trip(self, small_net, tmp_path):
        with torch.no_grad():
            small_net.evidence.prune_mask[2] = 0.0
        path = save_checkpoint(small_net, tmp_path / "net.ckpt")
        loaded, _ = load_checkpoint(path)
        assert loaded.evidence.prune_mask.tolist() == small_net.evidence.prune_mask.tolist()

    def test_version_check(self, small_net, tmp_path):
        path = save_checkpoint(small_net, tmp_path / "net.ckpt")
        payload = torch.load(path, weights_only=True)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)


class TestBuildNet:
    def test_cosine_radius_above_pi_warns(self):
        with pytest.warns(RuntimeWarning, match="exceeds pi"):
            build_net(num_classes=2, prototypes_per_class=1, latent_dim=8, resolution=32,
                      geometry=Geometry.COSINE, radius_init=8.05)

    def test_log_centers_start_in_unit_box(self):
        torch.manual_seed(8)
        net = build_net(num_classes=2, prototypes_per_class=3, latent_dim=8, resolution=32)
        assert float(net.centers.min()) >= 0.0
        assert float(net.centers.max()) <= 1.0

    def test_shared_assignment_class_count_checked(self):
        assignment = torch.ones(4, 3, dtype=torch.bool)
        with pytest.raises(ValueError, match="does not match num_classes"):
            build_net(num_classes=2, latent_dim=8, resolution=32, assignment=assignment)
