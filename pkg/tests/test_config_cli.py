"""Config schema and CLI tests: validation, overrides, presets, exit codes."""

import json

import pytest
import torch

from protoconcepts.cli import build_parser, main
from protoconcepts.config import (
    ConfigError,
    SCHEMA,
    config_help_text,
    default_config,
    dump_config,
    list_presets,
    load_config,
    resolve_config_path,
)
from protoconcepts.sidecar import parse_sidecar


class TestConfigSchema:
    def test_presets_ship_and_parse(self):
        names = list_presets()
        assert {"synthetic-small", "protopnet-concepts-cub", "protopool-concepts-cub", "tesnet-concepts-cub"} <= set(names)
        for name in names:
            cfg = load_config(resolve_config_path(name))
            assert cfg.get("model", "num_classes") >= 2

    def test_reference_preset_values(self):
        pnet = load_config(resolve_config_path("protopnet-concepts-cub"))
        assert pnet.get("geometry", "radius_init") == 7.5
        assert pnet.get("losses", "k") == 10
        assert pnet.get("losses", "w_rad") == 0.01
        pool = load_config(resolve_config_path("protopool-concepts-cub"))
        assert pool.get("geometry", "radius_init") == 4.5
        assert pool.get("losses", "w_rad") == 3e-3
        tes = load_config(resolve_config_path("tesnet-concepts-cub"))
        assert tes.get("geometry", "kind") == "cosine"
        assert tes.get("geometry", "radius_init") == 8.05
        assert tes.get("losses", "k") == 3
        assert tes.get("losses", "w_sep") == -0.2
        assert tes.get("losses", "w_rad") == 3e-5
        assert tes.get("losses", "w_subspace_sep") == 3e-5
        assert tes.get("losses", "w_orthogonality") == 5e-3

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[model]\nbackbone = tiny3\nmystery_knob = 3\n")
        with pytest.raises(ConfigError, match="unknown key model.mystery_knob"):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[experimental]\nx = 1\n")
        with pytest.raises(ConfigError, match="unknown section"):
            load_config(path)

    def test_type_errors_are_reported_with_the_key(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[losses]\nk = not_an_int\n")
        with pytest.raises(ConfigError, match="losses.k"):
            load_config(path)

    def test_choice_constraint(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[geometry]\nkind = hyperbolic\n")
        with pytest.raises(ConfigError, match="kind"):
            load_config(path)

    def test_overrides_are_typed_and_validated(self):
        cfg = default_config()
        assert cfg.with_overrides(["losses.k=5"]).get("losses", "k") == 5
        with pytest.raises(ConfigError, match="unknown config key"):
            cfg.with_overrides(["losses.magic=1"])
        with pytest.raises(ConfigError, match="cannot parse"):
            cfg.with_overrides(["losses.k=five"])
        with pytest.raises(ConfigError, match="constraint"):
            cfg.with_overrides(["losses.k=0"])

    def test_shared_mode_requires_assignment_file(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[model]\nassignment = shared\n")
        with pytest.raises(ConfigError, match="assignment_file"):
            load_config(path)

    def test_help_documents_every_key(self):
        text = config_help_text()
        for section, keys in SCHEMA.items():
            assert f"[{section}]" in text
            for key in keys:
                assert key in text

    def test_dump_round_trips(self, tmp_path):
        cfg = default_config().with_overrides(["losses.k=7", "geometry.radius_init=2.5"])
        path = tmp_path / "dumped.cfg"
        path.write_text(dump_config(cfg))
        reloaded = load_config(path)
        assert reloaded.values == cfg.values

    def test_missing_config_resolution(self):
        with pytest.raises(ConfigError, match="config not found"):
            resolve_config_path("missing.cfg")


@pytest.fixture
def cli_cfg_file(tiny_dataset, tmp_path):
    cfg = default_config().with_overrides(
        [
            f"data.root={tiny_dataset.root}",
            "data.batch_size=8",
            "data.synthetic=true",
            "model.resolution=32",
            "model.latent_dim=16",
            "model.prototypes_per_class=2",
            "geometry.radius_init=0.8",
            "losses.k=2",
            "schedule.warmup.epochs=1",
            "schedule.joint.epochs=1",
            "schedule.finetune.epochs=1",
        ]
    )
    path = tmp_path / "tiny.cfg"
    path.write_text(dump_config(cfg))
    return path


class TestCliExitCodes:
    def test_missing_config_exits_2(self, capsys):
        code = main(["train", "--config", "missing.cfg"])
        assert code == 2
        assert "config not found" in capsys.readouterr().err

    def test_usage_error_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["ablate", "--config", "x"])  # missing required --axis/--values
        assert exc.value.code == 2

    def test_help_lists_config_keys(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for section in SCHEMA:
            assert f"[{section}]" in out

    def test_bad_override_exits_2(self, cli_cfg_file, capsys):
        code = main(["train", "--config", str(cli_cfg_file), "--set", "losses.bogus=1"])
        assert code == 2


class TestCliPipeline:
    def test_train_prune_finetune_eval_explain(self, cli_cfg_file, tiny_dataset, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", str(cli_cfg_file), "--out", str(out)]) == 0
        assert (out / "joint.ckpt").is_file()
        assert "accuracy.before_prune" in capsys.readouterr().out

        assert main(["prune", "--config", str(cli_cfg_file), "--out", str(out)]) == 0
        assert (out / "pruned.ckpt").is_file()
        metrics = parse_sidecar(out / "metrics.txt")
        assert "prototypes.surviving" in metrics
        assert "warmup.epoch000.loss.total" in metrics  # merged, not overwritten

        assert main(["finetune", "--config", str(cli_cfg_file), "--out", str(out)]) == 0
        assert (out / "final.ckpt").is_file()
        metrics = parse_sidecar(out / "metrics.txt")
        assert "accuracy.after_finetune" in metrics

        assert main([
            "eval", "--config", str(cli_cfg_file), "--checkpoint", str(out / "final.ckpt"),
            "--split", "test", "--out", str(out),
        ]) == 0
        eval_side = parse_sidecar(out / "eval_test.txt")
        assert 0.0 <= float(eval_side["accuracy"]) <= 1.0

        report_dir = tmp_path / "explain"
        assert main([
            "explain", "--config", str(cli_cfg_file), "--checkpoint", str(out / "final.ckpt"),
            "--split", "test", "--limit", "2", "--out", str(report_dir),
        ]) == 0
        sheets = sorted(report_dir.iterdir())
        assert len(sheets) == 2
        for sheet_dir in sheets:
            assert (sheet_dir / "index.html").is_file()
            assert (sheet_dir / "sidecar.txt").is_file()

    def test_finetune_warns_on_unpruned_checkpoint(self, cli_cfg_file, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(cli_cfg_file), "--out", str(out)]) == 0
        with pytest.warns(RuntimeWarning, match="never pruned"):
            code = main([
                "finetune", "--config", str(cli_cfg_file), "--out", str(out),
                "--checkpoint", str(out / "joint.ckpt"),
            ])
        assert code == 0

    def test_eval_rejects_mismatched_config(self, cli_cfg_file, tiny_dataset, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", str(cli_cfg_file), "--out", str(out)]) == 0
        code = main([
            "eval", "--config", str(cli_cfg_file), "--set", "geometry.kind=cosine",
            "--checkpoint", str(out / "joint.ckpt"), "--out", str(out),
        ])
        assert code == 2
        assert "does not match config" in capsys.readouterr().err

    def test_scan_members_sidecar(self, cli_cfg_file, tmp_path):
        out = tmp_path / "run"
        assert main(["train", "--config", str(cli_cfg_file), "--out", str(out)]) == 0
        scan_dir = tmp_path / "scan"
        assert main([
            "scan-members", "--config", str(cli_cfg_file),
            "--checkpoint", str(out / "joint.ckpt"), "--out", str(scan_dir),
        ]) == 0
        side = parse_sidecar(scan_dir / "sidecar.txt")
        assert "prototypes.with_members" in side
        members = json.loads((scan_dir / "members.json").read_text())
        assert set(members) == {str(j) for j in range(8)}

    def test_synth_data_command(self, cli_cfg_file, tmp_path, capsys):
        target = tmp_path / "generated"
        code = main([
            "synth-data", "--config", str(cli_cfg_file), "--out", str(target),
            "--set", "data.synthetic_train_per_class=2", "--set", "data.synthetic_test_per_class=1",
        ])
        assert code == 0
        assert (target / "train").is_dir()
        assert (target / "masks" / "train").is_dir()
        assert "generated 8 train / 4 test images" in capsys.readouterr().out

    def test_identical_seeds_reproduce_identical_sidecars(self, cli_cfg_file, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["train", "--config", str(cli_cfg_file), "--out", str(out1), "--seed", "9"]) == 0
        assert main(["train", "--config", str(cli_cfg_file), "--out", str(out2), "--seed", "9"]) == 0
        assert (out1 / "metrics.txt").read_bytes() == (out2 / "metrics.txt").read_bytes()
