import re
import subprocess
import sys

import numpy as np
import pytest

from fewshot_attention.cli import main
from fewshot_attention.data_io import read_artifacts, read_features


def synth_args(out, classes="2,2,6", examples="40", seed="3"):
    return [
        "synth", "--classes", classes, "--examples", examples,
        "--seed", seed, "--out", str(out),
    ]


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(synth_args(out)) == 0
    return out


class TestSynth:
    def test_idempotent_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(synth_args(a)) == 0
        assert main(synth_args(b)) == 0
        for rel in ["manifest.json", "prior_head.fhd", "features/base_00.fvt"]:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_bad_flags_fail_before_writing(self, tmp_path):
        out = tmp_path / "never"
        assert main(synth_args(out, classes="2,2")) == 1
        assert not out.exists()


class TestAttend:
    def test_cache_reruns_identical(self, cli_dataset, tmp_path):
        maps_a = tmp_path / "maps_a"
        maps_b = tmp_path / "maps_b"
        for target in (maps_a, maps_b):
            code = main([
                "attend", "--manifest", str(cli_dataset / "manifest.json"),
                "--head", str(cli_dataset / "prior_head.fhd"),
                "--temp", "1.0", "--heatmaps", "1", "--out", str(target),
            ])
            assert code == 0
        name = "novel_00.attmap.fvt"
        assert (maps_a / name).read_bytes() == (maps_b / name).read_bytes()

    def test_cache_holds_unit_interval_maps(self, cli_dataset, tmp_path):
        maps = tmp_path / "maps"
        main([
            "attend", "--manifest", str(cli_dataset / "manifest.json"),
            "--head", str(cli_dataset / "prior_head.fhd"),
            "--temp", "1.0", "--out", str(maps),
        ])
        dims, examples = read_features(maps / "base_00.attmap.fvt")
        assert dims == (7, 7, 1)
        for feat, _ in examples:
            assert feat.data.min() >= 0.0 and feat.data.max() <= 1.0

    def test_heatmap_is_valid_pgm(self, cli_dataset, tmp_path):
        maps = tmp_path / "maps"
        main([
            "attend", "--manifest", str(cli_dataset / "manifest.json"),
            "--head", str(cli_dataset / "prior_head.fhd"),
            "--temp", "1.0", "--heatmaps", "1", "--out", str(maps),
        ])
        blob = (maps / "novel_00_0000.pgm").read_bytes()
        assert blob.startswith(b"P5\n7 7\n255\n")
        assert len(blob) == len(b"P5\n7 7\n255\n") + 49

    def test_empty_manifest_yields_empty_cache(self, cli_dataset, tmp_path):
        import json

        empty = tmp_path / "empty.json"
        empty.write_text(json.dumps({"version": 1, "classes": []}))
        out = tmp_path / "maps"
        code = main([
            "attend", "--manifest", str(empty),
            "--head", str(cli_dataset / "prior_head.fhd"),
            "--temp", "1.0", "--out", str(out),
        ])
        assert code == 0
        assert list(out.glob("*.fvt")) == []

    def test_temp_profile_names(self, cli_dataset, tmp_path):
        code = main([
            "attend", "--manifest", str(cli_dataset / "manifest.json"),
            "--head", str(cli_dataset / "prior_head.fhd"),
            "--temp", "cub", "--out", str(tmp_path / "m"),
        ])
        assert code == 0


class TestBaseTrain:
    def test_k_zero_saves_identity(self, cli_dataset, tmp_path):
        out = tmp_path / "art.bin"
        code = main([
            "base-train", "--manifest", str(cli_dataset / "manifest.json"),
            "--k", "0", "--out", str(out),
        ])
        assert code == 0
        adapter, head = read_artifacts(out)
        np.testing.assert_array_equal(adapter.matrix, np.eye(32))
        assert head is None

    def test_deterministic_artifacts(self, cli_dataset, tmp_path):
        outs = []
        for name in ("a.bin", "b.bin"):
            path = tmp_path / name
            main([
                "base-train", "--manifest", str(cli_dataset / "manifest.json"),
                "--k", "10", "--steps", "8", "--seed", "5", "--out", str(path),
            ])
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_loss_trend_downward(self, cli_dataset, tmp_path, capsys):
        code = main([
            "base-train", "--manifest", str(cli_dataset / "manifest.json"),
            "--k", "20", "--steps", "30", "--seed", "1",
            "--out", str(tmp_path / "t.bin"),
        ])
        assert code == 0
        text = capsys.readouterr().out
        match = re.search(r"loss ([\d.]+) -> ([\d.]+)", text)
        assert match and float(match.group(2)) < float(match.group(1))


class TestEval:
    def test_chance_level_and_format(self, cli_dataset, tmp_path, capsys):
        from tests.conftest import shuffle_labels
        from fewshot_attention.data_io import read_manifest

        manifest = read_manifest(cli_dataset / "manifest.json")
        shuffled_dir = tmp_path / "shuffled"
        shuffle_labels(manifest, shuffled_dir, seed=2)
        code = main([
            "eval", "--manifest", str(shuffled_dir / "manifest.json"),
            "--kprime", "1", "--queries", "15", "--tasks", "200",
            "--seed", "0", "--out", str(tmp_path / "cells.jsonl"),
        ])
        assert code == 0
        text = capsys.readouterr().out
        cell = re.search(r"(\d+\.\d{2}) ± (\d+\.\d{2})", text)
        assert cell, text
        mean, ci = float(cell.group(1)), float(cell.group(2))
        assert abs(mean - 20.0) <= max(3 * ci, 1.0)
        records = (tmp_path / "cells.jsonl").read_text().strip().splitlines()
        assert len(records) == 1

    def test_attention_without_head_fails_fast(self, cli_dataset):
        code = main([
            "eval", "--manifest", str(cli_dataset / "manifest.json"),
            "--kprime", "1", "--tasks", "10", "--attention", "on",
        ])
        assert code == 1

    def test_missing_manifest_is_data_error(self, tmp_path):
        code = main([
            "eval", "--manifest", str(tmp_path / "nope.json"),
            "--kprime", "1", "--tasks", "10",
        ])
        assert code == 2

    def test_artifacts_conflicts_with_k(self, cli_dataset, tmp_path):
        art = tmp_path / "a.bin"
        main([
            "base-train", "--manifest", str(cli_dataset / "manifest.json"),
            "--k", "0", "--out", str(art),
        ])
        code = main([
            "eval", "--manifest", str(cli_dataset / "manifest.json"),
            "--artifacts", str(art), "--k", "1", "--kprime", "1",
            "--tasks", "10",
        ])
        assert code == 1

    def test_insufficient_queries_is_data_error(self, cli_dataset):
        code = main([
            "eval", "--manifest", str(cli_dataset / "manifest.json"),
            "--kprime", "1", "--queries", "40", "--tasks", "5",
        ])
        assert code == 2


class TestGradcheck:
    def test_default_dims_pass(self, capsys):
        assert main(["gradcheck", "--instances", "2"]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out and "max relative error" in out

    def test_perturbed_gradient_fails(self, capsys):
        assert main(["gradcheck", "--instances", "1", "--perturb", "0.01"]) == 1
        assert "FAIL" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    result = subprocess.run(
        [sys.executable, "-m", "fewshot_attention.cli",
         "synth", "--classes", "1,1,3", "--examples", "4",
         "--out", str(tmp_path / "d")],
        capture_output=True, text=True,
    )
    assert result.returncode == 0
    assert (tmp_path / "d" / "manifest.json").exists()
