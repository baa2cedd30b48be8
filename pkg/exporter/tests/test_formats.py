"""The written bytes must parse exactly in the few-shot engine."""

import numpy as np
import pytest

from fewshot_attention.data_io import read_features, read_head, read_manifest

from feature_exporter.formats import (
    write_feature_file,
    write_head_file,
    write_manifest,
)


def test_feature_file_round_trips_through_engine(tmp_path, rng=np.random.default_rng(3)):
    tensors = rng.standard_normal((4, 2, 3, 5)).astype(np.float32)  # (n, h, w, d)
    path = tmp_path / "probe.fvt"
    write_feature_file(path, tensors, labels=[9, 8, 7, 6])
    dims, examples = read_features(path)
    assert dims == (3, 2, 5)
    assert [label for _, label in examples] == [9, 8, 7, 6]
    for i, (feat, _) in enumerate(examples):
        assert feat.data.tobytes() == tensors[i].reshape(6, 5).tobytes()


def test_location_major_layout(tmp_path):
    # channel index fastest, location q = row * w + col
    tensor = np.arange(2 * 3 * 4, dtype=np.float32).reshape(1, 2, 3, 4)
    path = tmp_path / "layout.fvt"
    write_feature_file(path, tensor, labels=[0])
    _, examples = read_features(path)
    feat = examples[0][0]
    np.testing.assert_array_equal(feat.data[1], [4.0, 5.0, 6.0, 7.0])  # row 0, col 1
    np.testing.assert_array_equal(feat.data[3], [12.0, 13.0, 14.0, 15.0])  # row 1, col 0


def test_head_file_round_trips_through_engine(tmp_path):
    rng = np.random.default_rng(8)
    weights = rng.standard_normal((6, 4)).astype(np.float32)  # (c, d)
    biases = rng.standard_normal(6).astype(np.float32)
    names = [f"place_{j}" for j in range(6)]
    path = tmp_path / "head.fhd"
    write_head_file(path, weights, biases, names)
    head = read_head(path)
    assert head.num_classes == 6 and head.d == 4
    np.testing.assert_array_equal(head.weights, weights.T.astype(np.float64))
    np.testing.assert_array_equal(head.biases, biases.astype(np.float64))
    assert head.class_names == tuple(names)


def test_single_class_head_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_head_file(tmp_path / "bad.fhd", np.ones((1, 4)), np.ones(1), ["x"])


def test_manifest_round_trips_through_engine(tmp_path):
    write_feature_file(tmp_path / "a.fvt",
                       np.zeros((2, 1, 1, 3), dtype=np.float32), [0, 0])
    write_manifest(tmp_path / "manifest.json", [("a", "novel", "a.fvt", 2)])
    manifest = read_manifest(tmp_path / "manifest.json")
    assert manifest.classes[0].name == "a"
    assert manifest.split_classes("novel")[0].count == 2
