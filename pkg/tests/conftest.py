from __future__ import annotations

import numpy as np
import pytest

from fewshot_attention.attention import FeatureTensor
from fewshot_attention.data_io import (
    DatasetManifest,
    SyntheticSpec,
    generate_synthetic,
    read_features,
    write_features,
    write_manifest,
)


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)


def random_tensor(rng, w=2, h=2, d=4) -> FeatureTensor:
    return FeatureTensor(width=w, height=h, data=rng.standard_normal((w * h, d)))


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A small synthetic dataset shared by episode-level tests."""
    out = tmp_path_factory.mktemp("synth")
    spec = SyntheticSpec(
        classes=(3, 2, 8), examples_per_class=40, noise=0.3, seed=404
    )
    manifest = generate_synthetic(spec, out)
    return manifest, out


def shuffle_labels(manifest: DatasetManifest, out_dir, split="novel", seed=0):
    """Rewrite a split with example-to-class assignment randomly permuted.

    Pools every example of the split, permutes, and deals the same counts
    back out, so class labels carry no information about the features.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "features").mkdir(exist_ok=True)
    entries = manifest.split_classes(split)
    pool = []
    dims = None
    for entry in entries:
        dims, examples = read_features(entry.features)
        pool.extend(feat for feat, _ in examples)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    rows = []
    cursor = 0
    for entry in entries:
        chunk = [(pool[order[cursor + i]], 0) for i in range(entry.count)]
        cursor += entry.count
        rel = f"features/{entry.name}.fvt"
        write_features(out_dir / rel, dims, chunk)
        rows.append((entry.name, split, rel, entry.count))
    write_manifest(out_dir / "manifest.json", rows)
    from fewshot_attention.data_io import read_manifest

    return read_manifest(out_dir / "manifest.json")
