from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from feature_exporter import ExportJob, export_all


def make_image_tree(root, rng, classes=5, per_class=12, prefix="bird"):
    for c in range(classes):
        folder = root / f"{prefix}_{c:02d}"
        folder.mkdir(parents=True)
        for i in range(per_class):
            w = int(rng.integers(40, 90))
            h = int(rng.integers(40, 90))
            arr = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
            Image.fromarray(arr).save(folder / f"img_{i:03d}.png")
    return root


@pytest.fixture(scope="session")
def image_tree(tmp_path_factory):
    rng = np.random.default_rng(5)
    return make_image_tree(tmp_path_factory.mktemp("images") / "tree", rng)


@pytest.fixture(scope="session")
def exported(image_tree, tmp_path_factory):
    """One full export shared across tests (random-init backbone, seeded)."""
    out = tmp_path_factory.mktemp("export")
    job = ExportJob(image_root=image_tree, out_dir=out, num_classes=365, seed=1)
    manifest, head = export_all(job)
    return job, manifest, head
