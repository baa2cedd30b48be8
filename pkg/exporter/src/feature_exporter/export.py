"""Dump pre-pooling feature tensors and the final FC head of a frozen
classifier into FVT1/FHD1 files plus a manifest.

The backbone runs up to the last convolutional stage (after its final
activation), exactly the tensor global average pooling consumes in the
stock architecture, so GAP of the dumped features followed by the dumped
head reproduces the source model's own logits.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torchvision
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".webp"}

# standard channel statistics used by the torchvision model zoo
NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)

MODELS = {"resnet18": torchvision.models.resnet18}


class ExportError(RuntimeError):
    pass


@dataclass
class ExportJob:
    """Settings for one export run over a class-per-folder image tree."""

    image_root: Path
    out_dir: Path
    model: str = "resnet18"
    weights: Path | None = None
    num_classes: int = 365
    split_map: dict[str, str] = field(default_factory=dict)
    image_size: int = 224
    normalize: bool = True
    crop_boxes: Path | None = None
    on_error: str = "abort"
    class_names: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        self.image_root = Path(self.image_root)
        self.out_dir = Path(self.out_dir)
        if self.model not in MODELS:
            raise ExportError(f"unsupported model {self.model!r}")
        if self.on_error not in ("abort", "skip"):
            raise ExportError("on_error must be 'abort' or 'skip'")
        if self.image_size < 32:
            raise ExportError("image size too small for the backbone")


def load_model(job: ExportJob) -> torch.nn.Module:
    """Build the frozen classifier, from a checkpoint when given.

    Without a checkpoint the network is randomly initialized from
    ``job.seed``; that is only meaningful for pipeline tests, not for real
    feature quality.
    """
    torch.manual_seed(job.seed)
    model = MODELS[job.model](weights=None, num_classes=job.num_classes)
    if job.weights is not None:
        state = torch.load(job.weights, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        state = {k.removeprefix("module."): v for k, v in state.items()}
        model.load_state_dict(state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def feature_stage(model: torch.nn.Module) -> torch.nn.Module:
    """Everything up to (and including) the last conv stage, pre-pooling."""
    if not hasattr(model, "layer4"):
        raise ExportError("model has no conv trunk to dump")
    return torch.nn.Sequential(
        model.conv1, model.bn1, model.relu, model.maxpool,
        model.layer1, model.layer2, model.layer3, model.layer4,
    )


def _load_boxes(job: ExportJob) -> dict[str, tuple[float, float, float, float]]:
    if job.crop_boxes is None:
        return {}
    doc = json.loads(Path(job.crop_boxes).read_text())
    return {key: tuple(value) for key, value in doc.items()}


def preprocess(job: ExportJob, path: Path, boxes=None) -> torch.Tensor:
    """Decode, optionally crop to a bounding box, resize, normalize."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if boxes:
            rel = path.relative_to(job.image_root).as_posix()
            if rel in boxes:
                img = img.crop(boxes[rel])
        img = img.resize((job.image_size, job.image_size), Image.BILINEAR)
        array = np.asarray(img, dtype=np.float32) / 255.0
    tensor = torch.from_numpy(array).permute(2, 0, 1)
    if job.normalize:
        mean = torch.tensor(NORM_MEAN).view(3, 1, 1)
        std = torch.tensor(NORM_STD).view(3, 1, 1)
        tensor = (tensor - mean) / std
    return tensor


def list_classes(job: ExportJob) -> list[tuple[str, list[Path]]]:
    """Class folders and their image files, both in sorted order."""
    if not job.image_root.is_dir():
        raise ExportError(f"image root {job.image_root} is not a directory")
    classes = []
    for folder in sorted(p for p in job.image_root.iterdir() if p.is_dir()):
        images = sorted(
            p for p in folder.iterdir()
            if p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not images:
            raise ExportError(f"class folder {folder.name!r} has no images")
        classes.append((folder.name, images))
    if not classes:
        raise ExportError(f"no class folders under {job.image_root}")
    return classes


def export_features(job: ExportJob, batch_size: int = 8) -> Path:
    """One FVT1 file per class folder plus the manifest; returns its path."""
    from .formats import write_feature_file, write_manifest

    model = load_model(job)
    trunk = feature_stage(model)
    boxes = _load_boxes(job)
    classes = list_classes(job)
    (job.out_dir / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for label, (name, images) in enumerate(classes):
        tensors = []
        for path in images:
            try:
                tensors.append(preprocess(job, path, boxes))
            except (OSError, UnidentifiedImageError) as exc:
                if job.on_error == "abort":
                    raise ExportError(f"cannot decode {path}: {exc}") from exc
                log.warning("skipping %s: %s", path, exc)
        if not tensors:
            raise ExportError(f"class {name!r} has no decodable images")
        feats = []
        with torch.no_grad():
            for start in range(0, len(tensors), batch_size):
                chunk = torch.stack(tensors[start : start + batch_size])
                out = trunk(chunk)  # (b, d, h, w)
                feats.append(out.permute(0, 2, 3, 1).numpy())  # (b, h, w, d)
        stacked = np.concatenate(feats, axis=0)
        rel = Path("features") / f"{name}.fvt"
        write_feature_file(job.out_dir / rel, stacked, [label] * len(stacked))
        split = job.split_map.get(name, "novel")
        entries.append((name, split, rel.as_posix(), len(stacked)))
    manifest_path = job.out_dir / "manifest.json"
    write_manifest(manifest_path, entries)
    return manifest_path


def export_head(job: ExportJob) -> Path:
    """Dump the final fully-connected layer as an FHD1 file."""
    from .formats import write_head_file

    model = load_model(job)
    fc = getattr(model, "fc", None)
    if not isinstance(fc, torch.nn.Linear) or fc.bias is None:
        raise ExportError("model does not end in a single biased FC layer")
    weights = fc.weight.detach().numpy()  # (c, d)
    biases = fc.bias.detach().numpy()
    names = job.class_names or tuple(
        f"class_{j:03d}" for j in range(weights.shape[0])
    )
    if len(names) != weights.shape[0]:
        raise ExportError(
            f"{len(names)} class names for {weights.shape[0]} classes"
        )
    job.out_dir.mkdir(parents=True, exist_ok=True)
    head_path = job.out_dir / "prior_head.fhd"
    write_head_file(head_path, weights, biases, names)
    return head_path


def export_all(job: ExportJob, batch_size: int = 8) -> tuple[Path, Path]:
    manifest = export_features(job, batch_size=batch_size)
    head = export_head(job)
    return manifest, head
