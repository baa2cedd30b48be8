"""Bridge from a pretrained model zoo to the few-shot engine's file formats."""

from .export import (
    ExportError,
    ExportJob,
    export_all,
    export_features,
    export_head,
    feature_stage,
    load_model,
    preprocess,
)
from .formats import write_feature_file, write_head_file, write_manifest

__all__ = [
    "ExportError",
    "ExportJob",
    "export_all",
    "export_features",
    "export_head",
    "feature_stage",
    "load_model",
    "preprocess",
    "write_feature_file",
    "write_head_file",
    "write_manifest",
]
__version__ = "0.1.0"
