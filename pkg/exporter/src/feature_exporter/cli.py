"""Command-line entry: export features, the classifier head, or both."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .export import ExportError, ExportJob, export_all, export_features, export_head


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="feature-exporter",
        description="Dump frozen-backbone features and classifier head "
        "into FVT1/FHD1 files",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("features", "export per-image feature tensors and a manifest"),
        ("head", "export the final fully-connected layer"),
        ("all", "export features, head, and manifest"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--images", required=(name != "head"),
                       help="class-per-folder image root")
        p.add_argument("--out", required=True)
        p.add_argument("--model", default="resnet18")
        p.add_argument("--weights", help="checkpoint state dict (.pth)")
        p.add_argument("--num-classes", type=int, default=365)
        p.add_argument("--splits", help="JSON file mapping class name to split")
        p.add_argument("--size", type=int, default=224)
        p.add_argument("--no-normalize", action="store_true")
        p.add_argument("--crop-boxes",
                       help="JSON file mapping image path to crop box")
        p.add_argument("--on-error", choices=("abort", "skip"), default="abort")
        p.add_argument("--class-names", help="text file, one prior class per line")
        p.add_argument("--seed", type=int, default=0)
    return parser


def _job(args) -> ExportJob:
    split_map = {}
    if args.splits:
        split_map = json.loads(Path(args.splits).read_text())
    names: tuple[str, ...] = ()
    if args.class_names:
        names = tuple(
            line.strip()
            for line in Path(args.class_names).read_text().splitlines()
            if line.strip()
        )
    return ExportJob(
        image_root=Path(args.images) if args.images else Path("."),
        out_dir=Path(args.out),
        model=args.model,
        weights=Path(args.weights) if args.weights else None,
        num_classes=args.num_classes,
        split_map=split_map,
        image_size=args.size,
        normalize=not args.no_normalize,
        crop_boxes=Path(args.crop_boxes) if args.crop_boxes else None,
        on_error=args.on_error,
        class_names=names,
        seed=args.seed,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        job = _job(args)
        if args.command == "features":
            path = export_features(job)
            print(f"wrote manifest {path}")
        elif args.command == "head":
            path = export_head(job)
            print(f"wrote head {path}")
        else:
            manifest, head = export_all(job)
            print(f"wrote manifest {manifest} and head {head}")
        return 0
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
