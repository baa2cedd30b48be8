"""Command-line front door for batch experiments.

Subcommands: synth (generate a synthetic dataset), attend (precompute
attention caches and heatmaps), base-train (fit adapter + dense head),
eval (episodic evaluation grid), gradcheck (finite-difference harness).

Exit codes: 0 success, 1 validation error, 2 data error, 3 numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data_io, episodes, gradcheck
from .attention import TEMP_PROFILES, AttentionMap, FeatureTensor, heatmap_export
from .classify import TAU_INIT
from .errors import DataError, DivergenceError, ValidationError
from .train import Adapter, TrainConfig, base_train

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3


def _temp_value(text: str) -> float:
    if text in TEMP_PROFILES:
        return TEMP_PROFILES[text]
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"temperature must be a number or one of {sorted(TEMP_PROFILES)}"
        )
    return value


def _k_list(text: str) -> list[int | str]:
    values: list[int | str] = []
    for part in text.split(","):
        part = part.strip()
        if part == "all":
            values.append("all")
        else:
            values.append(int(part))
    return values


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",")]


def _onoff(text: str) -> list[bool]:
    table = {"on": [True], "off": [False], "both": [False, True]}
    if text not in table:
        raise argparse.ArgumentTypeError("expected on, off, or both")
    return table[text]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewshot-attention",
        description="Few-shot classification with certainty-based spatial attention",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic clutter dataset")
    p.add_argument("--classes", default="2,2,8", type=_int_list,
                   help="base,val,novel class counts")
    p.add_argument("--examples", type=int, default=40)
    p.add_argument("--width", type=int, default=7)
    p.add_argument("--height", type=int, default=7)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--fraction", type=float, default=0.25)
    p.add_argument("--separation", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--contrast", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("attend", help="precompute attention caches")
    p.add_argument("--manifest", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--temp", type=_temp_value, default="synthetic")
    p.add_argument("--heatmaps", type=int, default=0,
                   help="also export the first N maps per class as PGM")
    p.add_argument("--out", required=True)

    p = sub.add_parser("base-train", help="train adapter and dense head")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=_k_list, default=[1], help="examples per base class")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--optimizer", choices=("sgd_nesterov", "adam"),
                   default="sgd_nesterov")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="episodic evaluation grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--head")
    p.add_argument("--artifacts", help="trained adapter file; skips base training")
    p.add_argument("--temp", type=_temp_value, default="synthetic")
    p.add_argument("--tau", type=float, default=TAU_INIT)
    p.add_argument("--k", type=_k_list, default=[0])
    p.add_argument("--kprime", type=_int_list, default=[1])
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--queries", type=int, default=30)
    p.add_argument("--tasks", type=int, default=200)
    p.add_argument("--attention", type=_onoff, default=[False])
    p.add_argument("--adapt", type=_onoff, default=[False])
    p.add_argument("--lr", type=float, default=1e-3, help="base-training rate")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--steps", type=int, default=30, help="base-training steps")
    p.add_argument("--optimizer", choices=("sgd_nesterov", "adam"),
                   default="sgd_nesterov")
    p.add_argument("--adapt-lr", type=float, default=1e-4)
    p.add_argument("--adapt-steps", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="write JSONL cell records here")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--dims", default="1,4,2;4,4,3;9,16,5",
                   help="semicolon-separated r,d,c triples")
    p.add_argument("--instances", type=int, default=3, help="instances per triple")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb", type=float, default=0.0,
                   help="inject a relative error into the analytic gradients")
    return parser


def cmd_synth(args) -> int:
    if len(args.classes) != 3:
        raise ValidationError("--classes needs base,val,novel counts")
    spec = data_io.SyntheticSpec(
        classes=tuple(args.classes),
        examples_per_class=args.examples,
        width=args.width,
        height=args.height,
        channels=args.dim,
        signal_fraction=args.fraction,
        separation=args.separation,
        noise=args.noise,
        prior_contrast=args.contrast,
        seed=args.seed,
    )
    manifest = data_io.generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest.classes)} classes to {args.out}")
    return EXIT_OK


def cmd_attend(args) -> int:
    manifest = data_io.read_manifest(args.manifest)
    head = data_io.read_head(args.head)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store = episodes.FeatureStore(manifest)
    for entry in manifest.classes:
        _, examples = data_io.read_features(entry.features)
        raw, _ = store.class_maps(entry.name, head, args.temp)
        w, h, _ = store.dims(entry.name)
        records = [
            (FeatureTensor(width=w, height=h, data=raw[i][:, None].astype(np.float32)),
             label)
            for i, (_, label) in enumerate(examples)
        ]
        data_io.write_features(out / f"{entry.name}.attmap.fvt", (w, h, 1), records)
        for i in range(min(args.heatmaps, len(examples))):
            amap = AttentionMap(width=w, height=h, raw=raw[i])
            heatmap_export(amap, out / f"{entry.name}_{i:04d}.pgm")
    print(f"cached attention maps for {len(manifest.classes)} classes in {out}")
    return EXIT_OK


def cmd_base_train(args) -> int:
    if len(args.k) != 1:
        raise ValidationError("base-train takes a single --k value")
    k = args.k[0]
    manifest = data_io.read_manifest(args.manifest)
    config = TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        max_steps=args.steps,
        optimizer=args.optimizer,
        seed=args.seed,
    )
    store = episodes.FeatureStore(manifest)
    subset = episodes.sample_base_subset(
        manifest, None if k == "all" else int(k), args.seed
    )
    dataset = [(store.tensor(ref), y) for ref, y in subset]
    if dataset:
        d = dataset[0][0].d
    else:
        base = manifest.split_classes("base")
        if not base:
            raise DataError("manifest has no base classes")
        _, _, d = store.dims(base[0].name)
    result = base_train(
        dataset,
        Adapter.identity(d),
        config,
        num_classes=len(manifest.split_classes("base")) if dataset else None,
    )
    data_io.write_artifacts(args.out, result.adapter, result.head)
    if result.losses:
        print(
            f"trained {len(result.losses)} steps, "
            f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}"
        )
    else:
        print("no training steps run; identity adapter saved")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.artifacts and any(k != 0 for k in args.k):
        raise ValidationError("--artifacts replaces base training; use with --k 0")
    attention_options = args.attention
    adaptation_options = args.adapt
    if True in attention_options and not args.head:
        raise ValidationError("--attention on requires --head")
    manifest = data_io.read_manifest(args.manifest)
    prior_head = data_io.read_head(args.head) if args.head else None
    adapter = None
    if args.artifacts:
        adapter, _ = data_io.read_artifacts(args.artifacts)
    template = episodes.EvalConfig(
        ways=args.ways,
        shots=args.kprime[0],
        queries_per_class=args.queries,
        use_attention=False,
        use_adaptation=False,
        adapter=adapter,
        prior_head=prior_head,
        prior_temp=args.temp,
        tau=args.tau,
        adapt=TrainConfig(
            learning_rate=args.adapt_lr,
            max_steps=args.adapt_steps,
            optimizer="adam",
            seed=args.seed,
        ),
    )
    base_config = TrainConfig(
        learning_rate=args.lr,
        momentum=args.momentum,
        max_steps=args.steps,
        optimizer=args.optimizer,
        seed=args.seed,
    )
    reports = episodes.run_grid(
        manifest,
        args.k,
        args.kprime,
        attention_options,
        adaptation_options,
        base_config,
        template,
        n_tasks=args.tasks,
        seed=args.seed,
        threads=args.threads,
    )
    print(episodes.format_grid(reports))
    if args.out:
        with open(args.out, "w") as fh:
            for rep in reports:
                fh.write(json.dumps(rep.to_record()) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dims = []
    for triple in args.dims.split(";"):
        r, d, c = (int(x) for x in triple.split(","))
        dims.append((r, d, c))
    report = gradcheck.run_check(
        dims=tuple(dims),
        instances_per_dim=args.instances,
        seed=args.seed,
        perturb=args.perturb,
    )
    print(report.format())
    return EXIT_OK if report.passed else EXIT_VALIDATION


_COMMANDS = {
    "synth": cmd_synth,
    "attend": cmd_attend,
    "base-train": cmd_base_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
