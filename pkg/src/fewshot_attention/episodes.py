"""Episode sampling and the episodic evaluation protocol.

Evaluation samples c'-way k'-shot tasks from a split, builds prototypes
from the support set (GwAP when attention is on, GAP otherwise),
optionally fine-tunes the adapter on the support set, classifies the
queries, and reports mean accuracy with a 95% confidence interval.

Per-task seeds are derived by combining the base seed with the task
index, so results do not depend on evaluation order or thread count.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .attention import (
    AttentionMap,
    FeatureTensor,
    PriorHead,
    certainty_weights,
    uniform_map,
)
from .classify import TAU_INIT, CosineHead, build_prototypes, classify_embeddings
from .data_io import DatasetManifest, read_features
from .errors import DivergenceError, InsufficientDataError, ValidationError
from .numerics import l1_normalize, mean_ci95
from .train import Adapter, TrainConfig, adapt_novel


@dataclass(frozen=True)
class ExampleRef:
    """One example: a class name plus its record index in the class file."""

    class_name: str
    index: int


@dataclass(frozen=True)
class Episode:
    """A c'-way k'-shot task: labeled support and query references."""

    support: tuple[tuple[ExampleRef, int], ...]
    queries: tuple[tuple[ExampleRef, int], ...]
    ways: int
    shots: int
    queries_per_class: int
    class_names: tuple[str, ...]


@dataclass(frozen=True)
class EvalReport:
    """Mean accuracy (percent) with CI over tasks, plus the config echo."""

    mean: float
    ci95: float
    n_tasks: int
    ways: int
    shots: int
    use_attention: bool
    use_adaptation: bool
    seed: int
    k: int | str | None = None

    def __post_init__(self):
        if not 0 <= self.mean <= 100:
            raise ValidationError("accuracy must lie in [0, 100]")

    def format(self) -> str:
        return f"{self.mean:.2f} ± {self.ci95:.2f}"

    def to_record(self) -> dict:
        return {
            "k": self.k,
            "kprime": self.shots,
            "ways": self.ways,
            "attention": self.use_attention,
            "adaptation": self.use_adaptation,
            "mean": self.mean,
            "ci95": self.ci95,
            "n_tasks": self.n_tasks,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class EvalConfig:
    """Pipeline settings for one evaluation run."""

    ways: int = 5
    shots: int = 1
    queries_per_class: int = 30
    use_attention: bool = False
    use_adaptation: bool = False
    adapter: Adapter | None = None
    prior_head: PriorHead | None = None
    prior_temp: float = 1.0
    tau: float = TAU_INIT
    adapt: TrainConfig | None = None
    split: str = "novel"

    def __post_init__(self):
        if min(self.ways, self.shots, self.queries_per_class) < 1:
            raise ValidationError("ways, shots and queries must be at least 1")
        if self.use_attention and self.prior_head is None:
            raise ValidationError("attention requires a prior head")
        if self.use_adaptation and self.adapt is None:
            raise ValidationError("adaptation requires a train config")


class FeatureStore:
    """Read-mostly cache of per-class feature stacks and attention maps.

    Population is locked so concurrent evaluation tasks see a consistent
    cache; evaluate() preloads everything before going parallel anyway.
    """

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._lock = threading.Lock()
        self._features: dict[str, np.ndarray] = {}
        self._dims: dict[str, tuple[int, int, int]] = {}
        self._maps: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def class_features(self, name: str) -> np.ndarray:
        """(n, r, d) float32 stack of one class's examples."""
        with self._lock:
            if name not in self._features:
                entry = self.manifest.class_named(name)
                dims, examples = read_features(entry.features)
                stack = np.stack([feat.data for feat, _ in examples], axis=0)
                self._features[name] = stack
                self._dims[name] = dims
            return self._features[name]

    def dims(self, name: str) -> tuple[int, int, int]:
        self.class_features(name)
        return self._dims[name]

    def tensor(self, ref: ExampleRef) -> FeatureTensor:
        stack = self.class_features(ref.class_name)
        w, h, _ = self._dims[ref.class_name]
        return FeatureTensor(width=w, height=h, data=stack[ref.index])

    def class_maps(self, name: str, head: PriorHead, temp: float):
        """Raw and l1-normalized certainty maps, (n, r) each, cached."""
        with self._lock:
            cached = self._maps.get(name)
        if cached is not None:
            return cached
        stack = self.class_features(name)
        w, h, d = self._dims[name]
        logits = stack.astype(np.float64) @ head.weights + head.biases
        z = logits / temp
        z -= z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=-1, keepdims=True)
        raw = certainty_weights(probs)
        normalized = np.stack([l1_normalize(row) for row in raw], axis=0)
        with self._lock:
            self._maps[name] = (raw, normalized)
        return raw, normalized

    def attention_map(
        self, ref: ExampleRef, head: PriorHead, temp: float
    ) -> AttentionMap:
        raw, normalized = self.class_maps(ref.class_name, head, temp)
        w, h, _ = self._dims[ref.class_name]
        return AttentionMap(
            width=w, height=h, raw=raw[ref.index], normalized=normalized[ref.index]
        )


def sample_base_subset(
    manifest: DatasetManifest, k: int | None, seed
) -> list[tuple[ExampleRef, int]]:
    """k examples per base class, sampled without replacement.

    ``k=None`` keeps every example ("all"); ``k=0`` returns the empty set.
    Labels are the class positions within the base split.
    """
    rng = np.random.default_rng(seed)
    subset: list[tuple[ExampleRef, int]] = []
    for label, entry in enumerate(manifest.split_classes("base")):
        if k is None:
            picked = range(entry.count)
        else:
            if entry.count < k:
                raise InsufficientDataError(
                    f"class {entry.name!r} has {entry.count} examples, need {k}"
                )
            picked = rng.choice(entry.count, size=k, replace=False)
        subset.extend((ExampleRef(entry.name, int(i)), label) for i in picked)
    return subset


def sample_episode(
    manifest: DatasetManifest,
    split: str,
    ways: int,
    shots: int,
    queries_per_class: int,
    seed,
) -> Episode:
    """Sample a c'-way k'-shot episode with disjoint support and queries."""
    classes = manifest.split_classes(split)
    if len(classes) < ways:
        raise InsufficientDataError(
            f"split {split!r} has {len(classes)} classes, need {ways}"
        )
    rng = np.random.default_rng(seed)
    chosen = [classes[i] for i in rng.choice(len(classes), size=ways, replace=False)]
    support: list[tuple[ExampleRef, int]] = []
    queries: list[tuple[ExampleRef, int]] = []
    need = shots + queries_per_class
    for label, entry in enumerate(chosen):
        if entry.count < need:
            raise InsufficientDataError(
                f"class {entry.name!r} has {entry.count} examples, need {need}"
            )
        picked = rng.choice(entry.count, size=need, replace=False)
        support.extend((ExampleRef(entry.name, int(i)), label) for i in picked[:shots])
        queries.extend((ExampleRef(entry.name, int(i)), label) for i in picked[shots:])
    assert not set(support) & set(queries), "support and query sets overlap"
    return Episode(
        support=tuple(support),
        queries=tuple(queries),
        ways=ways,
        shots=shots,
        queries_per_class=queries_per_class,
        class_names=tuple(e.name for e in chosen),
    )


def _maps_for(refs, store: FeatureStore, cfg: EvalConfig) -> list[AttentionMap]:
    if cfg.use_attention:
        return [store.attention_map(ref, cfg.prior_head, cfg.prior_temp) for ref, _ in refs]
    maps = []
    for ref, _ in refs:
        w, h, _ = store.dims(ref.class_name)
        maps.append(uniform_map(w, h))
    return maps


def _pooled(refs, maps, store: FeatureStore) -> np.ndarray:
    rows = []
    for (ref, _), amap in zip(refs, maps):
        stack = store.class_features(ref.class_name)
        rows.append(amap.normalized @ stack[ref.index].astype(np.float64))
    return np.stack(rows, axis=0)


def run_task(episode: Episode, store: FeatureStore, cfg: EvalConfig) -> float:
    """Accuracy of one episode under the configured pipeline."""
    adapter = cfg.adapter
    if adapter is None:
        _, _, d = store.dims(episode.support[0][0].class_name)
        adapter = Adapter.identity(d)
    sup_maps = _maps_for(episode.support, store, cfg)
    sup_labels = np.array([y for _, y in episode.support])
    if cfg.use_adaptation:
        sup_feats = [(store.tensor(ref), y) for ref, y in episode.support]
        result = adapt_novel(
            sup_feats, adapter, sup_maps, cfg.adapt, num_classes=episode.ways
        )
        adapter = result.adapter
        protos = result.prototypes
    else:
        embeddings = _pooled(episode.support, sup_maps, store) @ adapter.matrix.T
        protos = build_prototypes(embeddings, sup_labels, episode.ways)
    query_maps = _maps_for(episode.queries, store, cfg)
    query_emb = _pooled(episode.queries, query_maps, store) @ adapter.matrix.T
    probs = classify_embeddings(query_emb, CosineHead(protos.vectors, cfg.tau))
    preds = probs.argmax(axis=1)
    truth = np.array([y for _, y in episode.queries])
    return float((preds == truth).mean())


def evaluate(
    manifest: DatasetManifest,
    cfg: EvalConfig,
    n_tasks: int,
    seed: int,
    threads: int = 1,
) -> EvalReport:
    """Mean accuracy and 95% CI over n_tasks sampled episodes."""
    if n_tasks < 2:
        raise ValidationError("need at least 2 tasks for a confidence interval")
    store = FeatureStore(manifest)
    for entry in manifest.split_classes(cfg.split):
        store.class_features(entry.name)
        if cfg.use_attention:
            store.class_maps(entry.name, cfg.prior_head, cfg.prior_temp)

    def one(task_index: int) -> float:
        task_seed = np.random.SeedSequence([seed, task_index])
        episode = sample_episode(
            manifest, cfg.split, cfg.ways, cfg.shots, cfg.queries_per_class, task_seed
        )
        try:
            return run_task(episode, store, cfg)
        except DivergenceError as exc:
            raise DivergenceError(f"task {task_index} diverged: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accuracies = list(pool.map(one, range(n_tasks)))
    else:
        accuracies = [one(t) for t in range(n_tasks)]
    mean, ci = mean_ci95(accuracies)
    return EvalReport(
        mean=100.0 * mean,
        ci95=100.0 * ci,
        n_tasks=n_tasks,
        ways=cfg.ways,
        shots=cfg.shots,
        use_attention=cfg.use_attention,
        use_adaptation=cfg.use_adaptation,
        seed=seed,
    )


def run_grid(
    manifest: DatasetManifest,
    ks: Sequence[int | str | None],
    kprimes: Sequence[int],
    attention_options: Sequence[bool],
    adaptation_options: Sequence[bool],
    base_config: TrainConfig,
    eval_template: EvalConfig,
    n_tasks: int,
    seed: int,
    threads: int = 1,
) -> list[EvalReport]:
    """Base-train once per k, then evaluate every grid cell.

    The same evaluation seed is reused across cells so that attention and
    adaptation variants see identical episodes; each cell is independently
    reproducible from (seed, manifest, configs).
    """
    from .train import base_train  # local import to keep module load light

    store = FeatureStore(manifest)
    reports = []
    for k in ks:
        k_label: int | str | None = k
        if k == "all":
            k_sample = None
        elif k is None:
            k_sample, k_label = None, "all"
        else:
            k_sample = int(k)
        if k_sample == 0:
            adapter = eval_template.adapter
        else:
            subset = sample_base_subset(manifest, k_sample, seed)
            dataset = [(store.tensor(ref), y) for ref, y in subset]
            result = base_train(
                dataset,
                eval_template.adapter
                or Adapter.identity(dataset[0][0].d),
                base_config,
                num_classes=len(manifest.split_classes("base")),
            )
            adapter = result.adapter
        for kprime in kprimes:
            for attention in attention_options:
                for adaptation in adaptation_options:
                    cfg = replace(
                        eval_template,
                        shots=int(kprime),
                        use_attention=attention,
                        use_adaptation=adaptation,
                        adapter=adapter,
                    )
                    report = evaluate(manifest, cfg, n_tasks, seed, threads=threads)
                    reports.append(replace(report, k=k_label))
    return reports


def format_grid(reports: Sequence[EvalReport]) -> str:
    """Human-readable table, one line per cell."""
    lines = [
        f"{'k':>5} {'k-prime':>7} {'attention':>9} {'adaptation':>10} "
        f"{'accuracy':>16} {'tasks':>6}"
    ]
    for rep in reports:
        lines.append(
            f"{str(rep.k):>5} {rep.shots:>7} "
            f"{'yes' if rep.use_attention else 'no':>9} "
            f"{'yes' if rep.use_adaptation else 'no':>10} "
            f"{rep.format():>16} {rep.n_tasks:>6}"
        )
    return "\n".join(lines)
