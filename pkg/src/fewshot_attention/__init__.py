"""Few-shot classification on frozen features with certainty-based attention."""

from .attention import (
    AttentionMap,
    FeatureTensor,
    PriorHead,
    attention_weights,
    certainty_weights,
    compute_map,
    dense_prior_probs,
    gap,
    gwap,
    heatmap_export,
    normalize_map,
    uniform_map,
)
from .classify import (
    CosineHead,
    Prototypes,
    build_prototypes,
    classify_embeddings,
    cosine_classify,
    dense_classify,
    predict,
    prototype_classify,
)
from .data_io import (
    DatasetManifest,
    SyntheticSpec,
    generate_synthetic,
    read_features,
    read_head,
    read_manifest,
    write_features,
    write_head,
    write_manifest,
)
from .episodes import (
    Episode,
    EvalConfig,
    EvalReport,
    evaluate,
    run_grid,
    sample_base_subset,
    sample_episode,
)
from .errors import (
    DataError,
    DegenerateInputError,
    DivergenceError,
    InsufficientDataError,
    MissingClassError,
    ParseError,
    ValidationError,
)
from .numerics import cosine_sim, entropy, l1_normalize, mean_ci95, softmax_temp
from .train import (
    Adapter,
    TrainConfig,
    adam_step,
    adapt_novel,
    apply_adapter,
    base_train,
    cross_entropy,
    dense_cost,
    grad_dense_cost,
    proto_cost,
    sgd_nesterov_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
