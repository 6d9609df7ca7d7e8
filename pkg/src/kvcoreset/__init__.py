"""Budget-bounded representative selection for transformer KV caches.

Training-free, query-agnostic compression: pick a small coreset of
cached key/value tokens by farthest-first greedy selection under a
bicriteria key/value distance, optionally boosted by an orthogonal
novelty bonus, with a streaming manager that keeps memory bounded.
"""

__version__ = "0.1.0"

from .errors import (
    BoundsError,
    BudgetError,
    ConfigurationError,
    EmptyInputError,
    FormatError,
    KvError,
    ShapeError,
    ValidationError,
)
from .kvcore import (
    BudgetConfig,
    CacheSnapshot,
    FrameView,
    Granularity,
    LayerCache,
    OrthMode,
    SelectionResult,
    SelectorConfig,
    StepRecord,
    expand_frames,
    frame_centroids,
    joint_feature,
)
from .selector import (
    CandidatePool,
    SpanState,
    bicriteria_distance,
    cords_select,
    d2_select,
    greedy_residual_select,
    logdet_coverage,
    logdet_marginal_gain,
    min_max_normalize,
    orth_score_exact,
    orth_score_surrogate,
    seed_token,
)
from .baselines import (
    BaselineKind,
    greedy_shortlist,
    kmeans_representative,
    random_select,
    uniform_select,
    value_norm_topk,
)
from .streaming import (
    CompressionRecord,
    LayerSchedule,
    StreamState,
    cascade_apply,
    ingest_block,
    maybe_compress,
    run_stream,
    split_into_blocks,
)
from .diagnostics import (
    attention_error_and_bounds,
    cdf_max_gap,
    cluster_assignment,
    compressed_attention_weighted,
    coverage_cdf,
    full_attention,
    logdet_audit,
    quantization_error,
)
from .kvio import (
    SyntheticSpec,
    generate_synthetic,
    read_kvd,
    read_results,
    write_kvd,
    write_results,
)
from .estimators import KVCoresetSelector

__all__ = [
    "__version__",
    "KvError", "ValidationError", "ShapeError", "EmptyInputError",
    "BudgetError", "ConfigurationError", "BoundsError", "FormatError",
    "LayerCache", "CacheSnapshot", "FrameView", "SelectorConfig",
    "BudgetConfig", "OrthMode", "Granularity", "StepRecord",
    "SelectionResult", "joint_feature", "frame_centroids", "expand_frames",
    "CandidatePool", "SpanState", "bicriteria_distance", "seed_token",
    "d2_select", "cords_select", "orth_score_exact", "orth_score_surrogate",
    "min_max_normalize", "logdet_coverage", "logdet_marginal_gain",
    "greedy_residual_select",
    "BaselineKind", "uniform_select", "random_select", "value_norm_topk",
    "kmeans_representative", "greedy_shortlist",
    "LayerSchedule", "StreamState", "CompressionRecord", "ingest_block",
    "maybe_compress", "cascade_apply", "run_stream", "split_into_blocks",
    "full_attention", "compressed_attention_weighted", "cluster_assignment",
    "attention_error_and_bounds", "quantization_error", "coverage_cdf",
    "cdf_max_gap", "logdet_audit",
    "write_kvd", "read_kvd", "SyntheticSpec", "generate_synthetic",
    "write_results", "read_results",
    "KVCoresetSelector",
]
