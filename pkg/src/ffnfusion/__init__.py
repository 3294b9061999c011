"""FFN fusion toolkit for desk-scale transformers."""

from .errors import (
    CorruptCalibrationError,
    CorruptCheckpointError,
    DegenerateScaleError,
    FFNFusionError,
    InvalidArgumentError,
    InvalidPlanError,
)
from .model import (
    AttentionWeights,
    Block,
    BlockSpec,
    FfnWeights,
    ForwardTrace,
    Model,
    ModelConfig,
    NormScale,
    attention_forward,
    block_forward,
    generate_random_model,
    model_forward,
    silu,
    swiglu_forward,
    token_normalize,
)
from .fusion import (
    FusionPlan,
    apply_fusion_plan,
    fuse_ffn_weights,
    parallel_ffn_forward,
    plan_ffn_fusion,
    remove_ffns,
    reverse_ffn_range,
)
from .dependency import (
    compute_dependency_matrix,
    cosine_distance,
    layer_contribution_ratio,
    layer_direction_metric,
)
from .parallel import ParallelPlan, WindowStats, apply_block_parallel_plan, greedy_select, window_stats
from .checkpoint import (
    export_csv,
    generate_calibration,
    load_calibration,
    load_model,
    save_calibration,
    save_model,
)
from .bench import BenchReport, LatencyParams, analytic_latency, compare_models, stage_flops, wall_clock_bench

__version__ = "0.1.0"
