"""propseg: attention-guided mask propagation for video instance segmentation.

The library covers the full loop at desk scale: encode frames into feature
grids, build inter-frame affinities, propagate object maps and turn them
into attention, predict masks with a small trainable head, associate and
fill detections online, generate synthetic benchmarks, and score tracks
with interpolated average precision (plus a ground-truth substitution
ladder for error attribution). PropagationSegmenter ties it together behind
a fit/predict interface; the `propseg` command exposes the same flow on
files.
"""

from .affinity import (
    AffinityMatrix,
    AttentionMap,
    AttentionPropagator,
    BoundingBox,
    attention_for_box,
    attention_from_propagation,
    box_iou,
    box_to_binary_map,
    default_propagator,
    inter_frame_affinity,
    invert_map,
    normalize_affinity,
    propagate,
    propagate_attention,
)
from .config import (
    EncoderConfig,
    PathConfig,
    RunConfig,
    SceneConfig,
    load_run_config,
    override_config,
)
from .datasets import (
    BenchmarkBundle,
    DetectorModel,
    GroundTruthTrack,
    InstanceSpec,
    SceneSpec,
    SyntheticVideo,
    build_suite,
    corrupt_detections,
    erode_mask,
    generate_video,
    random_scene,
    standard_suite,
)
from .encoder import FrameEncoder
from .errors import (
    BadMagicError,
    CodecError,
    ConfigError,
    ContractError,
    InputError,
    ParamShapeError,
    PropsegError,
    ShapeError,
    StaleTrackError,
    TruncatedFileError,
)
from .grids import FeatureGrid
from .head import (
    HeadParams,
    LossReport,
    attended_forward,
    attention_loss,
    head_forward,
    head_gradients,
    init_head_params,
    mask_loss,
)
from .io import (
    RleMask,
    load_annotations,
    load_dataset,
    load_detections,
    load_params,
    read_ppm,
    rle_decode,
    rle_encode,
    save_params,
    write_annotations,
    write_dataset,
    write_detections,
    write_ppm,
)
from .metrics import (
    EvalConfig,
    EvalReport,
    EvalTrack,
    OracleFlags,
    evaluate,
    from_ground_truth,
    from_instance_tracks,
    ladder_emit,
    oracle_ladder,
    oracle_substitute,
    report_emit,
    track_iou,
)
from .model import PropagationSegmenter
from .tracker import (
    Detection,
    InstanceTrack,
    PipelineConfig,
    fill_missing,
    mask_iou,
    match_detections,
    run_video,
)
from .training import (
    GradientCheckReport,
    TrainConfig,
    gradient_check,
    learning_rate_at,
    sgd_step,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AffinityMatrix",
    "AttentionMap",
    "AttentionPropagator",
    "BadMagicError",
    "BenchmarkBundle",
    "BoundingBox",
    "CodecError",
    "ConfigError",
    "ContractError",
    "Detection",
    "DetectorModel",
    "EncoderConfig",
    "EvalConfig",
    "EvalReport",
    "EvalTrack",
    "FeatureGrid",
    "FrameEncoder",
    "GradientCheckReport",
    "GroundTruthTrack",
    "HeadParams",
    "InputError",
    "InstanceSpec",
    "InstanceTrack",
    "LossReport",
    "OracleFlags",
    "ParamShapeError",
    "PathConfig",
    "PipelineConfig",
    "PropagationSegmenter",
    "PropsegError",
    "RleMask",
    "RunConfig",
    "SceneConfig",
    "SceneSpec",
    "ShapeError",
    "StaleTrackError",
    "SyntheticVideo",
    "TrainConfig",
    "TruncatedFileError",
    "attended_forward",
    "attention_for_box",
    "attention_from_propagation",
    "attention_loss",
    "box_iou",
    "box_to_binary_map",
    "build_suite",
    "corrupt_detections",
    "default_propagator",
    "erode_mask",
    "evaluate",
    "fill_missing",
    "from_ground_truth",
    "from_instance_tracks",
    "generate_video",
    "gradient_check",
    "head_forward",
    "head_gradients",
    "init_head_params",
    "inter_frame_affinity",
    "invert_map",
    "ladder_emit",
    "learning_rate_at",
    "load_annotations",
    "load_dataset",
    "load_detections",
    "load_params",
    "load_run_config",
    "mask_iou",
    "mask_loss",
    "match_detections",
    "normalize_affinity",
    "oracle_ladder",
    "oracle_substitute",
    "override_config",
    "propagate",
    "propagate_attention",
    "random_scene",
    "read_ppm",
    "report_emit",
    "rle_decode",
    "rle_encode",
    "run_video",
    "save_params",
    "sgd_step",
    "standard_suite",
    "track_iou",
    "train",
    "write_annotations",
    "write_dataset",
    "write_detections",
    "write_ppm",
]
