"""Metamorphic testing harness for cooperative V2V/V2X LiDAR perception.

Pipeline: synthesize or load multi-agent scenes, transform them with
communication and weather operators, run an ego-only and a cooperative
detector, and score the outcome (average precision, misleading
cooperation errors, consistency-relation verdicts, guidance priority).
"""

from .errors import (
    CootestError,
    DetectorError,
    DetectorExited,
    DetectorTimeout,
    HandshakeError,
    MalformedResponseError,
    SceneFormatError,
    SceneValidationError,
    TransformError,
)
from .geometry import (
    BevPolygon,
    bev_iou,
    box_corners_bev,
    clip_convex,
    compose,
    intersection_volume,
    invert,
    make_pose,
    transform_box,
    transform_points,
)
from .guidance import (
    SENTINEL,
    Candidate,
    guided_generate,
    normalize_scores,
    random_generate,
    raw_priority,
)
from .metrics import (
    Matching,
    MrVerdict,
    RangeBuckets,
    ap_by_range,
    average_precision,
    check_mr,
    count_mce,
    match,
)
from .operators import (
    ALL_KINDS,
    SharedPayload,
    TransformSpec,
    apply,
    apply_ct,
    apply_lossy_channel,
    apply_lossy_global,
    apply_sm,
    apply_weather,
    sample_params,
)
from .perception import (
    DetectionResult,
    DetectorConfig,
    ExternalDetector,
    detect_single,
    fuse_early,
    fuse_late,
    get_pred,
    nms,
    run_external,
)
from .report import SceneRecord, SuiteReport, render_report
from .rng import SplitMix64, derive_seed
from .scene import (
    AgentTrack,
    Box3D,
    Frame,
    PointCloud,
    Pose,
    Scene,
    load_scene,
    save_scene,
    scenes_equal,
    validate,
)
from .synth import (
    AgentInit,
    SynthConfig,
    Vehicle,
    compose_scene,
    generate_scene,
    generate_sequence,
)

__version__ = "0.1.0"
