"""3D pseudo bounding boxes for tracked objects from monocular video geometry.

The package turns camera poses, 2D box tracks, and 2D keypoint tracks into
7-DoF 3D boxes: triangulation and point-only refinement, two-stage point
clustering, edge-distance box fitting, a 3D detection metric suite, and a
synthetic-scene simulator used as the testing oracle.
"""

from pseudobox.boxfit import (
    FitConfig,
    OrientedBox3D,
    fit_box7,
    fit_min_area_rect,
    fit_orientation_edge,
    wrap_angle,
)
from pseudobox.cluster import (
    ClusterConfig,
    ObjectCluster,
    TrackedBox2D,
    connected_components,
    double_cluster,
    gpc,
    lpc,
    match_clusters,
)
from pseudobox.config import AppConfig, load_config
from pseudobox.errors import PseudoboxError
from pseudobox.evalmetrics import (
    DepthMetrics,
    EvalConfig,
    average_precision,
    bucket_report,
    depth_metrics,
    iou3d_yaw,
    let_iou,
    pr_curve,
)
from pseudobox.geom import Box2D, CameraFrame, CameraIntrinsics, Point3, Pose
from pseudobox.labelstore import (
    GenerationTag,
    Label,
    LabelSet,
    merge_keep_initial,
    merge_replace,
    select_by_depth,
)
from pseudobox.pipeline import PipelineConfig, evaluate, fit_labels, run_global_ba
from pseudobox.sceneio import SceneBundle, SceneTruth, load_bundle, save_bundle
from pseudobox.simulate import SimConfig, simulate
from pseudobox.triangulate import (
    BaConfig,
    ObservationTrack,
    WorldPoint,
    refine_points,
    triangulate_dlt,
)

__version__ = "0.1.0"

__all__ = [
    "AppConfig",
    "BaConfig",
    "Box2D",
    "CameraFrame",
    "CameraIntrinsics",
    "ClusterConfig",
    "DepthMetrics",
    "EvalConfig",
    "FitConfig",
    "GenerationTag",
    "Label",
    "LabelSet",
    "ObjectCluster",
    "ObservationTrack",
    "OrientedBox3D",
    "PipelineConfig",
    "Point3",
    "Pose",
    "PseudoboxError",
    "SceneBundle",
    "SceneTruth",
    "SimConfig",
    "TrackedBox2D",
    "WorldPoint",
    "average_precision",
    "bucket_report",
    "connected_components",
    "depth_metrics",
    "double_cluster",
    "evaluate",
    "fit_box7",
    "fit_labels",
    "fit_min_area_rect",
    "fit_orientation_edge",
    "gpc",
    "iou3d_yaw",
    "let_iou",
    "load_bundle",
    "load_config",
    "lpc",
    "match_clusters",
    "merge_keep_initial",
    "merge_replace",
    "pr_curve",
    "refine_points",
    "run_global_ba",
    "save_bundle",
    "select_by_depth",
    "simulate",
    "triangulate_dlt",
    "wrap_angle",
    "__version__",
]
