from .mesh import (
    DEFAULT_EXTRACT_TAU,
    ExtractedMesh,
    extract_mesh,
    is_consistently_oriented,
    is_watertight,
    marching_cubes,
    sample_mesh_surface,
)
from .metrics import (
    METRICS,
    EvalSettings,
    MetricsReport,
    PartMiou,
    chamfer_l1,
    chamfer_points,
    cls_accuracy,
    evaluate,
    parse_metrics,
    part_miou,
    segment_mesh,
    shape_chamfer,
    shape_part_iou,
    volumetric_iou,
)
from .predictors import NetworkPredictor, OraclePredictor

__all__ = [
    "DEFAULT_EXTRACT_TAU",
    "METRICS",
    "EvalSettings",
    "ExtractedMesh",
    "MetricsReport",
    "NetworkPredictor",
    "OraclePredictor",
    "PartMiou",
    "chamfer_l1",
    "chamfer_points",
    "cls_accuracy",
    "evaluate",
    "extract_mesh",
    "is_consistently_oriented",
    "is_watertight",
    "marching_cubes",
    "parse_metrics",
    "part_miou",
    "sample_mesh_surface",
    "segment_mesh",
    "shape_chamfer",
    "shape_part_iou",
    "volumetric_iou",
]
