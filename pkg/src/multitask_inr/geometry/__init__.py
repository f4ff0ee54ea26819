from .families import FAMILIES, make_dataset, make_shape, parse_family_spec, parts_per_family
from .primitives import Primitive
from .sampling import DEFAULT_NOISE_SIGMA, N_INPUT_POINTS, SampleBatch, input_cloud, label_points, sample_batch
from .shapes import (
    LabeledShape,
    MalformedShapeError,
    build_shape,
    nearest_vertex_label,
    nearest_vertex_label_bruteforce,
    occupancy,
    sample_surface,
    sdf,
    sdf_gradient,
)

__all__ = [
    "FAMILIES",
    "DEFAULT_NOISE_SIGMA",
    "N_INPUT_POINTS",
    "LabeledShape",
    "MalformedShapeError",
    "Primitive",
    "SampleBatch",
    "build_shape",
    "input_cloud",
    "label_points",
    "make_dataset",
    "make_shape",
    "nearest_vertex_label",
    "nearest_vertex_label_bruteforce",
    "occupancy",
    "parse_family_spec",
    "parts_per_family",
    "sample_batch",
    "sample_surface",
    "sdf",
    "sdf_gradient",
]
