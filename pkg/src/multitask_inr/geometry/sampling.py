"""Query-point batches and noisy input clouds."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .shapes import LabeledShape, default_pad, nearest_vertex_label, occupancy, sample_surface

N_INPUT_POINTS = 300
DEFAULT_NOISE_SIGMA = 0.05


@dataclass
class SampleBatch:
    query_points: np.ndarray  # (N, 3) float32
    gt_occupancy: np.ndarray  # (N,) bool
    gt_part_label: np.ndarray  # (N,) uint16, 0 where outside
    input_cloud: np.ndarray  # (300, 3) float32
    class_label: int

    def __eq__(self, other):
        if not isinstance(other, SampleBatch):
            return NotImplemented
        return (
            self.class_label == other.class_label
            and np.array_equal(self.query_points, other.query_points)
            and np.array_equal(self.gt_occupancy, other.gt_occupancy)
            and np.array_equal(self.gt_part_label, other.gt_part_label)
            and np.array_equal(self.input_cloud, other.input_cloud)
        )


def input_cloud(
    shape: LabeledShape,
    rng: np.random.Generator,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    n_points: int = N_INPUT_POINTS,
) -> np.ndarray:
    pts = sample_surface(shape, n_points, rng)
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    return pts.astype(np.float32)


def label_points(shape: LabeledShape, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth occupancy and nearest-vertex labels (0 outside)."""
    occ = occupancy(shape, points)
    labels = np.zeros(len(points), dtype=np.uint16)
    if occ.any():
        labels[occ] = nearest_vertex_label(shape, points[occ])
    return occ, labels


def sample_batch(
    shape: LabeledShape,
    n_query: int,
    pad: float | None = None,
    noise_sigma: float = DEFAULT_NOISE_SIGMA,
    rng_seed=0,
) -> SampleBatch:
    """Uniform queries in the padded bbox plus a noisy 300-point input cloud.

    Ground truth is computed on the float32-rounded query points so a
    stored batch is self-consistent.
    """
    if n_query < 1:
        raise ValueError("n_query must be >= 1")
    pad = default_pad(shape) if pad is None else pad
    if pad < 0:
        raise ValueError("pad must be >= 0")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    lo, hi = shape.padded_bbox(pad)
    q = rng.uniform(lo, hi, size=(n_query, 3)).astype(np.float32)
    occ, labels = label_points(shape, q.astype(np.float64))
    cloud = input_cloud(shape, rng, noise_sigma)
    return SampleBatch(q, occ, labels, cloud, int(shape.class_label))
