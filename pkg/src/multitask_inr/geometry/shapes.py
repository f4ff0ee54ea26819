"""Labeled union-of-primitive shapes and their ground-truth oracles."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .primitives import Primitive

SURFACE_EPS = 1e-4
DEFAULT_TAU = 0.5
DEFAULT_VERTICES = 2048
FD_STEP = 1e-5


class MalformedShapeError(ValueError):
    pass


@dataclass
class LabeledShape:
    class_label: int
    n_parts: int
    primitives: list[Primitive]
    surface_vertices: np.ndarray  # (M, 3) float64
    vertex_labels: np.ndarray  # (M,) int
    _tree: cKDTree | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        lows, highs = zip(*(p.bbox() for p in self.primitives))
        return np.min(lows, axis=0), np.max(highs, axis=0)

    @property
    def diagonal(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))

    def padded_bbox(self, pad: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.bbox
        pad = default_pad(self) if pad is None else pad
        return lo - pad, hi + pad

    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.surface_vertices)
        return self._tree

    def validate(self) -> None:
        """Raise MalformedShapeError unless every LabeledShape invariant holds."""
        if not self.primitives:
            raise MalformedShapeError("shape has no primitives")
        if len(self.surface_vertices) == 0:
            raise MalformedShapeError("shape has no surface vertices")
        if len(self.surface_vertices) != len(self.vertex_labels):
            raise MalformedShapeError("surface_vertices and vertex_labels differ in length")
        for p in self.primitives:
            if p.part_label >= self.n_parts:
                raise MalformedShapeError(
                    f"part_label {p.part_label} out of range for {self.n_parts}-part class"
                )
        d = np.abs(sdf(self, self.surface_vertices))
        if d.max() > SURFACE_EPS:
            raise MalformedShapeError(f"surface vertex off the surface by {d.max():.3g}")
        lo, hi = self.bbox
        for p in self.primitives:
            plo, phi = p.bbox()
            if np.any(plo < lo) or np.any(phi > hi):
                raise MalformedShapeError("bbox does not contain every primitive")
        present = {p.part_label for p in self.primitives}
        missing = present - set(np.unique(self.vertex_labels).tolist())
        if missing:
            raise MalformedShapeError(f"no surface vertex for part(s) {sorted(missing)}")

    def to_dict(self) -> dict:
        return {
            "class_label": int(self.class_label),
            "n_parts": int(self.n_parts),
            "primitives": [p.to_dict() for p in self.primitives],
        }


def default_pad(shape: LabeledShape) -> float:
    return 0.1 * shape.diagonal


def build_shape(
    primitives: list[Primitive],
    class_label: int,
    n_parts: int,
    rng: np.random.Generator,
    n_vertices: int = DEFAULT_VERTICES,
) -> LabeledShape:
    """Assemble a shape and sample its labeled surface vertices."""
    verts, labels = sample_union_surface(primitives, n_vertices, rng)
    return LabeledShape(class_label, n_parts, list(primitives), verts, labels)


def sample_union_surface(
    primitives: list[Primitive], n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform samples on the union's boundary, with part labels.

    Candidates are drawn on each primitive's surface and rejected when they
    fall strictly inside another member of the union.
    """
    areas = np.array([p.area() for p in primitives])
    probs = areas / areas.sum()
    pts_out, lab_out = [], []
    have = 0
    while have < n:
        batch = max(2 * (n - have), 64)
        which = rng.choice(len(primitives), size=batch, p=probs)
        cand = np.empty((batch, 3))
        keep = np.ones(batch, dtype=bool)
        for i, prim in enumerate(primitives):
            rows = which == i
            if not rows.any():
                continue
            cand[rows] = prim.sample_surface(int(rows.sum()), rng)
            for j, other in enumerate(primitives):
                if j != i:
                    keep[rows] &= other.sdf(cand[rows]) >= 0.0
        labels = np.array([p.part_label for p in primitives], dtype=np.int64)[which]
        # candidates stay in draw order so truncation below is unbiased across parts
        pts_out.append(cand[keep])
        lab_out.append(labels[keep])
        have += int(keep.sum())
    pts = np.concatenate(pts_out)[:n]
    labels = np.concatenate(lab_out)[:n]
    return pts, labels


# -- oracles ----------------------------------------------------------------


def sdf(shape: LabeledShape, p: np.ndarray) -> np.ndarray:
    """Union SDF: min over member SDFs (exact sign, lower-bound magnitude outside)."""
    p = np.asarray(p, dtype=np.float64)
    return np.min([prim.sdf(p) for prim in shape.primitives], axis=0)


def occupancy(shape: LabeledShape, p: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Inside test via sigmoid(-sdf) > tau; for tau = 0.5 this is sdf < 0."""
    s = sdf(shape, p)
    if tau == 0.5:
        return s < 0.0
    # sigmoid(-s) > tau  <=>  -s > logit(tau)
    return -s > np.log(tau / (1.0 - tau))


def sdf_gradient(shape: LabeledShape, p: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of the union SDF."""
    p = np.asarray(p, dtype=np.float64)
    grad = np.empty(p.shape)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        grad[..., k] = (sdf(shape, p + e) - sdf(shape, p - e)) / (2.0 * h)
    return grad


def nearest_vertex_label(shape: LabeledShape, p: np.ndarray) -> np.ndarray:
    """Label of the nearest surface vertex, ties to the lowest vertex index.

    Uses a kd-tree for candidates, then re-ranks them with the same distance
    formula as :func:`nearest_vertex_label_bruteforce` so both agree exactly.
    """
    idx = nearest_vertex_index(shape, p)
    return shape.vertex_labels[idx]


def nearest_vertex_index(shape: LabeledShape, p: np.ndarray) -> np.ndarray:
    if len(shape.surface_vertices) == 0:
        raise MalformedShapeError("shape has no surface vertices")
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    verts = shape.surface_vertices
    k = min(8, len(verts))
    _, cand = shape.tree().query(p, k=k)
    cand = cand.reshape(len(p), k)
    d2 = _sq_dist(p[:, None, :] - verts[cand])
    best = d2.min(axis=1)
    # lowest vertex index among candidates achieving the minimum
    masked = np.where(d2 == best[:, None], cand, np.iinfo(np.int64).max)
    out = masked.min(axis=1)
    if k < len(verts):
        # candidates may be incomplete when the k-th neighbour is (nearly) as close as the best
        unsafe = d2[:, -1] <= best * (1.0 + 1e-9) + 1e-300
        for i in np.flatnonzero(unsafe):
            out[i] = _argmin_scan(verts, p[i])
    return out[0] if single else out


def _argmin_scan(verts: np.ndarray, q: np.ndarray) -> int:
    return int(np.argmin(_sq_dist(q[None, :] - verts)))


def _sq_dist(diff: np.ndarray) -> np.ndarray:
    # fixed summation order; the kd-tree path and the linear scan must round identically
    return diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]


def nearest_vertex_label_bruteforce(shape: LabeledShape, p: np.ndarray) -> np.ndarray:
    """O(N*M) linear scan reference for :func:`nearest_vertex_label`."""
    if len(shape.surface_vertices) == 0:
        raise MalformedShapeError("shape has no surface vertices")
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    out = np.empty(len(p), dtype=np.int64)
    for start in range(0, len(p), 256):
        chunk = p[start : start + 256]
        d2 = _sq_dist(chunk[:, None, :] - shape.surface_vertices[None, :, :])
        out[start : start + 256] = np.argmin(d2, axis=1)
    return shape.vertex_labels[out]


def sample_surface(shape: LabeledShape, n: int, rng: np.random.Generator) -> np.ndarray:
    pts, _ = sample_union_surface(shape.primitives, n, rng)
    return pts
