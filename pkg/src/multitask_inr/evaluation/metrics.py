"""Reconstruction, segmentation and classification metrics, plus the JSON report."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..geometry import LabeledShape, nearest_vertex_label, occupancy, sample_surface
from ..geometry.shapes import DEFAULT_TAU
from .mesh import DEFAULT_EXTRACT_TAU, ExtractedMesh, cell_size, extract_mesh, sample_mesh_surface, vertex_normals

log = logging.getLogger(__name__)

IOU_SAMPLES = 100_000
CHAMFER_SAMPLES = 10_000
INTERIOR_SAMPLES = 10_000
METRICS = ("iou", "chamfer", "acc", "miou")


def _logit(tau: float) -> float:
    return float(np.log(tau / (1.0 - tau)))


def volumetric_iou(view, shape: LabeledShape, n_samples: int = IOU_SAMPLES, seed: int = 0,
                   tau: float = DEFAULT_TAU, bbox=None) -> float:
    """Monte-Carlo IOU between predicted and true occupancy inside the padded bbox."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    lo, hi = shape.padded_bbox() if bbox is None else bbox
    rng = np.random.default_rng(seed)
    pts = lo + rng.random((n_samples, 3)) * (np.asarray(hi) - np.asarray(lo))
    pred = np.asarray(view.occ_logits(pts)) > _logit(tau)
    gt = occupancy(shape, pts)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean of mean nearest-neighbour Euclidean distances."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two nonempty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def _mesh_samples(mesh, n: int, seed: int) -> np.ndarray:
    if isinstance(mesh, ExtractedMesh):
        verts, tris = mesh.vertices, mesh.triangles
    else:
        verts, tris = mesh
    if len(tris) == 0:
        raise ValueError("chamfer distance of an empty mesh is undefined")
    return sample_mesh_surface(np.asarray(verts, dtype=np.float64), np.asarray(tris), n,
                               np.random.default_rng(seed))


def chamfer_l1(mesh_a, mesh_b, n_surface_samples: int = CHAMFER_SAMPLES, seed: int = 0) -> float:
    # each mesh gets a fresh generator with the same seed, so identical meshes give identical samples
    return chamfer_points(_mesh_samples(mesh_a, n_surface_samples, seed),
                          _mesh_samples(mesh_b, n_surface_samples, seed))


def shape_chamfer(mesh: ExtractedMesh, shape: LabeledShape, n_samples: int = CHAMFER_SAMPLES,
                  seed: int = 0) -> float:
    """Chamfer-L1 between an extracted mesh and the exact surface of ``shape``."""
    gt = sample_surface(shape, n_samples, np.random.default_rng(seed))
    return chamfer_points(_mesh_samples(mesh, n_samples, seed), gt)


def interior_points(shape: LabeledShape, n: int, rng: np.random.Generator,
                    max_rounds: int = 64) -> np.ndarray:
    """Up to ``n`` points uniform in the true interior, by rejection from the bbox."""
    lo, hi = shape.bbox
    got, have = [], 0
    for _ in range(max_rounds):
        pts = lo + rng.random((2 * n, 3)) * (hi - lo)
        pts = pts[occupancy(shape, pts)]
        got.append(pts)
        have += len(pts)
        if have >= n:
            break
    return np.concatenate(got)[:n]


def shape_part_iou(gt: np.ndarray, pred: np.ndarray, n_parts: int) -> float:
    """Mean over the class's parts. A part absent from both gt and prediction scores 1."""
    ious = []
    for k in range(n_parts):
        g, p = gt == k, pred == k
        union = np.count_nonzero(g | p)
        ious.append(1.0 if union == 0 else np.count_nonzero(g & p) / union)
    return float(np.mean(ious))


@dataclass
class PartMiou:
    miou: float
    per_class: dict[int, float]
    per_shape: list[float | None]
    skipped: int = 0


def part_miou(views, shapes: list[LabeledShape], n_points: int = INTERIOR_SAMPLES,
              seed: int = 0) -> PartMiou:
    """Interior-only part IOU per shape, averaged over shapes and within each class.

    Labels are predicted by argmax over the parts of the shape's own class.
    """
    per_shape: list[float | None] = []
    by_class: dict[int, list[float]] = {}
    skipped = 0
    for i, (view, shape) in enumerate(zip(views, shapes)):
        pts = interior_points(shape, n_points, np.random.default_rng([seed, i, 3]))
        if len(pts) == 0:
            skipped += 1
            log.warning("shape %d has no interior sample points; skipped in mIOU", i)
            per_shape.append(None)
            continue
        gt = nearest_vertex_label(shape, pts)
        logits = np.asarray(view.part_logits(pts))[:, : shape.n_parts]
        iou = shape_part_iou(gt, np.argmax(logits, axis=1), shape.n_parts)
        per_shape.append(iou)
        by_class.setdefault(int(shape.class_label), []).append(iou)
    done = [x for x in per_shape if x is not None]
    miou = float(np.mean(done)) if done else 0.0
    per_class = {c: float(np.mean(v)) for c, v in sorted(by_class.items())}
    return PartMiou(miou, per_class, per_shape, skipped)


def cls_accuracy(views, shapes: list[LabeledShape]) -> float:
    if not shapes:
        raise ValueError("no shapes to classify")
    hits = [int(np.argmax(v.class_logits())) == int(s.class_label) for v, s in zip(views, shapes)]
    return sum(hits) / len(hits)


def segment_mesh(view, mesh: ExtractedMesh, bbox) -> np.ndarray:
    """Per-vertex part labels, queried half a grid cell inside the surface."""
    if mesh.empty:
        raise ValueError("cannot segment an empty mesh")
    step = 0.5 * float(np.min(cell_size(bbox, mesh.resolution)))
    pts = mesh.vertices - step * vertex_normals(mesh.vertices, mesh.triangles)
    return np.argmax(np.asarray(view.part_logits(pts)), axis=1).astype(np.int64)


# -- report -------------------------------------------------------------------


@dataclass
class MetricsReport:
    metrics: tuple[str, ...]
    iou: float | None = None
    chamfer_l1: float | None = None
    cls_accuracy: float | None = None
    miou: float | None = None
    per_class_miou: dict[int, float] | None = None
    shapes: list[dict] = field(default_factory=list)
    skipped_miou: int = 0

    def to_dict(self) -> dict:
        out: dict = {"metrics": list(self.metrics), "shapes": self.shapes}
        if "iou" in self.metrics:
            out["iou"] = self.iou
        if "chamfer" in self.metrics:
            out["chamfer_l1"] = self.chamfer_l1
        if "acc" in self.metrics:
            out["cls_accuracy"] = self.cls_accuracy
        if "miou" in self.metrics:
            out["miou"] = self.miou
            out["per_class_miou"] = {str(k): v for k, v in (self.per_class_miou or {}).items()}
            out["skipped_miou"] = self.skipped_miou
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


@dataclass
class EvalSettings:
    iou_samples: int = IOU_SAMPLES
    chamfer_samples: int = CHAMFER_SAMPLES
    interior_samples: int = INTERIOR_SAMPLES
    mesh_resolution: int = 64
    mesh_tau: float = DEFAULT_EXTRACT_TAU
    tau: float = DEFAULT_TAU


def parse_metrics(spec: str | list[str]) -> tuple[str, ...]:
    names = spec.split(",") if isinstance(spec, str) else list(spec)
    names = [n.strip() for n in names if n.strip()]
    bad = [n for n in names if n not in METRICS]
    if bad or not names:
        raise ValueError(f"metrics must be a nonempty subset of {METRICS}, got {names}")
    return tuple(dict.fromkeys(names))


def evaluate(predictor, shapes: list[LabeledShape], ids: list[str], metrics, seed: int = 0,
             settings: EvalSettings = EvalSettings()) -> MetricsReport:
    """Run the requested metrics; every random draw is keyed on (seed, shape index)."""
    metrics = parse_metrics(metrics)
    views = [predictor.bind(s, i) for i, s in enumerate(shapes)]
    records = [{"id": sid, "class_label": int(s.class_label)} for sid, s in zip(ids, shapes)]
    rep = MetricsReport(metrics, shapes=records)
    if "iou" in metrics:
        vals = [volumetric_iou(v, s, settings.iou_samples, seed=[seed, i, 1], tau=settings.tau)
                for i, (v, s) in enumerate(zip(views, shapes))]
        for r, x in zip(records, vals):
            r["iou"] = x
        rep.iou = float(np.mean(vals))
    if "chamfer" in metrics:
        vals = []
        for i, (v, s) in enumerate(zip(views, shapes)):
            mesh = extract_mesh(v.occ_prob, s.padded_bbox(), settings.mesh_resolution, settings.mesh_tau)
            x = None if mesh.empty else shape_chamfer(mesh, s, settings.chamfer_samples, seed=[seed, i, 2])
            records[i]["chamfer_l1"] = x
            if x is None:
                log.warning("shape %s: empty reconstruction, no chamfer distance", ids[i])
            else:
                vals.append(x)
        rep.chamfer_l1 = float(np.mean(vals)) if vals else None
    if "acc" in metrics:
        for r, v, s in zip(records, views, shapes):
            r["predicted_class"] = int(np.argmax(v.class_logits()))
        rep.cls_accuracy = cls_accuracy(views, shapes)
    if "miou" in metrics:
        pm = part_miou(views, shapes, settings.interior_samples, seed)
        for r, x in zip(records, pm.per_shape):
            r["miou"] = x
        rep.miou, rep.per_class_miou, rep.skipped_miou = pm.miou, pm.per_class, pm.skipped
    return rep
