"""Per-shape views over a trained model or the analytic ground truth.

A predictor is bound to one shape at a time; the bound view answers
occupancy logits, part logits and class logits for that shape.
"""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..geometry import LabeledShape, input_cloud, nearest_vertex_label, sdf
from ..geometry.sampling import DEFAULT_NOISE_SIGMA
from ..models import MultiTaskModel

EVAL_CHUNK = 32768
ORACLE_SHARPNESS = 100.0  # logit = -sdf * sharpness
ORACLE_CONFIDENCE = 10.0


class ShapeView:
    def occ_logits(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def part_logits(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def class_logits(self) -> np.ndarray:
        raise NotImplementedError

    def occ_prob(self, points: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-np.asarray(self.occ_logits(points), dtype=np.float64)))


class OracleView(ShapeView):
    def __init__(self, shape: LabeledShape, n_classes: int, n_parts: int):
        self.shape, self.n_classes, self.n_parts = shape, n_classes, n_parts

    def occ_logits(self, points):
        return -ORACLE_SHARPNESS * sdf(self.shape, points)

    def part_logits(self, points):
        lab = nearest_vertex_label(self.shape, points)
        out = np.zeros((len(lab), self.n_parts))
        out[np.arange(len(lab)), lab] = ORACLE_CONFIDENCE
        return out

    def class_logits(self):
        out = np.zeros(self.n_classes)
        out[self.shape.class_label] = ORACLE_CONFIDENCE
        return out


class OraclePredictor:
    """Ground truth dressed up as a model; used for debugging the metric pipeline."""

    def __init__(self, n_classes: int, n_parts: int):
        self.n_classes, self.n_parts = n_classes, n_parts

    def bind(self, shape: LabeledShape, key: int) -> OracleView:
        return OracleView(shape, self.n_classes, self.n_parts)


class NetworkView(ShapeView):
    def __init__(self, model: MultiTaskModel, z: ad.Tensor):
        self.model, self.z = model, z

    def _decode(self, points, occ: bool):
        pts = np.asarray(points, dtype=np.float32)
        outs = []
        for s in range(0, len(pts), EVAL_CHUNK):
            o, g = self.model.decode(self.z, pts[s : s + EVAL_CHUNK], "eval", need_occ=occ, need_seg=not occ)
            res = o if occ else g
            if res is None:
                raise ValueError(f"model has no {'occupancy' if occ else 'segmentation'} head")
            outs.append(res.data)
        if not outs:
            return np.zeros((0,) if occ else (0, self.model.config.n_parts), dtype=np.float32)
        return np.concatenate(outs)

    def occ_logits(self, points):
        return self._decode(points, True)

    def part_logits(self, points):
        return self._decode(points, False)

    def class_logits(self):
        return self.model.classify(self.z).data


class NetworkPredictor:
    """Encodes a freshly sampled input cloud per shape; the cloud depends on (seed, key)."""

    def __init__(self, model: MultiTaskModel, seed: int = 0, noise_sigma: float = DEFAULT_NOISE_SIGMA):
        self.model, self.seed, self.noise_sigma = model, seed, noise_sigma
        self.n_classes, self.n_parts = model.config.n_classes, model.config.n_parts

    def bind(self, shape: LabeledShape, key: int) -> NetworkView:
        rng = np.random.default_rng([self.seed, key, 7])
        cloud = input_cloud(shape, rng, self.noise_sigma, self.model.config.n_input_points)
        return NetworkView(self.model, self.model.encode(cloud))
