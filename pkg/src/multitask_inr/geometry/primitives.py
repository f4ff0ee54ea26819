"""Analytic solid primitives: signed distance, surface sampling, volume.

All primitives are axis aligned. Cylinders and capsules carry an ``axis``
index naming the world axis their length runs along.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("sphere", "box", "cylinder", "capsule")


@dataclass(frozen=True)
class Primitive:
    """One solid in a union.

    ``size`` meaning per kind:
      sphere   (radius,)
      box      (half_x, half_y, half_z)
      cylinder (radius, half_height)
      capsule  (radius, half_length)   # segment half length, caps excluded
    """

    kind: str
    center: tuple[float, float, float]
    size: tuple[float, ...]
    part_label: int = 0
    axis: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        expected = {"sphere": 1, "box": 3, "cylinder": 2, "capsule": 2}[self.kind]
        if len(self.size) != expected:
            raise ValueError(f"{self.kind} needs {expected} size parameters, got {len(self.size)}")
        if any(not s > 0 for s in self.size):
            raise ValueError(f"size parameters must be strictly positive: {self.size}")
        if self.axis not in (0, 1, 2):
            raise ValueError(f"axis must be 0, 1 or 2, got {self.axis}")
        if self.part_label < 0:
            raise ValueError("part_label must be >= 0")

    # -- geometry ---------------------------------------------------------

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        q = p - np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        if self.kind == "box":
            d = np.abs(q) - np.asarray(self.size)
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            inside = np.minimum(d.max(axis=-1), 0.0)
            return outside + inside
        along, radial = _split_axis(q, self.axis)
        r, h = self.size
        if self.kind == "cylinder":
            d = np.stack([radial - r, np.abs(along) - h], axis=-1)
            return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        # capsule: distance to the axis segment minus radius
        t = np.clip(along, -h, h)
        return np.sqrt(radial**2 + (along - t) ** 2) - r

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            ext = np.full(3, self.size[0])
        elif self.kind == "box":
            ext = np.asarray(self.size, dtype=np.float64)
        else:
            r, h = self.size
            ext = np.full(3, r)
            ext[self.axis] = h if self.kind == "cylinder" else h + r
        return c - ext, c + ext

    def volume(self) -> float:
        if self.kind == "sphere":
            return 4.0 / 3.0 * np.pi * self.size[0] ** 3
        if self.kind == "box":
            return 8.0 * float(np.prod(self.size))
        r, h = self.size
        cyl = np.pi * r * r * 2.0 * h
        return cyl if self.kind == "cylinder" else cyl + 4.0 / 3.0 * np.pi * r**3

    def area(self) -> float:
        if self.kind == "sphere":
            return 4.0 * np.pi * self.size[0] ** 2
        if self.kind == "box":
            a, b, c = self.size
            return 8.0 * (a * b + b * c + a * c)
        r, h = self.size
        side = 2.0 * np.pi * r * 2.0 * h
        return side + (2.0 * np.pi * r * r if self.kind == "cylinder" else 4.0 * np.pi * r * r)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform (area-weighted) samples on this primitive's own surface."""
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "sphere":
            return c + self.size[0] * _unit_vectors(n, rng)
        if self.kind == "box":
            h = np.asarray(self.size, dtype=np.float64)
            # face pair k is normal to axis k; its area is 4 * prod of the other two
            face_area = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
            k = rng.choice(3, size=n, p=face_area / face_area.sum())
            pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
            sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
            pts[np.arange(n), k] = sign * h[k]
            return c + pts
        r, h = self.size
        side = 4.0 * np.pi * r * h
        caps = 2.0 * np.pi * r * r if self.kind == "cylinder" else 4.0 * np.pi * r * r
        on_side = rng.random(n) < side / (side + caps)
        local = np.empty((n, 3))
        n_side = int(on_side.sum())
        theta = rng.uniform(0.0, 2.0 * np.pi, n_side)
        local[on_side] = np.stack(
            [r * np.cos(theta), r * np.sin(theta), rng.uniform(-h, h, n_side)], axis=-1
        )
        n_cap = n - n_side
        if self.kind == "cylinder":
            rad = r * np.sqrt(rng.random(n_cap))
            phi = rng.uniform(0.0, 2.0 * np.pi, n_cap)
            zs = np.where(rng.random(n_cap) < 0.5, -h, h)
            local[~on_side] = np.stack([rad * np.cos(phi), rad * np.sin(phi), zs], axis=-1)
        else:
            u = r * _unit_vectors(n_cap, rng)
            u[:, 2] += np.where(u[:, 2] >= 0.0, h, -h)
            local[~on_side] = u
        return c + _local_to_world(local, self.axis)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "center": [float(v) for v in self.center],
            "size": [float(v) for v in self.size],
            "part_label": int(self.part_label),
            "axis": int(self.axis),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(
            kind=d["kind"],
            center=tuple(d["center"]),
            size=tuple(d["size"]),
            part_label=int(d.get("part_label", 0)),
            axis=int(d.get("axis", 2)),
        )


def _split_axis(q: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    along = q[..., axis]
    others = [i for i in range(3) if i != axis]
    radial = np.sqrt(q[..., others[0]] ** 2 + q[..., others[1]] ** 2)
    return along, radial


def _local_to_world(local: np.ndarray, axis: int) -> np.ndarray:
    # local z runs along ``axis``; the remaining two local coords fill the other axes in order
    out = np.empty_like(local)
    others = [i for i in range(3) if i != axis]
    out[:, others[0]] = local[:, 0]
    out[:, others[1]] = local[:, 1]
    out[:, axis] = local[:, 2]
    return out


def _unit_vectors(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    norm[norm == 0.0] = 1.0
    return v / norm


def permute_axes(prim: Primitive, perm: tuple[int, int, int]) -> Primitive:
    """Re-express ``prim`` under the axis relabelling world[perm[i]] = local[i]."""
    center = [0.0, 0.0, 0.0]
    for i, j in enumerate(perm):
        center[j] = prim.center[i]
    size = prim.size
    if prim.kind == "box":
        s = [0.0, 0.0, 0.0]
        for i, j in enumerate(perm):
            s[j] = prim.size[i]
        size = tuple(s)
    return Primitive(prim.kind, tuple(center), tuple(size), prim.part_label, perm[prim.axis])
