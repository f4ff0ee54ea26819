"""Procedural shape families with fixed part schemas.

Each family builds a shape in a canonical frame, then applies a random axis
permutation and a small translation. Sizes are in model units; every
family fits inside roughly [-0.55, 0.55]^3.
"""
from __future__ import annotations

import itertools

import numpy as np

from .primitives import Primitive, permute_axes
from .shapes import DEFAULT_VERTICES, LabeledShape, build_shape

PERMUTATIONS = list(itertools.permutations(range(3)))


def _spheres(rng: np.random.Generator) -> list[Primitive]:
    n = int(rng.integers(1, 4))
    r0 = rng.uniform(0.22, 0.35)
    prims = [Primitive("sphere", (0.0, 0.0, 0.0), (r0,), 0)]
    for _ in range(n - 1):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        off = d * rng.uniform(0.12, 0.22)
        prims.append(Primitive("sphere", tuple(off), (rng.uniform(0.14, 0.24),), 0))
    return prims


def _dumbbell(rng: np.random.Generator) -> list[Primitive]:
    half = rng.uniform(0.22, 0.32)
    ra, rb = rng.uniform(0.13, 0.2, size=2)
    rh = rng.uniform(0.06, 0.09)
    return [
        Primitive("sphere", (0.0, 0.0, -half), (ra,), 0),
        Primitive("cylinder", (0.0, 0.0, 0.0), (rh, half), 1, axis=2),
        Primitive("sphere", (0.0, 0.0, half), (rb,), 2),
    ]


def _table(rng: np.random.Generator) -> list[Primitive]:
    w, d = rng.uniform(0.28, 0.42), rng.uniform(0.22, 0.36)
    t = rng.uniform(0.04, 0.06)
    leg_half = rng.uniform(0.15, 0.22)
    s = rng.uniform(0.04, 0.06)
    # top spans z in [0.5*leg_half, 0.5*leg_half + 2t]; legs reach halfway into it
    prims = [Primitive("box", (0.0, 0.0, 0.5 * leg_half + t), (w, d, t), 0)]
    lz = -0.5 * leg_half + 0.5 * t
    for sx, sy in ((-1, -1), (-1, 1), (1, -1), (1, 1)):
        prims.append(
            Primitive("box", (sx * (w - s), sy * (d - s), lz), (s, s, leg_half + 0.5 * t), 1)
        )
    return prims


def _cross(rng: np.random.Generator) -> list[Primitive]:
    la, lb = rng.uniform(0.32, 0.45), rng.uniform(0.22, 0.38)
    ta, tb = rng.uniform(0.07, 0.11), rng.uniform(0.07, 0.11)
    shift = rng.uniform(-0.15, 0.15)
    return [
        Primitive("box", (0.0, 0.0, 0.0), (la, ta, ta), 0),
        Primitive("box", (shift, 0.0, 0.0), (tb, lb, tb * rng.uniform(0.8, 1.2)), 1),
    ]


FAMILIES: dict[str, tuple[int, object]] = {
    "spheres": (1, _spheres),
    "dumbbell": (3, _dumbbell),
    "table": (2, _table),
    "cross": (2, _cross),
}


def parts_per_family(name: str) -> int:
    return FAMILIES[name][0]


def parse_family_spec(spec: str | list) -> list[tuple[str, int | None]]:
    """Parse ``"a,b:10,c"`` into ``[("a", None), ("b", 10), ("c", None)]``."""
    if isinstance(spec, str):
        items = [s.strip() for s in spec.split(",") if s.strip()]
    else:
        items = list(spec)
    out: list[tuple[str, int | None]] = []
    for item in items:
        if isinstance(item, (tuple, list)):
            name, count = item[0], item[1]
        elif ":" in item:
            name, raw = item.split(":", 1)
            try:
                count = int(raw)
            except ValueError:
                raise ValueError(f"bad count in family spec item {item!r}") from None
        else:
            name, count = item, None
        if name not in FAMILIES:
            raise ValueError(f"unknown family {name!r}; known: {sorted(FAMILIES)}")
        if count is not None and count < 0:
            raise ValueError(f"negative count for family {name!r}")
        out.append((name, count))
    if len(out) < 2:
        raise ValueError("family spec must name at least 2 families")
    if len({n for n, _ in out}) != len(out):
        raise ValueError("family spec names a family twice")
    return out


def family_schedule(families: list[tuple[str, int | None]], n_shapes: int | None) -> list[int]:
    """Family index of each shape: round-robin, honouring explicit counts."""
    counts = [c for _, c in families]
    if all(c is None for c in counts):
        if n_shapes is None:
            raise ValueError("n_shapes is required when the family spec has no counts")
        return [i % len(families) for i in range(n_shapes)]
    if any(c is None for c in counts):
        raise ValueError("give counts for every family or for none")
    total = sum(counts)
    if n_shapes is not None and n_shapes != total:
        raise ValueError(f"count {n_shapes} disagrees with family spec total {total}")
    left = list(counts)
    order = []
    while len(order) < total:
        for i in range(len(families)):
            if left[i] > 0:
                order.append(i)
                left[i] -= 1
    return order


def shape_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def make_shape(
    family: str,
    class_label: int,
    rng: np.random.Generator,
    n_vertices: int = DEFAULT_VERTICES,
) -> LabeledShape:
    n_parts, builder = FAMILIES[family]
    prims = builder(rng)
    perm = PERMUTATIONS[int(rng.integers(len(PERMUTATIONS)))]
    offset = rng.uniform(-0.05, 0.05, size=3)
    placed = []
    for p in prims:
        q = permute_axes(p, perm)
        placed.append(
            type(q)(q.kind, tuple(np.add(q.center, offset).tolist()), q.size, q.part_label, q.axis)
        )
    shape = build_shape(placed, class_label, n_parts, rng, n_vertices)
    shape.validate()
    return shape


def make_dataset(
    family_spec: str | list,
    n_shapes: int | None,
    seed: int,
    n_vertices: int = DEFAULT_VERTICES,
) -> list[LabeledShape]:
    """Deterministic dataset; shape ``i`` depends only on ``(seed, i)``."""
    families = parse_family_spec(family_spec)
    schedule = family_schedule(families, n_shapes)
    return [
        make_shape(families[f][0], f, shape_rng(seed, i), n_vertices)
        for i, f in enumerate(schedule)
    ]
