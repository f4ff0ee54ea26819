import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from multitask_inr.geometry import (
    FAMILIES,
    LabeledShape,
    MalformedShapeError,
    Primitive,
    build_shape,
    make_dataset,
    make_shape,
    nearest_vertex_label,
    nearest_vertex_label_bruteforce,
    occupancy,
    parse_family_spec,
    sample_batch,
    sdf,
    sdf_gradient,
)
from multitask_inr.geometry.families import family_schedule
from multitask_inr.geometry.shapes import SURFACE_EPS, default_pad

coords = st.floats(-1.0, 1.0, allow_nan=False)
point = st.tuples(coords, coords, coords).map(np.array)


def _sphere_shape(r=0.5, n=512, seed=0):
    return build_shape([Primitive("sphere", (0.0, 0.0, 0.0), (r,), 0)], 0, 1,
                       np.random.default_rng(seed), n)


# -- primitives ----------------------------------------------------------------


@given(point)
def test_sphere_sdf_closed_form(p):
    prim = Primitive("sphere", (0.1, -0.2, 0.3), (0.4,))
    assert prim.sdf(p) == pytest.approx(np.linalg.norm(p - [0.1, -0.2, 0.3]) - 0.4, abs=1e-12)


def test_box_sdf_hand_values():
    box = Primitive("box", (0.0, 0.0, 0.0), (1.0, 2.0, 3.0))
    assert box.sdf(np.array([0.0, 0.0, 0.0])) == pytest.approx(-1.0)
    assert box.sdf(np.array([2.0, 0.0, 0.0])) == pytest.approx(1.0)
    # outside a corner: euclidean distance to the corner
    assert box.sdf(np.array([2.0, 3.0, 4.0])) == pytest.approx(math.sqrt(3.0))
    assert box.sdf(np.array([0.5, 1.9, 0.0])) == pytest.approx(-0.1)


def test_cylinder_and_capsule_sdf_hand_values():
    cyl = Primitive("cylinder", (0.0, 0.0, 0.0), (0.5, 1.0), axis=0)
    assert cyl.sdf(np.array([0.0, 0.0, 0.0])) == pytest.approx(-0.5)
    assert cyl.sdf(np.array([0.0, 1.5, 0.0])) == pytest.approx(1.0)
    assert cyl.sdf(np.array([2.0, 0.0, 0.0])) == pytest.approx(1.0)
    assert cyl.sdf(np.array([2.0, 0.0, 1.5])) == pytest.approx(math.sqrt(2.0))
    cap = Primitive("capsule", (0.0, 0.0, 0.0), (0.5, 1.0), axis=2)
    assert cap.sdf(np.array([0.0, 0.0, 2.0])) == pytest.approx(0.5)
    assert cap.sdf(np.array([1.0, 0.0, 0.3])) == pytest.approx(0.5)


@pytest.mark.parametrize("kind,size,axis", [
    ("sphere", (0.4,), 2), ("box", (0.3, 0.2, 0.1), 2),
    ("cylinder", (0.2, 0.4), 1), ("capsule", (0.15, 0.3), 0),
])
def test_primitive_surface_samples_lie_on_surface(kind, size, axis):
    prim = Primitive(kind, (0.1, 0.2, -0.3), size, axis=axis)
    pts = prim.sample_surface(2000, np.random.default_rng(1))
    assert np.abs(prim.sdf(pts)).max() < 1e-9
    lo, hi = prim.bbox()
    assert np.all(pts >= lo - 1e-12) and np.all(pts <= hi + 1e-12)


@pytest.mark.parametrize("kind,size,axis", [
    ("sphere", (0.4,), 2), ("box", (0.3, 0.2, 0.1), 2),
    ("cylinder", (0.2, 0.4), 1), ("capsule", (0.15, 0.3), 0),
])
def test_primitive_volume_matches_monte_carlo(kind, size, axis):
    prim = Primitive(kind, (0.0, 0.0, 0.0), size, axis=axis)
    lo, hi = prim.bbox()
    n = 200_000
    pts = lo + np.random.default_rng(2).random((n, 3)) * (hi - lo)
    frac = np.mean(prim.sdf(pts) < 0)
    expected = prim.volume() / np.prod(hi - lo)
    assert abs(frac - expected) <= 4 * math.sqrt(expected * (1 - expected) / n) + 1e-12


@pytest.mark.parametrize("bad", [
    dict(kind="blob", size=(1.0,)), dict(kind="sphere", size=(1.0, 2.0)),
    dict(kind="sphere", size=(-1.0,)), dict(kind="box", size=(1.0, 1.0, 1.0), axis=3),
])
def test_primitive_rejects_bad_parameters(bad):
    with pytest.raises(ValueError):
        Primitive(center=(0.0, 0.0, 0.0), **bad)


def test_primitive_dict_round_trip():
    prim = Primitive("capsule", (0.1, 0.2, 0.3), (0.1, 0.2), 2, axis=1)
    assert Primitive.from_dict(prim.to_dict()) == prim


# -- shapes ------------------------------------------------------------------------


def test_union_sdf_is_min_of_members():
    a = Primitive("sphere", (-0.3, 0.0, 0.0), (0.3,), 0)
    b = Primitive("box", (0.3, 0.0, 0.0), (0.2, 0.2, 0.2), 1)
    shape = build_shape([a, b], 0, 2, np.random.default_rng(0), 256)
    pts = np.random.default_rng(1).uniform(-1, 1, (500, 3))
    assert np.array_equal(sdf(shape, pts), np.minimum(a.sdf(pts), b.sdf(pts)))


def test_two_sphere_union_matches_dense_surface_oracle():
    a = Primitive("sphere", (-0.4, 0.0, 0.0), (0.25,), 0)
    b = Primitive("sphere", (0.4, 0.0, 0.0), (0.3,), 1)
    shape = build_shape([a, b], 0, 2, np.random.default_rng(0), 256)
    rng = np.random.default_rng(2)
    # 10^6 points on the union boundary (the spheres are disjoint, so both full spheres)
    dirs = rng.standard_normal((1_000_000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    half = len(dirs) // 2
    surf = np.concatenate([dirs[:half] * 0.25 + a.center, dirs[half:] * 0.3 + b.center])
    from scipy.spatial import cKDTree

    tree = cKDTree(surf)
    q = np.column_stack([rng.uniform(-0.15, 0.1, 50), rng.uniform(-0.1, 0.1, 50), rng.uniform(-0.1, 0.1, 50)])
    dist, _ = tree.query(q)
    inside = (np.linalg.norm(q - a.center, axis=1) < 0.25) | (np.linalg.norm(q - b.center, axis=1) < 0.3)
    oracle = np.where(inside, -dist, dist)
    got = sdf(shape, q)
    assert np.array_equal(got, np.minimum(a.sdf(q), b.sdf(q)))
    # sampling can only overestimate the distance, by about the sample spacing
    assert np.all(oracle - got >= -1e-12)
    assert np.max(oracle - got) < 2e-3


def _inside_direct(prim: Primitive, p: np.ndarray) -> np.ndarray:
    """Per-kind inside test written without any sdf."""
    q = p - np.asarray(prim.center)
    if prim.kind == "sphere":
        return np.sum(q * q, axis=1) < prim.size[0] ** 2
    if prim.kind == "box":
        return np.all(np.abs(q) < np.asarray(prim.size), axis=1)
    r, h = prim.size
    along = q[:, prim.axis]
    radial2 = np.sum(q * q, axis=1) - along**2
    if prim.kind == "cylinder":
        return (radial2 < r * r) & (np.abs(along) < h)
    t = np.clip(along, -h, h)
    return radial2 + (along - t) ** 2 < r * r


@pytest.mark.parametrize("family", sorted(FAMILIES))
def test_occupancy_equals_disjunction_of_primitive_inside_tests(family):
    shape = make_shape(family, 0, np.random.default_rng(11), 256)
    lo, hi = shape.padded_bbox()
    pts = np.random.default_rng(12).uniform(lo, hi, (10_000, 3))
    direct = np.zeros(len(pts), dtype=bool)
    for prim in shape.primitives:
        direct |= _inside_direct(prim, pts)
    assert np.array_equal(occupancy(shape, pts), direct)


def test_occupancy_trivial_points():
    shape = _sphere_shape()
    assert occupancy(shape, np.zeros((1, 3)))[0]
    assert not occupancy(shape, np.array([[2.0, 2.0, 2.0]]))[0]


def test_box_sdf_gradient_matches_analytic_exterior_gradient():
    box = Primitive("box", (0.1, -0.2, 0.0), (0.3, 0.2, 0.4), 0)
    shape = build_shape([box], 0, 1, np.random.default_rng(0), 256)
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1.5, 1.5, (400, 3))
    c, h = np.asarray(box.center), np.asarray(box.size)
    q = pts - c
    excess = np.abs(q) - h
    pts, q, excess = pts[excess.max(axis=1) > 0.05], q[excess.max(axis=1) > 0.05], excess[excess.max(axis=1) > 0.05]
    # outside: gradient points from the closest box point to p
    closest = np.clip(q, -h, h)
    want = (q - closest) / np.linalg.norm(q - closest, axis=1, keepdims=True)
    # skip points within a step of the face-region boundaries, where the gradient is not smooth
    ok = np.all((np.abs(excess) > 1e-3), axis=1)
    assert np.allclose(sdf_gradient(shape, pts[ok]), want[ok], atol=1e-4)


def test_occupancy_is_sigmoid_threshold_of_sdf(small_dataset):
    for shape in small_dataset:
        lo, hi = shape.padded_bbox()
        pts = np.random.default_rng(3).uniform(lo, hi, (5000, 3))
        s = sdf(shape, pts)
        keep = np.abs(s) > 1e-6
        sig = 1.0 / (1.0 + np.exp(s[keep]))
        occ = occupancy(shape, pts[keep])
        assert np.array_equal(occ, sig > 0.5)
        assert np.array_equal(occ, s[keep] < 0)


def test_occupancy_with_other_threshold_shrinks_interior():
    shape = _sphere_shape()
    pts = np.random.default_rng(4).uniform(-1, 1, (5000, 3))
    inner = occupancy(shape, pts, tau=0.9)
    s = sdf(shape, pts)
    assert np.array_equal(inner, 1.0 / (1.0 + np.exp(s)) > 0.9)
    assert inner.sum() < occupancy(shape, pts).sum()


@given(point.filter(lambda p: np.linalg.norm(p) > 1e-2))
def test_sdf_gradient_of_sphere_is_radial(p):
    g = sdf_gradient(_sphere_shape(n=64), p)
    assert np.allclose(g, p / np.linalg.norm(p), atol=1e-6)


def test_sdf_gradient_has_unit_norm_almost_everywhere(small_dataset):
    shape = small_dataset[1]
    lo, hi = shape.padded_bbox()
    pts = np.random.default_rng(5).uniform(lo, hi, (2000, 3))
    norms = np.linalg.norm(sdf_gradient(shape, pts), axis=1)
    # the union sdf is only a bound outside where members overlap, and kinks on medial sets
    assert np.mean(np.abs(norms - 1.0) < 1e-3) > 0.95


def test_surface_vertices_are_on_surface_and_cover_parts(small_dataset):
    for shape in small_dataset:
        assert np.abs(sdf(shape, shape.surface_vertices)).max() < SURFACE_EPS
        present = {p.part_label for p in shape.primitives}
        assert present == set(np.unique(shape.vertex_labels).tolist())


def test_validate_rejects_off_surface_vertex():
    shape = _sphere_shape(n=64)
    bad = LabeledShape(0, 1, shape.primitives, shape.surface_vertices * 1.1, shape.vertex_labels)
    with pytest.raises(MalformedShapeError):
        bad.validate()


def test_validate_rejects_part_label_out_of_schema():
    prim = Primitive("sphere", (0.0, 0.0, 0.0), (0.5,), 2)
    shape = build_shape([prim], 0, 2, np.random.default_rng(0), 64)
    with pytest.raises(MalformedShapeError):
        shape.validate()


def test_padded_bbox_uses_tenth_of_diagonal():
    shape = _sphere_shape(r=0.5)
    lo, hi = shape.padded_bbox()
    pad = 0.1 * math.sqrt(3.0)
    assert default_pad(shape) == pytest.approx(pad)
    assert np.allclose(lo, -0.5 - pad) and np.allclose(hi, 0.5 + pad)


# -- labeling ----------------------------------------------------------------------


@given(st.lists(point, min_size=1, max_size=30), st.integers(0, 8))
def test_nearest_vertex_label_equals_bruteforce(pts, which):
    shapes = make_dataset("dumbbell,table,cross", 9, 7, n_vertices=256)
    shape = shapes[which]
    pts = np.array(pts) * 0.6
    assert np.array_equal(nearest_vertex_label(shape, pts), nearest_vertex_label_bruteforce(shape, pts))


def test_nearest_vertex_ties_go_to_lowest_index():
    base = _sphere_shape(n=32)
    verts = np.concatenate([base.surface_vertices, base.surface_vertices])
    labels = np.concatenate([np.zeros(32, dtype=np.int64), np.ones(32, dtype=np.int64)])
    shape = LabeledShape(0, 2, base.primitives, verts, labels)
    q = base.surface_vertices * 0.9
    assert np.all(nearest_vertex_label(shape, q) == 0)
    assert np.all(nearest_vertex_label_bruteforce(shape, q) == 0)


def test_single_part_shape_labels_everything_zero():
    shape = make_shape("spheres", 0, np.random.default_rng(4), 512)
    lo, hi = shape.bbox
    pts = np.random.default_rng(5).uniform(lo, hi, (3000, 3))
    pts = pts[occupancy(shape, pts)]
    assert len(pts) > 0 and np.all(nearest_vertex_label(shape, pts) == 0)


def test_dumbbell_first_sphere_centre_is_part_zero():
    shape = make_shape("dumbbell", 0, np.random.default_rng(6))
    centre = np.array([p.center for p in shape.primitives if p.part_label == 0][0])
    assert nearest_vertex_label(shape, centre[None])[0] == 0
    assert nearest_vertex_label_bruteforce(shape, centre[None])[0] == 0


def test_nearest_vertex_on_a_vertex_returns_its_label(small_dataset):
    shape = small_dataset[0]
    idx = np.arange(0, len(shape.surface_vertices), 97)
    assert np.array_equal(nearest_vertex_label(shape, shape.surface_vertices[idx]),
                          shape.vertex_labels[idx])


# -- families & datasets ---------------------------------------------------------------


def test_parse_family_spec():
    assert parse_family_spec("dumbbell,table:3") == [("dumbbell", None), ("table", 3)]
    for bad in ("dumbbell", "dumbbell,nope", "dumbbell,table:x", "table,table"):
        with pytest.raises(ValueError):
            parse_family_spec(bad)


def test_family_schedule_round_robin_and_counts():
    assert family_schedule([("a", None), ("b", None)], 5) == [0, 1, 0, 1, 0]
    assert family_schedule([("a", 1), ("b", 3)], None) == [0, 1, 1, 1]
    with pytest.raises(ValueError):
        family_schedule([("a", 1), ("b", 3)], 7)


@pytest.mark.parametrize("family", sorted(FAMILIES))
def test_every_family_builds_valid_shapes(family):
    for i in range(5):
        shape = make_shape(family, 0, np.random.default_rng([9, i]), 512)
        assert shape.n_parts == FAMILIES[family][0]
        assert len(np.unique(shape.vertex_labels)) == shape.n_parts


def test_dataset_is_deterministic_and_index_local():
    a = make_dataset("dumbbell,table,cross", 6, 5, n_vertices=256)
    b = make_dataset("dumbbell,table,cross", 6, 5, n_vertices=256)
    c = make_dataset("dumbbell,table,cross", 4, 5, n_vertices=256)
    for x, y in zip(a, b):
        assert x.to_dict() == y.to_dict()
        assert np.array_equal(x.surface_vertices, y.surface_vertices)
    for x, y in zip(a, c):
        assert x.to_dict() == y.to_dict()
    assert [s.class_label for s in a] == [0, 1, 2, 0, 1, 2]


def test_two_seeds_give_distinct_shapes():
    a = make_dataset("dumbbell,table,cross", 6, 1, n_vertices=128)
    b = make_dataset("dumbbell,table,cross", 6, 2, n_vertices=128)
    assert all(x.to_dict() != y.to_dict() for x, y in zip(a, b))


# -- sampling -----------------------------------------------------------------------


def test_sample_batch_reproducible_and_consistent(small_dataset):
    shape = small_dataset[4]
    a = sample_batch(shape, 700, rng_seed=11)
    b = sample_batch(shape, 700, rng_seed=11)
    assert a == b
    assert a != sample_batch(shape, 700, rng_seed=12)
    lo, hi = shape.padded_bbox()
    q = a.query_points.astype(np.float64)
    assert np.all(q >= lo - 1e-6) and np.all(q <= hi + 1e-6)
    assert np.array_equal(a.gt_occupancy, occupancy(shape, q))
    inside = a.gt_occupancy
    assert np.array_equal(a.gt_part_label[inside], nearest_vertex_label_bruteforce(shape, q[inside]))
    assert np.all(a.gt_part_label[~inside] == 0)
    assert a.input_cloud.shape == (300, 3) and a.input_cloud.dtype == np.float32


def test_noise_free_cloud_lies_on_surface(small_dataset):
    shape = small_dataset[2]
    batch = sample_batch(shape, 10, noise_sigma=0.0, rng_seed=1)
    assert np.abs(sdf(shape, batch.input_cloud.astype(np.float64))).max() < SURFACE_EPS


def test_noise_has_requested_spread(small_dataset):
    shape = small_dataset[0]
    rng = np.random.default_rng(0)
    from multitask_inr.geometry import input_cloud
    clean = input_cloud(shape, np.random.default_rng(5), 0.0, 20000)
    noisy = input_cloud(shape, np.random.default_rng(5), 0.05, 20000)
    del rng
    # same surface draws, so the difference is exactly the added noise (up to float32 rounding)
    assert np.std(noisy.astype(np.float64) - clean) == pytest.approx(0.05, rel=0.02)


def test_zero_pad_occupied_fraction_matches_volume_ratio():
    shape = _sphere_shape(r=0.5)
    n = 40000
    batch = sample_batch(shape, n, pad=0.0, rng_seed=3)
    p = math.pi / 6.0  # sphere volume over its bounding cube
    assert abs(batch.gt_occupancy.mean() - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_sample_batch_rejects_bad_arguments(small_dataset):
    with pytest.raises(ValueError):
        sample_batch(small_dataset[0], 0)
    with pytest.raises(ValueError):
        sample_batch(small_dataset[0], 10, pad=-0.1)
