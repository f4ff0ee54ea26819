import json

import numpy as np
import pytest

from multitask_inr.geometry import sample_batch
from multitask_inr.geometry.io import (
    FormatError,
    decode_occs,
    encode_occs,
    labels_path,
    read_labels,
    read_manifest,
    read_occs,
    read_off,
    write_manifest,
    write_occs,
    write_off,
)


def test_occs_write_read_write_is_byte_identical(tmp_path, small_dataset):
    batch = sample_batch(small_dataset[3], 333, rng_seed=4)
    p1, p2 = tmp_path / "a.occs", tmp_path / "b.occs"
    write_occs(p1, batch)
    back = read_occs(p1)
    assert back == batch
    write_occs(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_occs_layout(small_dataset):
    batch = sample_batch(small_dataset[1], 5, rng_seed=0)
    buf = encode_occs(batch)
    assert buf[:4] == b"OCCS"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert int.from_bytes(buf[8:12], "little") == 5
    assert int.from_bytes(buf[12:16], "little") == batch.class_label
    assert len(buf) == 16 + 5 * 12 + 5 + 5 * 2 + 300 * 12
    assert np.array_equal(np.frombuffer(buf[16:76], "<f4").reshape(5, 3), batch.query_points)


@pytest.mark.parametrize("mutate", [
    lambda b: b"XCCS" + b[4:],
    lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
    lambda b: b[:-1],
    lambda b: b[:10],
])
def test_occs_rejects_corrupt_files(small_dataset, mutate):
    buf = encode_occs(sample_batch(small_dataset[0], 7, rng_seed=0))
    with pytest.raises(FormatError):
        decode_occs(mutate(buf))


def test_off_round_trip_counts_and_labels(tmp_path):
    verts = np.random.default_rng(0).random((7, 3))
    faces = np.array([[0, 1, 2], [2, 3, 4], [4, 5, 6]])
    labels = np.array([0, 1, 2, 0, 1, 2, 0])
    path = tmp_path / "m.off"
    write_off(path, verts, faces, labels)
    v, f = read_off(path)
    assert v.shape == (7, 3) and np.array_equal(f, faces)
    assert np.allclose(v, verts, atol=1e-6)
    assert labels_path(path).endswith("m.labels")
    assert np.array_equal(read_labels(labels_path(path)), labels)


def test_off_rejects_missing_header_and_label_mismatch(tmp_path):
    bad = tmp_path / "bad.off"
    bad.write_text("3 1 0\n0 0 0\n")
    with pytest.raises(FormatError):
        read_off(bad)
    with pytest.raises(FormatError):
        write_off(tmp_path / "x.off", np.zeros((3, 3)), np.array([[0, 1, 2]]), np.array([0, 1]))


def test_manifest_round_trip_and_validation(tmp_path):
    path = tmp_path / "manifest.json"
    shapes = [{"id": "00000", "class_label": 0, "sample_file": "samples/00000.occs"}]
    write_manifest(path, [["dumbbell", None], ["table", None]], 3, shapes, count=1)
    doc = read_manifest(path)
    assert doc["seed"] == 3 and doc["shapes"] == shapes and doc["count"] == 1
    del doc["shapes"][0]["sample_file"]
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        read_manifest(path)
