"""File formats: OCCS sample batches, ASCII OFF meshes, dataset manifests."""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .sampling import N_INPUT_POINTS, SampleBatch

OCCS_MAGIC = b"OCCS"
OCCS_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


def encode_occs(batch: SampleBatch) -> bytes:
    n = len(batch.query_points)
    if batch.input_cloud.shape != (N_INPUT_POINTS, 3):
        raise FormatError(f"input cloud must be {N_INPUT_POINTS}x3, got {batch.input_cloud.shape}")
    return b"".join(
        [
            _HEADER.pack(OCCS_MAGIC, OCCS_VERSION, n, int(batch.class_label)),
            np.ascontiguousarray(batch.query_points, dtype="<f4").tobytes(),
            np.ascontiguousarray(batch.gt_occupancy, dtype=np.uint8).tobytes(),
            np.ascontiguousarray(batch.gt_part_label, dtype="<u2").tobytes(),
            np.ascontiguousarray(batch.input_cloud, dtype="<f4").tobytes(),
        ]
    )


def decode_occs(buf: bytes) -> SampleBatch:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated OCCS header")
    magic, version, n, cls = _HEADER.unpack_from(buf, 0)
    if magic != OCCS_MAGIC:
        raise FormatError(f"bad OCCS magic {magic!r}")
    if version != OCCS_VERSION:
        raise FormatError(f"unsupported OCCS version {version}")
    expected = _HEADER.size + n * 12 + n + n * 2 + N_INPUT_POINTS * 12
    if len(buf) != expected:
        raise FormatError(f"OCCS size {len(buf)} != expected {expected}")
    off = _HEADER.size
    q = np.frombuffer(buf, "<f4", n * 3, off).reshape(n, 3).astype(np.float32)
    off += n * 12
    occ = np.frombuffer(buf, np.uint8, n, off).astype(bool)
    off += n
    labels = np.frombuffer(buf, "<u2", n, off).astype(np.uint16)
    off += n * 2
    cloud = np.frombuffer(buf, "<f4", N_INPUT_POINTS * 3, off).reshape(-1, 3).astype(np.float32)
    return SampleBatch(q, occ, labels, cloud, int(cls))


def write_occs(path: str | os.PathLike, batch: SampleBatch) -> None:
    with open(path, "wb") as f:
        f.write(encode_occs(batch))


def read_occs(path: str | os.PathLike) -> SampleBatch:
    with open(path, "rb") as f:
        return decode_occs(f.read())


# -- OFF --------------------------------------------------------------------


def write_off(path, vertices: np.ndarray, faces: np.ndarray, labels: np.ndarray | None = None) -> None:
    """ASCII OFF; with ``labels`` also writes ``<path minus .off>.labels``."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    lines = ["OFF", f"{len(vertices)} {len(faces)} 0"]
    lines += [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in vertices]
    lines += [f"3 {i} {j} {k}" for i, j, k in faces]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    if labels is not None:
        labels = np.asarray(labels).reshape(-1)
        if len(labels) != len(vertices):
            raise FormatError("one label per vertex required")
        with open(labels_path(path), "w") as f:
            f.write("".join(f"{int(v)}\n" for v in labels))


def labels_path(off_path) -> str:
    root, ext = os.path.splitext(os.fspath(off_path))
    return root + ".labels" if ext.lower() == ".off" else os.fspath(off_path) + ".labels"


def read_off(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as f:
        tokens = [ln.split("#", 1)[0].strip() for ln in f]
    tokens = [t for t in tokens if t]
    if not tokens or not tokens[0].startswith("OFF"):
        raise FormatError(f"{path}: missing OFF header")
    head = tokens[0][3:].split()
    rest = tokens[1:]
    if not head:
        head, rest = rest[0].split(), rest[1:]
    nv, nf = int(head[0]), int(head[1])
    if len(rest) < nv + nf:
        raise FormatError(f"{path}: expected {nv} vertices and {nf} faces")
    verts = np.array([[float(x) for x in ln.split()[:3]] for ln in rest[:nv]]).reshape(nv, 3)
    faces = []
    for ln in rest[nv : nv + nf]:
        parts = [int(x) for x in ln.split()]
        if parts[0] != 3:
            raise FormatError(f"{path}: only triangle faces are supported")
        faces.append(parts[1:4])
    return verts, np.array(faces, dtype=np.int64).reshape(nf, 3)


def read_labels(path) -> np.ndarray:
    with open(path) as f:
        return np.array([int(ln) for ln in f if ln.strip()], dtype=np.int64)


# -- manifest ---------------------------------------------------------------


def write_manifest(path, families: list, seed: int, shapes: list[dict], **extra) -> None:
    doc = {"families": families, "seed": seed, "shapes": shapes, **extra}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path) -> dict:
    with open(path) as f:
        doc = json.load(f)
    for key in ("families", "seed", "shapes"):
        if key not in doc:
            raise FormatError(f"{path}: manifest lacks {key!r}")
    for entry in doc["shapes"]:
        for key in ("id", "class_label", "sample_file"):
            if key not in entry:
                raise FormatError(f"{path}: shape entry lacks {key!r}")
    return doc
