"""Uniform-grid marching cubes and triangle-mesh utilities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._mc_table import TRIANGLES

DEFAULT_EXTRACT_TAU = 0.2
GRID_CHUNK = 65536

# corner i -> (dx, dy, dz); bit i of the case index is corner i
_CORNERS = np.array(
    [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]
)
# edge e -> (corner at the edge's low end, axis it runs along)
_EDGES = np.array(
    [(0, 0), (1, 1), (3, 0), (0, 1), (4, 0), (5, 1), (7, 0), (4, 1), (0, 2), (1, 2), (2, 2), (3, 2)]
)

_MAX_TRI = max(len(r) for r in TRIANGLES) // 3
_TRI_TABLE = np.full((256, _MAX_TRI * 3), -1, dtype=np.int64)
for _c, _row in enumerate(TRIANGLES):
    _TRI_TABLE[_c, : len(_row)] = _row
_TRI_COUNT = np.array([len(r) // 3 for r in TRIANGLES])


@dataclass
class ExtractedMesh:
    vertices: np.ndarray  # (M, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    resolution: int
    tau: float

    def __post_init__(self):
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def empty(self) -> bool:
        return len(self.triangles) == 0


def grid_axes(bbox, resolution: int) -> list[np.ndarray]:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    return [np.linspace(lo[k], hi[k], resolution) for k in range(3)]


def grid_points(bbox, resolution: int) -> np.ndarray:
    """(R^3, 3) lattice points in C order (x slowest)."""
    ax = grid_axes(bbox, resolution)
    g = np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def cell_size(bbox, resolution: int) -> np.ndarray:
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    return (hi - lo) / (resolution - 1)


def marching_cubes(values: np.ndarray, level: float, origin, spacing) -> tuple[np.ndarray, np.ndarray]:
    """Triangulate ``{values > level}`` on a lattice; normals point toward lower values.

    Vertices are shared between neighbouring cells (one per crossed lattice
    edge), so a level set that stays off the grid boundary gives a closed
    mesh. Vertex order follows the lattice edge id, which is deterministic.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 2:
        raise ValueError(f"need a 3D grid with at least 2 samples per axis, got {v.shape}")
    nx, ny, nz = v.shape
    inside = v > level
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for i, (dx, dy, dz) in enumerate(_CORNERS):
        case |= inside[dx : nx - 1 + dx, dy : ny - 1 + dy, dz : nz - 1 + dz].astype(np.int64) << i
    cells = np.flatnonzero((case != 0) & (case != 255))
    if len(cells) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    cc = case.reshape(-1)[cells]
    ci, cj, ck = np.unravel_index(cells, case.shape)

    rows = _TRI_TABLE[cc]  # (C, 15)
    n_tri = _TRI_COUNT[cc]
    slot = np.arange(_MAX_TRI)
    cell_of_tri = np.repeat(np.arange(len(cells)), n_tri)
    tri_in_cell = np.concatenate([slot[:n] for n in n_tri]) if len(n_tri) else slot[:0]
    edges = np.stack([rows[cell_of_tri, 3 * tri_in_cell + j] for j in range(3)], axis=1)  # (T, 3)

    # global lattice-edge id: (corner grid index) * 3 + axis
    corner = _EDGES[edges, 0]
    axis = _EDGES[edges, 1]
    gi = ci[cell_of_tri][:, None] + _CORNERS[corner, 0]
    gj = cj[cell_of_tri][:, None] + _CORNERS[corner, 1]
    gk = ck[cell_of_tri][:, None] + _CORNERS[corner, 2]
    gid = ((gi * ny + gj) * nz + gk) * 3 + axis
    uniq, inv = np.unique(gid.reshape(-1), return_inverse=True)
    tris = inv.reshape(-1, 3)

    ax = uniq % 3
    flat = uniq // 3
    a_idx = np.stack(np.unravel_index(flat, v.shape), axis=1)
    b_idx = a_idx.copy()
    b_idx[np.arange(len(uniq)), ax] += 1
    fa = v[a_idx[:, 0], a_idx[:, 1], a_idx[:, 2]]
    fb = v[b_idx[:, 0], b_idx[:, 1], b_idx[:, 2]]
    t = (level - fa) / (fb - fa)
    pos = a_idx + t[:, None] * (b_idx - a_idx)
    verts = np.asarray(origin, dtype=np.float64) + pos * np.asarray(spacing, dtype=np.float64)
    # the table winds triangles with normals toward the inside set; flip to outward
    return verts, tris[:, ::-1].copy()


def extract_mesh(prob_fn, bbox, resolution: int = 64, tau: float = DEFAULT_EXTRACT_TAU) -> ExtractedMesh:
    """Level set ``prob = tau`` of an occupancy-probability field on an R^3 grid."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    pts = grid_points(bbox, resolution)
    vals = np.concatenate([np.asarray(prob_fn(pts[s : s + GRID_CHUNK]), dtype=np.float64)
                           for s in range(0, len(pts), GRID_CHUNK)])
    vals = vals.reshape((resolution,) * 3)
    verts, tris = marching_cubes(vals, tau, np.asarray(bbox[0], dtype=np.float64), cell_size(bbox, resolution))
    return ExtractedMesh(verts, tris, resolution, tau)


# -- mesh helpers ------------------------------------------------------------


def edge_counts(triangles: np.ndarray) -> np.ndarray:
    """Number of triangles sharing each undirected edge."""
    t = np.asarray(triangles)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def is_watertight(triangles: np.ndarray) -> bool:
    return len(triangles) > 0 and bool(np.all(edge_counts(triangles) == 2))


def is_consistently_oriented(triangles: np.ndarray) -> bool:
    """Every directed edge appears at most once (neighbours traverse shared edges oppositely)."""
    t = np.asarray(triangles)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    return len(np.unique(e, axis=0)) == len(e)


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def signed_volume(vertices: np.ndarray, triangles: np.ndarray) -> float:
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted unit normals; outward for outward-wound meshes."""
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    fn = np.cross(b - a, c - a)  # length = 2 * area
    n = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(n, triangles[:, k], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def sample_mesh_surface(vertices: np.ndarray, triangles: np.ndarray, n: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Uniform area-weighted points on a triangle mesh."""
    if len(triangles) == 0:
        raise ValueError("cannot sample an empty mesh")
    areas = triangle_areas(vertices, triangles)
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    face = rng.choice(len(triangles), size=n, p=areas / total)
    u, w = rng.random(n), rng.random(n)
    flip = u + w > 1.0
    u[flip], w[flip] = 1.0 - u[flip], 1.0 - w[flip]
    a, b, c = (vertices[triangles[face, k]] for k in range(3))
    return a + u[:, None] * (b - a) + w[:, None] * (c - a)
