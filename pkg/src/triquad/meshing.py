"""Grid evaluation of a learned SDF and marching-cubes extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ply
from ._mc_tables import CORNERS, EDGES, TRI_TABLE
from .errors import CorruptMagic, FormatError, TruncatedFile, UnsupportedElement, VersionMismatch

_MASK_MAGIC = b"3QFM"
_MASK_VERSION = 1
_BIAS = 1 << 20


def _pack(cells: np.ndarray) -> np.ndarray:
    c = np.asarray(cells, dtype=np.int64) + _BIAS
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


_NEIGHBOURS = np.array(
    [(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64
)


class OccupancyMask:
    """Coarse voxel cells touched by training samples, dilated at query time.

    ``cells`` are integer indices ``floor(p / cell_size)``.
    """

    def __init__(self, cell_size: float, cells=None, dilation: int = 1):
        self.cell_size = float(cell_size)
        cells = np.zeros((0, 3), dtype=np.int64) if cells is None else np.asarray(cells, dtype=np.int64)
        self.cells = np.unique(cells.reshape(-1, 3), axis=0)
        self.dilation = dilation
        dil = self.cells
        for _ in range(dilation):
            dil = np.unique((dil[:, None, :] + _NEIGHBOURS[None]).reshape(-1, 3), axis=0)
        self.dilated = dil
        self._keys = np.sort(_pack(dil)) if len(dil) else np.zeros(0, dtype=np.int64)

    @classmethod
    def from_points(cls, points, cell_size: float, dilation: int = 1) -> OccupancyMask:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(cell_size, np.floor(points / cell_size).astype(np.int64), dilation)

    def __len__(self) -> int:
        return len(self.cells)

    def contains_cells(self, cells) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        if self._keys.size == 0:
            return np.zeros(len(cells), dtype=bool)
        keys = _pack(cells)
        pos = np.minimum(np.searchsorted(self._keys, keys), self._keys.size - 1)
        return self._keys[pos] == keys

    def contains(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return self.contains_cells(np.floor(points / self.cell_size).astype(np.int64))

    def bounds(self):
        """World-space corners of the box around the dilated cells."""
        lo = self.dilated.min(axis=0) * self.cell_size
        hi = (self.dilated.max(axis=0) + 1) * self.cell_size
        return lo, hi

    def save(self, path) -> None:
        head = _MASK_MAGIC + struct.pack("<IdIQ", _MASK_VERSION, self.cell_size, self.dilation, len(self.cells))
        Path(path).write_bytes(head + self.cells.astype("<i8").tobytes())

    @classmethod
    def load(cls, path) -> OccupancyMask:
        data = Path(path).read_bytes()
        if data[:4] != _MASK_MAGIC:
            raise CorruptMagic("not an occupancy mask file", offset=0)
        if len(data) < 28:
            raise TruncatedFile("mask header truncated", offset=len(data))
        version, cell, dilation, n = struct.unpack_from("<IdIQ", data, 4)
        if version != _MASK_VERSION:
            raise VersionMismatch(f"mask version {version}", offset=4)
        if len(data) != 28 + 24 * n:
            raise TruncatedFile(f"mask declares {n} cells, size is {len(data)} bytes", offset=28)
        cells = np.frombuffer(data, dtype="<i8", offset=28).reshape(n, 3)
        return cls(cell, cells, dilation)


@dataclass
class SdfGrid:
    origin: np.ndarray
    resolution: float
    values: np.ndarray
    valid: np.ndarray

    @property
    def dims(self):
        return self.values.shape

    def points(self) -> np.ndarray:
        nx, ny, nz = self.dims
        idx = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), axis=-1)
        return self.origin + idx.reshape(-1, 3) * self.resolution


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.triangles)

    def triangle_corners(self) -> np.ndarray:
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        a, b, c = np.moveaxis(self.triangle_corners(), 1, 0)
        n = np.cross(b - a, c - a)
        if normalize:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n


def evaluate_sdf_grid(model, mask: OccupancyMask, resolution: float = 0.1,
                      chunk: int = 65536) -> SdfGrid:
    """Sample ``model`` on a lattice of spacing ``resolution`` over the mask.

    Lattice points sit at integer multiples of ``resolution``. A point is
    valid iff its coarse cell is in the dilated mask and the model returns
    a finite value there (models report out-of-extent points as NaN).
    """
    if len(mask) == 0:
        return SdfGrid(np.zeros(3), resolution, np.zeros((0, 0, 0)), np.zeros((0, 0, 0), dtype=bool))
    lo, hi = mask.bounds()
    i0 = np.floor(lo / resolution + 1e-9).astype(np.int64)
    i1 = np.ceil(hi / resolution - 1e-9).astype(np.int64)
    dims = tuple(int(x) for x in i1 - i0 + 1)
    idx = np.stack(np.meshgrid(*(np.arange(a, b + 1) for a, b in zip(i0, i1)), indexing="ij"), axis=-1)
    idx = idx.reshape(-1, 3)
    ratio = mask.cell_size / resolution
    if abs(ratio - round(ratio)) < 1e-9:
        coarse = np.floor_divide(idx, int(round(ratio)))
    else:
        coarse = np.floor(idx * resolution / mask.cell_size).astype(np.int64)
    valid = mask.contains_cells(coarse)
    values = np.full(idx.shape[0], np.nan)
    pts_valid = np.flatnonzero(valid)
    pts = i0 * resolution + (idx[pts_valid] - i0) * resolution      # same arithmetic as SdfGrid.points
    for lo_i in range(0, pts_valid.size, chunk):
        sl = slice(lo_i, lo_i + chunk)
        values[pts_valid[sl]] = model(pts[sl])
    valid &= np.isfinite(values)
    values[~valid] = 0.0
    return SdfGrid(i0 * resolution, resolution, values.reshape(dims), valid.reshape(dims))


# edge e of the cell at (i, j, k) starts at lattice point (i, j, k) + _EDGE_START[e]
# and runs along axis _EDGE_AXIS[e]
_CORNERS = np.array(CORNERS, dtype=np.int64)
_EDGE_START = np.array([np.minimum(_CORNERS[a], _CORNERS[b]) for a, b in EDGES])
_EDGE_AXIS = np.array([int(np.argmax(np.abs(_CORNERS[a] - _CORNERS[b]))) for a, b in EDGES])
_TRIS = [np.array(t, dtype=np.int64).reshape(-1, 3)[:, ::-1] for t in TRI_TABLE]


def marching_cubes(grid: SdfGrid, iso: float = 0.0) -> TriangleMesh:
    """Triangulate the ``iso`` level set over cells whose 8 corners are valid.

    Vertices are shared between neighbouring cells (one per crossed lattice
    edge, ordered by edge id) and triangle normals point towards increasing
    field values. Triangles are emitted in cell-index order.
    """
    f = np.asarray(grid.values, dtype=np.float64)
    if min(f.shape, default=0) < 2:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    nx, ny, nz = f.shape
    sx, sy, sz = nx - 1, ny - 1, nz - 1
    below = f < iso
    case = np.zeros((sx, sy, sz), dtype=np.int64)
    all_valid = np.ones((sx, sy, sz), dtype=bool)
    for bit, (di, dj, dk) in enumerate(CORNERS):
        sl = (slice(di, di + sx), slice(dj, dj + sy), slice(dk, dk + sz))
        case |= below[sl].astype(np.int64) << bit
        all_valid &= grid.valid[sl]
    active = all_valid & (case != 0) & (case != 255)
    cell_ids = np.flatnonzero(active)
    if cell_ids.size == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cases = case.ravel()[cell_ids]
    ci, cj, ck = np.unravel_index(cell_ids, (sx, sy, sz))

    tri_edges, tri_cell, tri_local = [], [], []
    for c in np.unique(cases):
        tris = _TRIS[c]
        sel = np.flatnonzero(cases == c)
        # global edge id = ((i * ny + j) * nz + k) * 3 + axis
        start = np.stack([ci[sel], cj[sel], ck[sel]], axis=1)[:, None, None, :] + _EDGE_START[tris]
        lin = (start[..., 0] * ny + start[..., 1]) * nz + start[..., 2]
        tri_edges.append((lin * 3 + _EDGE_AXIS[tris]).reshape(-1, 3))
        tri_cell.append(np.repeat(cell_ids[sel], len(tris)))
        tri_local.append(np.tile(np.arange(len(tris)), sel.size))
    edges = np.concatenate(tri_edges)
    order = np.lexsort((np.concatenate(tri_local), np.concatenate(tri_cell)))
    edges = edges[order]

    uniq, inverse = np.unique(edges.ravel(), return_inverse=True)
    axis = uniq % 3
    lin = uniq // 3
    a_idx = np.stack(np.unravel_index(lin, (nx, ny, nz)), axis=1)
    b_idx = a_idx.copy()
    b_idx[np.arange(len(axis)), axis] += 1
    fa = f[tuple(a_idx.T)]
    fb = f[tuple(b_idx.T)]
    t = (iso - fa) / (fb - fa)
    verts = grid.origin + (a_idx + t[:, None] * (b_idx - a_idx)) * grid.resolution
    return TriangleMesh(verts, inverse.reshape(-1, 3))


def export_mesh_ply(mesh: TriangleMesh, path) -> None:
    ply.write_ply(path, mesh.vertices, mesh.triangles)


def import_mesh_ply(path) -> TriangleMesh:
    data = Path(path).read_bytes()
    header = ply.parse_header(data)
    for el in header.elements:
        if el.name not in ("vertex", "face"):
            raise UnsupportedElement(f"unsupported PLY element '{el.name}'")
    wanted = ("vertex", "face") if header.element("face") is not None else ("vertex",)
    parsed = ply.read_ply(path, wanted)
    verts = ply.vertex_xyz(parsed["vertex"])
    faces = parsed.get("face")
    if faces is None:
        tris = np.zeros((0, 3), dtype=np.int64)
    elif isinstance(faces, np.ndarray):
        tris = faces
    else:
        fan = []
        for poly in faces:
            for j in range(1, len(poly) - 1):
                fan.append((poly[0], poly[j], poly[j + 1]))
        tris = np.array(fan, dtype=np.int64).reshape(-1, 3)
    if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
        raise FormatError("face index out of range")
    return TriangleMesh(verts, tris)
