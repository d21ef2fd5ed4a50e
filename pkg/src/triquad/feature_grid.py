"""Tri-quadtree feature store.

Each of the three planes keeps one table per feature level. A table maps the
Morton code of a lattice vertex to a learnable ``d``-vector. There are no
tree pointers: a quadtree node at level ``l`` exists iff its four corner
vertices are present in the level-``l`` table.

Tables are append-only. Rows are never moved once created, so row indices
handed out by :meth:`FeaturePlaneSet.query` stay valid for the lifetime of
the store; lookups go through a sorted key index and ``np.searchsorted``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import adam_update
from .errors import InvalidConfig, OutOfExtent, UnknownVertex
from .geometry import PLANE_AXES, PLANES, Extent

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_M8 = np.uint64(0x00FF00FF00FF00FF)
_M16 = np.uint64(0x0000FFFF0000FFFF)
_M32 = np.uint64(0x00000000FFFFFFFF)


def _spread_bits(x: np.ndarray) -> np.ndarray:
    x = x & _M32
    x = (x | (x << np.uint64(16))) & _M16
    x = (x | (x << np.uint64(8))) & _M8
    x = (x | (x << np.uint64(4))) & _M4
    x = (x | (x << np.uint64(2))) & _M2
    x = (x | (x << np.uint64(1))) & _M1
    return x


def _compact_bits(x: np.ndarray) -> np.ndarray:
    x = x & _M1
    x = (x | (x >> np.uint64(1))) & _M2
    x = (x | (x >> np.uint64(2))) & _M4
    x = (x | (x >> np.uint64(4))) & _M8
    x = (x | (x >> np.uint64(8))) & _M16
    x = (x | (x >> np.uint64(16))) & _M32
    return x


def morton_encode_array(ix, iy) -> np.ndarray:
    """Interleave ``ix`` into even bits and ``iy`` into odd bits (uint64)."""
    ix = np.asarray(ix).astype(np.uint64)
    iy = np.asarray(iy).astype(np.uint64)
    return _spread_bits(ix) | (_spread_bits(iy) << np.uint64(1))


def morton_decode_array(keys):
    keys = np.asarray(keys, dtype=np.uint64)
    return (
        _compact_bits(keys).astype(np.int64),
        _compact_bits(keys >> np.uint64(1)).astype(np.int64),
    )


def morton_encode(ix: int, iy: int) -> int:
    if not (0 <= ix < 1 << 32 and 0 <= iy < 1 << 32):
        raise ValueError(f"vertex index ({ix}, {iy}) outside [0, 2^32)")
    return int(morton_encode_array(ix, iy))


def morton_decode(key: int) -> tuple[int, int]:
    ix, iy = morton_decode_array(np.uint64(key))
    return int(ix), int(iy)


class FeatureTable:
    """Append-only map from vertex Morton key to a feature row.

    Alongside each feature row the table keeps the gradient accumulator and
    the two Adam moment buffers.
    """

    def __init__(self, plane: str, level: int, dim: int, capacity: int = 1024):
        self.plane = plane
        self.level = level
        self.dim = dim
        self.size = 0
        self.keys = np.zeros(capacity, dtype=np.uint64)
        self.features = np.zeros((capacity, dim))
        self.grad = np.zeros((capacity, dim))
        self.adam_m = np.zeros((capacity, dim))
        self.adam_v = np.zeros((capacity, dim))
        self._sorted_keys = np.zeros(0, dtype=np.uint64)
        self._sorted_rows = np.zeros(0, dtype=np.int64)
        self._touched: list[np.ndarray] = []

    def __len__(self) -> int:
        return self.size

    def lookup(self, keys) -> np.ndarray:
        """Row index per key, ``-1`` where the key is absent."""
        keys = np.asarray(keys, dtype=np.uint64)
        flat = keys.ravel()
        if self.size == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._sorted_keys, flat)
        pos = np.minimum(pos, self.size - 1)
        hit = self._sorted_keys[pos] == flat
        rows = np.where(hit, self._sorted_rows[pos], -1)
        return rows.reshape(keys.shape)

    def insert(self, keys, rng, init_std: float) -> int:
        """Create rows for absent keys; returns the number created.

        New keys are inserted in ascending order and their features drawn
        from ``N(0, init_std^2)`` in that order, so allocation is
        deterministic for a given generator state.
        """
        keys = np.unique(np.asarray(keys, dtype=np.uint64).ravel())
        if self.size:
            keys = keys[self.lookup(keys) < 0]
        n_new = keys.size
        if n_new == 0:
            return 0
        self._reserve(self.size + n_new)
        lo, hi = self.size, self.size + n_new
        self.keys[lo:hi] = keys
        self.features[lo:hi] = rng.normal(0.0, init_std, size=(n_new, self.dim))
        rows = np.arange(lo, hi, dtype=np.int64)
        merged_keys = np.concatenate([self._sorted_keys, keys])
        merged_rows = np.concatenate([self._sorted_rows, rows])
        order = np.argsort(merged_keys, kind="stable")
        self._sorted_keys = merged_keys[order]
        self._sorted_rows = merged_rows[order]
        self.size = hi
        return n_new

    def set_entries(self, keys, features) -> None:
        """Replace the whole table (used when loading a checkpoint)."""
        keys = np.asarray(keys, dtype=np.uint64)
        features = np.asarray(features, dtype=np.float64).reshape(len(keys), self.dim)
        if np.unique(keys).size != keys.size:
            raise ValueError(f"duplicate keys in table {self.plane}/{self.level}")
        self.size = 0
        self._reserve(len(keys))
        self.keys[: len(keys)] = keys
        self.features[: len(keys)] = features
        self.grad[:] = 0.0
        self.adam_m[:] = 0.0
        self.adam_v[:] = 0.0
        self.size = len(keys)
        order = np.argsort(keys, kind="stable")
        self._sorted_keys = keys[order].copy()
        self._sorted_rows = order.astype(np.int64)

    def _reserve(self, n: int) -> None:
        cap = self.keys.shape[0]
        if n <= cap:
            return
        new_cap = max(n, 2 * cap)
        self.keys = _grow(self.keys, new_cap)
        self.features = _grow(self.features, new_cap)
        self.grad = _grow(self.grad, new_cap)
        self.adam_m = _grow(self.adam_m, new_cap)
        self.adam_v = _grow(self.adam_v, new_cap)

    def sorted_entries(self):
        """``(keys, features)`` in ascending key order."""
        return self._sorted_keys.copy(), self.features[self._sorted_rows].copy()

    def add_grad(self, rows: np.ndarray, contrib: np.ndarray) -> None:
        """Scatter-add ``contrib[i]`` into ``grad[rows[i]]``."""
        uniq, inv = np.unique(rows, return_inverse=True)
        summed = np.zeros((uniq.size, self.dim))
        for j in range(self.dim):
            summed[:, j] = np.bincount(inv, weights=contrib[:, j], minlength=uniq.size)
        self.grad[uniq] += summed
        self._touched.append(uniq)

    def pop_touched(self) -> np.ndarray:
        if not self._touched:
            return np.zeros(0, dtype=np.int64)
        rows = np.unique(np.concatenate(self._touched))
        self._touched = []
        return rows


def _grow(a: np.ndarray, cap: int) -> np.ndarray:
    out = np.zeros((cap,) + a.shape[1:], dtype=a.dtype)
    out[: a.shape[0]] = a
    return out


# (du, dv) of the 4 cell corners in the order v00, v10, v01, v11
_CORNERS = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=np.int64)


def bilinear_weights(u, v) -> np.ndarray:
    """Weights of v00, v10, v01, v11 for offsets ``(u, v)``; shape ``(n, 4)``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([(1 - u) * (1 - v), u * (1 - v), (1 - u) * v, u * v], axis=-1)


@dataclass
class InterpRecord:
    """Per-table corner keys, rows and bilinear weights for a batch of points.

    ``keys[t]``, ``rows[t]`` and ``weights[t]`` have shape ``(n, 4)`` for the
    ``t``-th table in :attr:`FeaturePlaneSet.table_order`. A row of ``-1``
    marks a vertex that did not exist at query time.
    """

    keys: list
    rows: list
    weights: list

    @property
    def n_points(self) -> int:
        return self.weights[0].shape[0] if self.weights else 0


class FeaturePlaneSet:
    """The ``3 * H`` feature tables plus the shared extent."""

    def __init__(self, extent: Extent, dim: int = 8, n_levels: int = 3, init_std: float = 0.01):
        if dim < 1 or n_levels < 1 or extent.max_level < n_levels:
            raise InvalidConfig("need d >= 1, H >= 1 and L_max >= H")
        self.extent = extent
        self.dim = dim
        self.n_levels = n_levels
        self.init_std = init_std
        self.levels = list(range(extent.max_level - n_levels + 1, extent.max_level + 1))
        self.table_order = [(plane, level) for plane in PLANES for level in self.levels]
        self.tables = {key: FeatureTable(key[0], key[1], dim) for key in self.table_order}

    @property
    def feature_dim(self) -> int:
        return self.dim * self.n_levels

    def entry_count(self) -> int:
        return sum(len(t) for t in self.tables.values())

    def parameter_count(self) -> int:
        return self.entry_count() * self.dim

    def _corners(self, points: np.ndarray, plane: str, level: int):
        a, b = PLANE_AXES[plane]
        o = self.extent.origin
        c = self.extent.cell_size(level)
        tu = (points[:, a] - o[a]) / c
        tv = (points[:, b] - o[b]) / c
        fu = np.floor(tu)
        fv = np.floor(tv)
        ix = fu.astype(np.int64)
        iy = fv.astype(np.int64)
        keys = morton_encode_array(ix[:, None] + _CORNERS[:, 0], iy[:, None] + _CORNERS[:, 1])
        return keys, bilinear_weights(tu - fu, tv - fv)

    def _check_inside(self, points: np.ndarray) -> None:
        if points.shape[0] and not np.all(self.extent.contains(points)):
            raise OutOfExtent("query point outside the mapped extent")

    def allocate(self, points, rng) -> int:
        """Ensure the 4 corner vertices of every containing cell exist.

        Returns the number of entries created. Existing entries are untouched.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        self._check_inside(points)
        created = 0
        for plane, level in self.table_order:
            keys, _ = self._corners(points, plane, level)
            created += self.tables[plane, level].insert(keys, rng, self.init_std)
        return created

    def allocate_for_point(self, p, rng) -> int:
        return self.allocate(np.asarray(p, dtype=np.float64)[None, :], rng)

    def query(self, points, rng=None):
        """Tri-quadtree features ``V(p)`` for an ``(n, 3)`` batch.

        Per level, the three planar bilinear interpolations are summed; the
        level slices are concatenated coarsest first, giving shape
        ``(n, d * H)``. Missing vertices read as zero. When ``rng`` is given,
        missing vertices are allocated first (one table at a time, in
        ``table_order``).
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        self._check_inside(points)
        n, d = points.shape[0], self.dim
        out = np.zeros((n, d * self.n_levels))
        rec = InterpRecord([], [], [])
        for plane, level in self.table_order:
            table = self.tables[plane, level]
            keys, w = self._corners(points, plane, level)
            if rng is not None:
                table.insert(keys, rng, self.init_std)
            rows = table.lookup(keys)
            feats = table.features[np.maximum(rows, 0)]
            feats[rows < 0] = 0.0
            j = self.levels.index(level)
            out[:, j * d:(j + 1) * d] += np.einsum("nk,nkd->nd", w, feats)
            rec.keys.append(keys)
            rec.rows.append(rows)
            rec.weights.append(w)
        return out, rec

    def query_point_feature(self, p):
        V, rec = self.query(np.asarray(p, dtype=np.float64)[None, :])
        return V[0], rec

    def query_level_feature(self, plane: str, level: int, q):
        """Bilinear feature of one plane/level at the 2D point ``q``.

        Returns the ``d``-vector and the four ``(key, weight)`` pairs.
        """
        a, b = PLANE_AXES[plane]
        p = np.array(self.extent.origin, dtype=np.float64)
        p[[a, b]] = q
        p = p[None, :]
        self._check_inside(p)
        keys, w = self._corners(p, plane, level)
        table = self.tables[plane, level]
        rows = table.lookup(keys)
        feats = table.features[np.maximum(rows, 0)]
        feats[rows < 0] = 0.0
        f = np.einsum("nk,nkd->nd", w, feats)[0]
        return f, [(int(k), float(x)) for k, x in zip(keys[0], w[0])]

    def accumulate_gradient(self, rec: InterpRecord, dL_dV) -> None:
        """Route ``dL/dV`` back to vertex gradient buffers.

        Every plane receives the full level slice scaled by its own
        bilinear weight (the planes are summed in the forward pass).
        """
        dL_dV = np.atleast_2d(np.asarray(dL_dV, dtype=np.float64))
        d = self.dim
        for t, (plane, level) in enumerate(self.table_order):
            j = self.levels.index(level)
            g = dL_dV[:, j * d:(j + 1) * d]
            rows, w = rec.rows[t], rec.weights[t]
            live = w != 0.0
            if np.any(rows[live] < 0):
                raise UnknownVertex(f"gradient routed to a vertex missing from {plane}/{level}")
            keep = (rows >= 0).ravel()
            contrib = (w[:, :, None] * g[:, None, :]).reshape(-1, d)
            self.tables[plane, level].add_grad(rows.ravel()[keep], contrib[keep])

    def adam_step(self, step: int, lr: float, beta1: float, beta2: float, eps: float) -> int:
        """Adam update of the rows that received gradient since the last step.

        ``step`` is the (already incremented) global step counter used for
        bias correction. Gradients of the updated rows are reset. Returns
        the number of rows updated.
        """
        updated = 0
        for table in self.tables.values():
            rows = table.pop_touched()
            if rows.size == 0:
                continue
            p, g = table.features[rows], table.grad[rows]
            m, v = table.adam_m[rows], table.adam_v[rows]
            adam_update(p, g, m, v, step, lr, beta1, beta2, eps)
            table.features[rows] = p
            table.adam_m[rows] = m
            table.adam_v[rows] = v
            table.grad[rows] = 0.0
            updated += rows.size
        return updated

    def zero_grad(self) -> None:
        for table in self.tables.values():
            table.grad[: table.size] = 0.0
            table.pop_touched()

    def entries(self):
        """Yield ``(plane, level, keys, features)`` in ascending table/key order."""
        for plane, level in sorted(self.table_order, key=lambda pl: (PLANES.index(pl[0]), pl[1])):
            keys, feats = self.tables[plane, level].sorted_entries()
            yield plane, level, keys, feats
