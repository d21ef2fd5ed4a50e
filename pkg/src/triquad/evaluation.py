"""Accuracy / completion metrics between a reconstructed mesh and ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, EmptyMesh, EmptyReference
from .meshing import TriangleMesh


def sample_mesh_surface(mesh: TriangleMesh, n: int, rng) -> np.ndarray:
    """Area-weighted uniform surface samples, shape ``(n, 3)``."""
    if len(mesh) == 0:
        raise EmptyMesh("cannot sample an empty mesh")
    if n < 1:
        raise ValueError("need n >= 1")
    areas = mesh.areas()
    cdf = np.cumsum(areas)
    total = cdf[-1]
    if not total > 0:
        raise EmptyMesh("mesh has zero surface area")
    tri = np.searchsorted(cdf, rng.uniform(0.0, total, size=n), side="right")
    tri = np.minimum(tri, len(areas) - 1)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    a, b, c = np.moveaxis(mesh.triangle_corners()[tri], 1, 0)
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def _dist(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    d = q - r
    return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])


class VoxelHash:
    """Reference points bucketed in a uniform grid for exact NN queries.

    Queries visit shells of cells at growing Chebyshev radius ``k``; once the
    best distance found is ``<= k * cell``, no unvisited cell can hold a
    closer point and the query is final. Queries still open after
    ``max_rings`` shells (far from every reference point) are resolved with a
    k-d tree; its candidates are re-measured with the same arithmetic, so
    results match brute force bit for bit.
    """

    def __init__(self, reference, cell: float | None = None, target_per_cell: float = 8.0):
        ref = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
        if len(ref) == 0:
            raise EmptyReference("reference cloud is empty")
        self.ref = ref
        self.lo = ref.min(axis=0)
        span = float(np.max(ref.max(axis=0) - self.lo))
        if cell is None:
            cell = max(span / max(len(ref), 1) ** (1.0 / 3.0), 1e-6)
            for _ in range(2):
                occupied = np.unique(self._cells(cell), axis=0).shape[0]
                cell *= np.sqrt(target_per_cell / (len(ref) / occupied))
                cell = max(cell, 1e-6)
        self.cell = float(cell)
        cells = self._cells(self.cell)
        self.dims = cells.max(axis=0) + 1
        keys = self._key(cells)
        order = np.argsort(keys, kind="stable")
        self.sorted_ref = ref[order]
        self.keys, self.starts, self.counts = np.unique(keys[order], return_index=True, return_counts=True)
        self._tree = None

    def _cells(self, cell: float) -> np.ndarray:
        return np.floor((self.ref - self.lo) / cell).astype(np.int64)

    def _key(self, cells: np.ndarray) -> np.ndarray:
        return (cells[:, 0] * self.dims[1] + cells[:, 1]) * self.dims[2] + cells[:, 2]

    def query(self, points, max_rings: int = 2, chunk: int = 20000) -> np.ndarray:
        q = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(q))
        for lo in range(0, len(q), chunk):
            out[lo:lo + chunk] = self._query_chunk(q[lo:lo + chunk], max_rings)
        return out

    def _query_chunk(self, q: np.ndarray, max_rings: int) -> np.ndarray:
        # Rings are centred on the query's cell clamped into the grid. The
        # projection of q onto the grid box lies in that cell and is no
        # farther from any reference point, so the ring bound stays exact.
        qc = np.clip(np.floor((q - self.lo) / self.cell).astype(np.int64), 0, self.dims - 1)
        best = np.full(len(q), np.inf)
        active = np.arange(len(q))
        for k in range(max_rings + 1):
            for off in _shell(k):
                c = qc[active] + off
                inside = np.all((c >= 0) & (c < self.dims), axis=1)
                if not inside.any():
                    continue
                qi = active[inside]
                keys = self._key(c[inside])
                pos = np.minimum(np.searchsorted(self.keys, keys), self.keys.size - 1)
                hit = self.keys[pos] == keys
                if not hit.any():
                    continue
                qi, pos, cc = qi[hit], pos[hit], c[inside][hit]
                # skip cells whose box is already farther than the best hit
                box_lo = self.lo + cc * self.cell
                gap = np.maximum(np.maximum(box_lo - q[qi], q[qi] - (box_lo + self.cell)), 0.0)
                near = np.sqrt((gap * gap).sum(axis=1)) <= best[qi] * (1 + 1e-9) + 1e-12
                if not near.any():
                    continue
                qi, pos = qi[near], pos[near]
                counts = self.counts[pos]
                pair_q = np.repeat(qi, counts)
                first = np.repeat(self.starts[pos] - np.cumsum(counts) + counts, counts)
                pair_r = first + np.arange(pair_q.size)
                np.minimum.at(best, pair_q, _dist(q[pair_q], self.sorted_ref[pair_r]))
            # whole reference grid visited, or nothing unvisited can be closer
            covered = np.all((qc[active] - k <= 0) & (qc[active] + k >= self.dims - 1), axis=1)
            done = (best[active] <= k * self.cell) | covered
            active = active[~done]
            if active.size == 0:
                return best
        best[active] = self._far_query(q[active])
        return best

    def _far_query(self, q: np.ndarray) -> np.ndarray:
        if self._tree is None:
            self._tree = cKDTree(self.ref)
        approx, _ = self._tree.query(q)
        out = np.empty(len(q))
        radius = approx * (1 + 1e-9) + 1e-12
        for i, cand in enumerate(self._tree.query_ball_point(q, radius)):
            out[i] = _dist(np.broadcast_to(q[i], (len(cand), 3)), self.ref[cand]).min()
        return out


_SHELLS: dict = {}


def _shell(k: int) -> np.ndarray:
    """Integer offsets with Chebyshev norm exactly ``k``."""
    if k not in _SHELLS:
        r = np.arange(-k, k + 1)
        g = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
        g = g[np.abs(g).max(axis=1) == k]
        _SHELLS[k] = g[np.argsort((g * g).sum(axis=1), kind="stable")]
    return _SHELLS[k]


def nearest_distances(query, reference, cell: float | None = None) -> np.ndarray:
    """Exact Euclidean distance from each query point to its nearest reference point."""
    q = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    if len(q) == 0:
        return np.zeros(0)
    return VoxelHash(reference, cell).query(q)


@dataclass
class MetricsReport:
    completion_cm: float
    accuracy_cm: float
    completion_ratio_pct: float
    accuracy_ratio_pct: float
    threshold_m: float
    sample_count: int
    gt_count: int = 0

    _ROWS = (
        ("completion_cm", "Comp. [cm]"),
        ("accuracy_cm", "Acc. [cm]"),
        ("completion_ratio_pct", "Comp.Ratio [%]"),
        ("accuracy_ratio_pct", "Acc.Ratio [%]"),
        ("threshold_m", "threshold [m]"),
        ("sample_count", "mesh samples"),
        ("gt_count", "gt points"),
    )

    def _fmt(self, name) -> str:
        value = getattr(self, name)
        return str(value) if isinstance(value, int) else f"{value:.4f}"

    def to_table(self) -> str:
        width = max(len(label) for _, label in self._ROWS)
        return "\n".join(f"{label:<{width}}  {self._fmt(name):>12}" for name, label in self._ROWS) + "\n"

    def to_kv(self) -> str:
        return "".join(f"{name}={self._fmt(name)}\n" for name, _ in self._ROWS)


def compute_metrics(pred_points, gt_points, threshold: float = 0.1) -> MetricsReport:
    """Mean distances (cm) and below-threshold ratios (%) in both directions."""
    P = np.asarray(pred_points, dtype=np.float64).reshape(-1, 3)
    G = np.asarray(gt_points, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0 or len(G) == 0:
        raise EmptyCloud("metrics need non-empty prediction and ground-truth clouds")
    acc = nearest_distances(P, G)
    comp = nearest_distances(G, P)
    return MetricsReport(
        completion_cm=float(comp.mean() * 100.0),
        accuracy_cm=float(acc.mean() * 100.0),
        completion_ratio_pct=float(np.mean(comp < threshold) * 100.0),
        accuracy_ratio_pct=float(np.mean(acc < threshold) * 100.0),
        threshold_m=float(threshold),
        sample_count=len(P),
        gt_count=len(G),
    )


def evaluate_mesh(mesh: TriangleMesh, gt_points, threshold: float = 0.1,
                  n_samples: int = 100_000, seed: int = 0) -> MetricsReport:
    samples = sample_mesh_surface(mesh, n_samples, np.random.default_rng(seed))
    return compute_metrics(samples, gt_points, threshold)
