"""Rigid transforms, rays, the mapped extent and plane projections.

Points are plain ``numpy`` arrays of shape ``(3,)`` or ``(n, 3)`` in the
world frame (the frame of the pose file). Every function here is pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, OutOfExtent

PLANES = ("XY", "XZ", "YZ")
# axes retained by each plane
PLANE_AXES = {"XY": (0, 1), "XZ": (0, 2), "YZ": (1, 2)}


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> Pose:
        """Build from a 3x4 ``[R|t]`` or 4x4 homogeneous matrix."""
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation) -> Pose:
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, translation)

    def matrix(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def inverse(self) -> Pose:
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def is_rigid(self, tol: float = 1e-6) -> bool:
        R = self.rotation
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) <= tol
        )


def transform_point(pose: Pose, p) -> np.ndarray:
    """Apply ``R p + t``; accepts one point or an ``(n, 3)`` array."""
    p = np.asarray(p, dtype=np.float64)
    return p @ pose.rotation.T + pose.translation


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    depth: float

    @classmethod
    def from_endpoint(cls, origin, endpoint) -> Ray:
        origin = np.asarray(origin, dtype=np.float64)
        delta = np.asarray(endpoint, dtype=np.float64) - origin
        depth = float(np.linalg.norm(delta))
        return cls(origin, delta / depth, depth)

    @property
    def endpoint(self) -> np.ndarray:
        return self.origin + self.depth * self.direction


@dataclass(frozen=True)
class Extent:
    """The cube covered by the quadtree roots.

    ``side`` is always ``leaf_res * 2**max_level``; only the origin is free.
    """

    origin: np.ndarray
    leaf_res: float
    max_level: int

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        if self.leaf_res <= 0 or self.max_level < 0:
            raise InvalidConfig("extent needs leaf_res > 0 and max_level >= 0")

    @property
    def side(self) -> float:
        return self.leaf_res * 2.0 ** self.max_level

    def cell_size(self, level: int) -> float:
        return self.leaf_res * 2.0 ** (self.max_level - level)

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        rel = p - self.origin
        return np.all((rel >= 0.0) & (rel < self.side), axis=1)

    @classmethod
    def enclosing(cls, points, leaf_res: float, max_level: int, pad: float = 0.0) -> Extent:
        """Tight cube around ``points`` padded by ``pad``, snapped to the leaf lattice.

        Raises OutOfExtent when the padded box does not fit in one root cell.
        """
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        lo = p.min(axis=0) - pad
        hi = p.max(axis=0) + pad
        origin = np.floor(lo / leaf_res) * leaf_res
        ext = cls(origin, leaf_res, max_level)
        if np.any(hi - origin >= ext.side):
            raise OutOfExtent(
                f"scene spans {float(np.max(hi - lo)):.2f} m, larger than the root side {ext.side:.2f} m"
            )
        return ext


def project_to_planes(p):
    """Return the XY, XZ and YZ projections of ``p`` (each drops one axis)."""
    p = np.asarray(p, dtype=np.float64)
    return tuple(p[..., list(PLANE_AXES[name])] for name in PLANES)


def locate_cells(extent: Extent, level: int, q, plane: str = "XY"):
    """Vectorized cell lookup for 2D points ``q`` of shape ``(n, 2)``.

    Returns integer cell indices ``ix, iy`` and fractional offsets ``u, v``
    in ``[0, 1)``.
    """
    if not 0 <= level <= extent.max_level:
        raise InvalidConfig(f"level {level} outside [0, {extent.max_level}]")
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    a, b = PLANE_AXES[plane]
    o = extent.origin[[a, b]]
    rel = q - o
    if not np.all((rel >= 0.0) & (rel < extent.side)):
        raise OutOfExtent(f"point outside the {plane} projection of the extent")
    t = rel / extent.cell_size(level)
    cell = np.floor(t)
    frac = t - cell
    idx = cell.astype(np.int64)
    return idx[:, 0], idx[:, 1], frac[:, 0], frac[:, 1]


def locate_cell(extent: Extent, level: int, q, plane: str = "XY"):
    ix, iy, u, v = locate_cells(extent, level, np.asarray(q, dtype=np.float64)[None, :], plane)
    return int(ix[0]), int(iy[0]), float(u[0]), float(v[0])
