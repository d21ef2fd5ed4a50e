"""Lidar scans, pose files and ground-truth point clouds.

Scan directories follow the KITTI layout: lexicographically sorted ``*.bin``
files of little-endian ``float32`` quadruples ``(x, y, z, intensity)`` in the
sensor frame, paired by index with the lines of a pose file holding a
row-major 3x4 ``[R|t]`` per line.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ply
from .errors import InvalidConfig, NonRigid, ParseError, SizeNotMultipleOf16
from .geometry import Pose, transform_point

log = logging.getLogger(__name__)


def load_scan_bin(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) % 16:
        raise SizeNotMultipleOf16(
            f"{path}: {len(data)} bytes is not a whole number of 16-byte records",
            offset=len(data) - len(data) % 16,
        )
    return np.frombuffer(data, dtype="<f4").reshape(-1, 4)[:, :3].astype(np.float64)


def write_scan_bin(points, path, intensity=None) -> None:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rec = np.zeros((len(points), 4), dtype="<f4")
    rec[:, :3] = points
    if intensity is not None:
        rec[:, 3] = intensity
    Path(path).write_bytes(rec.tobytes())


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def load_poses(path) -> list[Pose]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            vals = [float(x) for x in line.split()]
        except ValueError as exc:
            raise ParseError(f"{path}: non-numeric pose value", offset=f"line {lineno}") from exc
        if len(vals) != 12:
            raise ParseError(f"{path}: expected 12 values, got {len(vals)}", offset=f"line {lineno}")
        m = np.array(vals).reshape(3, 4)
        R = m[:, :3]
        if np.linalg.det(R) <= 0:
            raise NonRigid(f"{path}: rotation has non-positive determinant", offset=f"line {lineno}")
        drift = np.abs(R.T @ R - np.eye(3)).max()
        if drift > 1e-6:
            log.warning("%s line %d: rotation drift %.2e, re-orthonormalizing", path, lineno, drift)
            R = _orthonormalize(R)
        poses.append(Pose(R, m[:, 3]))
    return poses


def write_poses(poses, path) -> None:
    lines = [" ".join(repr(float(v)) for v in p.matrix().ravel()) for p in poses]
    Path(path).write_text("\n".join(lines) + "\n")


def load_ply_points(path) -> np.ndarray:
    return ply.vertex_xyz(ply.read_ply(path, ("vertex",))["vertex"])


def write_ply_points(points, path) -> None:
    ply.write_ply(path, points)


@dataclass
class ScanSet:
    """Sensor-frame endpoint clouds with one pose per frame."""

    frames: list
    poses: list

    def __post_init__(self):
        if len(self.frames) != len(self.poses):
            raise InvalidConfig(f"{len(self.frames)} frames but {len(self.poses)} poses")

    def __len__(self) -> int:
        return len(self.frames)

    def strided(self, stride: int) -> ScanSet:
        """Keep one frame out of every ``stride``."""
        if stride < 1:
            raise InvalidConfig("stride must be >= 1")
        return ScanSet(self.frames[::stride], self.poses[::stride])

    def world_rays(self):
        """Stacked ``(origins, endpoints)`` in the world frame."""
        if not self.frames:
            return np.zeros((0, 3)), np.zeros((0, 3))
        origins, ends = [], []
        for pts, pose in zip(self.frames, self.poses):
            pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
            ends.append(transform_point(pose, pts))
            origins.append(np.broadcast_to(pose.translation, pts.shape))
        return np.concatenate(origins), np.concatenate(ends)

    def world_points(self) -> np.ndarray:
        return self.world_rays()[1]

    def save(self, directory, poses_name: str = "poses.txt") -> None:
        d = Path(directory)
        (d / "scans").mkdir(parents=True, exist_ok=True)
        for i, pts in enumerate(self.frames):
            write_scan_bin(pts, d / "scans" / f"{i:06d}.bin")
        write_poses(self.poses, d / poses_name)


def load_scan_dir(scan_dir, poses_path, stride: int = 1) -> ScanSet:
    files = sorted(Path(scan_dir).glob("*.bin"))
    poses = load_poses(poses_path)
    if not files:
        raise InvalidConfig(f"no *.bin scans in {scan_dir}")
    if len(poses) < len(files):
        raise InvalidConfig(f"{len(files)} scans but only {len(poses)} poses")
    frames = [load_scan_bin(f) for f in files]
    scans = ScanSet(frames, poses[: len(files)]).strided(stride)
    if len(scans) == 0:
        raise InvalidConfig("no frames left after striding")
    return scans
