"""Analytic scenes and a simulated spinning lidar for desk-scale experiments."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import ScanSet
from .errors import InvalidSpec
from .geometry import Pose


def _rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class GroundPlane:
    """Finite rectangle in the plane ``z = height`` (zero thickness)."""

    size: tuple = (10.0, 10.0)
    center: tuple = (0.0, 0.0)
    height: float = 0.0

    def sdf(self, p: np.ndarray) -> np.ndarray:
        dx = np.maximum(np.abs(p[:, 0] - self.center[0]) - 0.5 * self.size[0], 0.0)
        dy = np.maximum(np.abs(p[:, 1] - self.center[1]) - 0.5 * self.size[1], 0.0)
        dz = p[:, 2] - self.height
        return np.sqrt(dx * dx + dy * dy + dz * dz)

    def area(self) -> float:
        return float(self.size[0] * self.size[1])

    def sample_surface(self, n: int, rng) -> np.ndarray:
        u = rng.uniform(-0.5, 0.5, size=(n, 2)) * np.asarray(self.size) + np.asarray(self.center)
        return np.column_stack([u, np.full(n, float(self.height))])


@dataclass
class Box:
    center: tuple
    size: tuple
    yaw: float = 0.0

    def _local(self, p: np.ndarray) -> np.ndarray:
        return (p - np.asarray(self.center)) @ _rot_z(self.yaw)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(self._local(p)) - 0.5 * np.asarray(self.size)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return outside + np.minimum(q.max(axis=1), 0.0)

    def area(self) -> float:
        a, b, c = self.size
        return float(2 * (a * b + b * c + a * c))

    def sample_surface(self, n: int, rng) -> np.ndarray:
        half = 0.5 * np.asarray(self.size, dtype=np.float64)
        # faces in pairs along x, y, z; area of a face normal to axis i
        face_area = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]) * 4
        probs = np.repeat(face_area, 2) / (2 * face_area.sum())
        face = rng.choice(6, size=n, p=probs)
        local = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        local[np.arange(n), axis] = sign * half[axis]
        return local @ _rot_z(self.yaw).T + np.asarray(self.center)


@dataclass
class Sphere:
    center: tuple
    radius: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center), axis=1) - self.radius

    def area(self) -> float:
        return float(4 * np.pi * self.radius ** 2)

    def sample_surface(self, n: int, rng) -> np.ndarray:
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * d


_PRIMITIVES = {"ground": GroundPlane, "box": Box, "sphere": Sphere}


@dataclass
class SceneSpec:
    primitives: list
    trajectory: list
    n_azimuth: int = 360
    n_elevation: int = 16
    fov: tuple = (-45.0, 15.0)       # elevation range in degrees
    noise_std: float = 0.01
    max_range: float = 60.0
    gt_spacing: float = 0.02        # one ground-truth point per gt_spacing^2 of area
    extras: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not self.primitives:
            raise InvalidSpec("scene needs at least one primitive")
        if not self.trajectory:
            raise InvalidSpec("scene needs at least one sensor pose")
        if self.n_azimuth < 1 or self.n_elevation < 1:
            raise InvalidSpec("ray pattern needs n_azimuth, n_elevation >= 1")
        if not (-90.0 <= self.fov[0] <= self.fov[1] <= 90.0):
            raise InvalidSpec(f"bad elevation fov {self.fov}")
        if self.noise_std < 0 or self.max_range <= 0 or self.gt_spacing <= 0:
            raise InvalidSpec("noise_std >= 0, max_range > 0 and gt_spacing > 0 required")

    def sdf(self, p) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        return np.min([prim.sdf(p) for prim in self.primitives], axis=0)

    def ray_directions(self) -> np.ndarray:
        """Unit directions in the sensor frame, elevation-major."""
        az = np.arange(self.n_azimuth) * (2 * np.pi / self.n_azimuth)
        if self.n_elevation == 1:
            el = np.array([np.radians(0.5 * (self.fov[0] + self.fov[1]))])
        else:
            el = np.radians(np.linspace(self.fov[0], self.fov[1], self.n_elevation))
        E, A = np.meshgrid(el, az, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


def circle_trajectory(n_poses: int, radius: float, height: float, center=(0.0, 0.0)) -> list[Pose]:
    poses = []
    for i in range(n_poses):
        a = 2 * np.pi * i / n_poses
        pos = (center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), height)
        poses.append(Pose.from_yaw(a + np.pi / 2, pos))
    return poses


def default_room() -> SceneSpec:
    """10 x 10 m floor, two boxes and a sphere, circled by 20 sensor poses."""
    return SceneSpec(
        primitives=[
            GroundPlane((10.0, 10.0)),
            Box((-1.2, 0.8, 0.5), (1.2, 0.8, 1.0)),
            Box((1.3, -1.0, 0.4), (0.6, 1.4, 0.8), yaw=0.5),
            Sphere((0.6, 1.6, 0.6), 0.6),
        ],
        trajectory=circle_trajectory(20, 3.5, 1.5),
    )


def sphere_trace(scene: SceneSpec, origins, directions, tol: float = 1e-4, max_steps: int = 4000):
    """March rays against the composite SDF; returns depths (NaN for misses)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n = len(directions)
    t = np.zeros(n)
    depth = np.full(n, np.nan)
    active = np.arange(n)
    for _ in range(max_steps):
        if active.size == 0:
            break
        d = scene.sdf(origins[active] + t[active, None] * directions[active])
        hit = np.abs(d) < tol
        depth[active[hit]] = t[active[hit]]
        t[active] += d
        gone = hit | (t[active] > scene.max_range)
        active = active[~gone]
    return depth


def synth_scene(spec: SceneSpec, rng):
    """Simulate scans along the trajectory and sample ground truth.

    Returns ``(ScanSet, gt_points)``. Endpoints are stored in the sensor
    frame; noise is applied along each ray.
    """
    spec.validate()
    dirs_sensor = spec.ray_directions()
    frames = []
    for pose in spec.trajectory:
        dirs = dirs_sensor @ pose.rotation.T
        origins = np.broadcast_to(pose.translation, dirs.shape)
        depth = sphere_trace(spec, origins, dirs)
        hit = np.isfinite(depth)
        noisy = depth[hit] + rng.normal(0.0, spec.noise_std, size=int(hit.sum())) if spec.noise_std else depth[hit]
        frames.append(noisy[:, None] * dirs_sensor[hit])
    scans = ScanSet(frames, list(spec.trajectory))
    return scans, ground_truth(spec, rng)


def ground_truth(spec: SceneSpec, rng, exposed_only: bool = False) -> np.ndarray:
    """Uniform samples on every primitive, one per ``gt_spacing**2`` of area.

    With ``exposed_only``, samples on or inside another primitive (e.g. the
    floor under a box) are dropped.
    """
    clouds = []
    for i, prim in enumerate(spec.primitives):
        n = int(round(prim.area() / spec.gt_spacing ** 2))
        pts = prim.sample_surface(n, rng)
        others = [q for j, q in enumerate(spec.primitives) if j != i]
        if exposed_only and others:
            pts = pts[np.min([q.sdf(pts) for q in others], axis=0) > 1e-6]
        clouds.append(pts)
    return np.concatenate(clouds)


# ---------------------------------------------------------------- scene files

def _pose_from_json(obj) -> Pose:
    return Pose.from_matrix(np.asarray(obj, dtype=np.float64).reshape(3, 4))


def scene_from_dict(d: dict) -> SceneSpec:
    try:
        prims = []
        for p in d["primitives"]:
            p = dict(p)
            kind = p.pop("type")
            if kind not in _PRIMITIVES:
                raise InvalidSpec(f"unknown primitive type {kind!r}")
            prims.append(_PRIMITIVES[kind](**p))
        traj = d["trajectory"]
        if isinstance(traj, dict):
            traj = dict(traj)
            if traj.pop("type", "circle") != "circle":
                raise InvalidSpec("only 'circle' trajectories or explicit pose lists are supported")
            poses = circle_trajectory(**traj)
        else:
            poses = [_pose_from_json(t) for t in traj]
        rays = d.get("rays", {})
        spec = SceneSpec(
            prims,
            poses,
            n_azimuth=int(rays.get("n_azimuth", 360)),
            n_elevation=int(rays.get("n_elevation", 16)),
            fov=tuple(rays.get("fov", (-45.0, 15.0))),
            noise_std=float(d.get("noise_std", 0.01)),
            max_range=float(d.get("max_range", 60.0)),
            gt_spacing=float(d.get("gt_spacing", 0.02)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidSpec(f"bad scene description: {exc}") from exc
    spec.validate()
    return spec


def load_scene(path_or_name) -> SceneSpec:
    """``"room"`` gives the built-in scene; anything else is a JSON file."""
    if str(path_or_name) == "room":
        return default_room()
    try:
        return scene_from_dict(json.loads(Path(path_or_name).read_text()))
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"{path_or_name}: invalid JSON ({exc})") from exc
