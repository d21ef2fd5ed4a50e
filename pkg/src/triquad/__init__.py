"""Neural signed distance fields from posed lidar scans.

Features live on three axis-aligned planes (XY, XZ, YZ), each a sparse
multi-level quadtree; a point's embedding sums bilinearly interpolated
plane features per level, concatenates levels, appends a random Fourier
encoding and feeds a small MLP that predicts the SDF.
"""

from .datasets import ScanSet, load_ply_points, load_poses, load_scan_bin, load_scan_dir
from .decoder import MlpDecoder
from .encoding import PositionalEncoder
from .errors import TriQuadError
from .evaluation import MetricsReport, compute_metrics, evaluate_mesh, nearest_distances, sample_mesh_surface
from .feature_grid import FeaturePlaneSet, morton_decode, morton_encode
from .geometry import Extent, Pose, Ray
from .meshing import OccupancyMask, TriangleMesh, evaluate_sdf_grid, export_mesh_ply, import_mesh_ply, marching_cubes
from .synth import SceneSpec, default_room, synth_scene
from .trainer import Checkpoint, SdfModel, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "Extent", "FeaturePlaneSet", "MetricsReport", "MlpDecoder", "OccupancyMask",
    "Pose", "PositionalEncoder", "Ray", "ScanSet", "SceneSpec", "SdfModel", "TrainConfig",
    "TriQuadError", "TriangleMesh", "compute_metrics", "default_room", "evaluate_mesh",
    "evaluate_sdf_grid", "export_mesh_ply", "import_mesh_ply", "load_checkpoint", "load_ply_points",
    "load_poses", "load_scan_bin", "load_scan_dir", "marching_cubes", "morton_decode", "morton_encode",
    "nearest_distances", "sample_mesh_surface", "save_checkpoint", "synth_scene", "train",
]
