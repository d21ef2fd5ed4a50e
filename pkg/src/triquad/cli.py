"""Command-line entry point: ``triquad {synth,train,mesh,eval,info}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import datasets, meshing, synth
from .errors import InvalidConfig, TriQuadError
from .evaluation import evaluate_mesh
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("triquad")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    known = set(TrainConfig.field_names())
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise InvalidConfig(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = float(value) if any(c in value.lower() for c in ".e") else int(value)
        except ValueError as exc:
            raise InvalidConfig(f"{source}:{lineno}: bad value {value!r} for {key}") from exc
    return values


def load_config(path=None, env=None) -> TrainConfig:
    """Defaults, overridden by the file, then by ``TQ_SEED``."""
    env = os.environ if env is None else env
    values = {} if path is None else parse_config_text(Path(path).read_text(), str(path))
    if env.get("TQ_SEED"):
        try:
            values["seed"] = int(env["TQ_SEED"])
        except ValueError as exc:
            raise InvalidConfig(f"TQ_SEED must be an integer, got {env['TQ_SEED']!r}") from exc
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{name} = {getattr(cfg, name)!r}\n" for name in cfg.field_names())


def _seed(arg) -> int:
    env = os.environ.get("TQ_SEED")
    return int(env) if env else arg


def cmd_synth(args) -> int:
    spec = synth.load_scene(args.scene)
    scans, gt = synth.synth_scene(spec, np.random.default_rng(_seed(args.seed)))
    out = Path(args.out)
    scans.save(out)
    datasets.write_ply_points(gt, out / "gt.ply")
    print(f"wrote {len(scans)} scans ({sum(len(f) for f in scans.frames)} points) "
          f"and {len(gt)} ground-truth points to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    scans = datasets.load_scan_dir(args.scans, args.poses, args.stride)
    log.info("training on %d frames", len(scans))
    ckpt = train(scans, cfg, log_every=args.log_every)
    save_checkpoint(ckpt, args.out)
    counts = ckpt.model.parameter_counts()
    print(f"wrote {args.out} after {ckpt.step} steps; final loss {ckpt.losses[-1] if ckpt.losses else float('nan'):.5f}; "
          f"{counts['features']} feature + {counts['mlp']} MLP parameters")
    return 0


def cmd_mesh(args) -> int:
    ckpt = load_checkpoint(args.ckpt, with_mask=args.mask is None)
    mask = meshing.OccupancyMask.load(args.mask) if args.mask else ckpt.occupancy
    if mask is None:
        raise InvalidConfig(f"no occupancy mask for {args.ckpt}; pass --mask")
    if args.dilation is not None:
        mask = meshing.OccupancyMask(mask.cell_size, mask.cells, args.dilation)
    grid = meshing.evaluate_sdf_grid(ckpt.model, mask, args.mc_res)
    mesh = meshing.marching_cubes(grid)
    meshing.export_mesh_ply(mesh, args.out)
    print(f"wrote {args.out}: {len(mesh.vertices)} vertices, {len(mesh)} triangles")
    return 0


def cmd_eval(args) -> int:
    mesh = meshing.import_mesh_ply(args.mesh)
    gt = datasets.load_ply_points(args.gt)
    report = evaluate_mesh(mesh, gt, args.threshold, args.samples, _seed(args.seed))
    sys.stdout.write(report.to_table())
    if args.out:
        Path(args.out).write_text(report.to_kv())
    return 0


def cmd_info(args) -> int:
    ckpt = load_checkpoint(args.ckpt, with_mask=False)
    counts = ckpt.model.parameter_counts()
    print(f"feature parameters  {counts['features']}")
    print(f"MLP parameters      {counts['mlp']}")
    print(f"total parameters    {counts['total']}")
    print(f"feature entries     {ckpt.model.features.entry_count()}")
    print(f"training steps      {ckpt.step}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="triquad", description="Tri-quadtree neural SDF mapping.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="simulate lidar scans of an analytic scene")
    s.add_argument("--scene", default="room", help="JSON scene file, or 'room' for the built-in scene")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="fit a model to posed scans")
    s.add_argument("--config", help="key = value config file (defaults if omitted)")
    s.add_argument("--scans", required=True, help="directory of *.bin scans")
    s.add_argument("--poses", required=True, help="pose file, one 3x4 [R|t] per line")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--stride", type=int, default=1, help="use one frame in every STRIDE")
    s.add_argument("--log-every", type=int, default=100)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("mesh", help="extract a mesh from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mc-res", type=float, default=0.1, help="marching cubes voxel size in meters")
    s.add_argument("--out", required=True, help="output PLY")
    s.add_argument("--mask", help="occupancy mask file (default: the checkpoint's sidecar)")
    s.add_argument("--dilation", type=int, help="override the mask dilation (coarse cells)")
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("eval", help="compare a mesh against a ground-truth cloud")
    s.add_argument("--mesh", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--threshold", type=float, default=0.1, help="meters")
    s.add_argument("--samples", type=int, default=100_000, help="points sampled on the mesh")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="write key=value report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("info", help="print parameter counts of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TriQuadError, OSError, ValueError) as exc:
        print(f"triquad {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
