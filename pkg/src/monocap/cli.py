"""Command-line entry point: ``monocap <run|synth|evaluate|segment|report|convert-detections>``.

Exit codes: 0 success, 1 bad input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("monocap")


class InputError(Exception):
    pass


# ---------------------------------------------------------------- subcommands

def cmd_run(args) -> int:
    from .pipeline import PipelineConfig, run

    cfg = PipelineConfig.load(args.config)
    if args.output:
        cfg.paths.output = str(Path(args.output).resolve())
    if args.parallelism is not None:
        cfg.parallelism = args.parallelism
    if args.no_refine:
        cfg.stages.refinement = False
    result = run(cfg)
    print(f"wrote {len(result.poses)} frames to {result.output_dir}")
    if result.metrics is not None:
        for k, v in result.metrics.means().items():
            print(f"  {k}: {v:.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .kinematics import load_default_rig
    from .pipeline import PipelineConfig, write_synthetic_dataset
    from .synth import (DEFAULT_CAMERA, NoiseSpec, default_base_pose, make_actor_template,
                        random_dct_motion, synth_generate)

    rig = load_default_rig()
    template = make_actor_template(rig)
    rng = np.random.default_rng(args.seed)
    base = default_base_pose(rig, args.depth)
    coef = random_dct_motion(rig, args.frames, rng, base, K=args.K)
    noise = NoiseSpec(args.sigma_2d, args.sigma_3d / 1000.0)
    ds = synth_generate(rig, template, DEFAULT_CAMERA, (coef, args.frames), noise, seed=args.seed,
                        render=args.masks or args.frames_out, composite=args.frames_out)
    cfg = PipelineConfig()
    if not (args.masks or args.frames_out):
        cfg.stages.refinement = False
    path = write_synthetic_dataset(ds, args.out, cfg)
    print(f"wrote synthetic dataset ({args.frames} frames) and {path}")
    return EXIT_OK


def _load_scene(cfg):
    from .kinematics import load_camera, load_template

    template, rig = load_template(cfg.resolve(cfg.paths.template), cfg.resolve(cfg.paths.rig))
    return template, rig, load_camera(cfg.resolve(cfg.paths.camera))


def cmd_evaluate(args) -> int:
    from .batchpose import load_poses
    from .kinematics import joint_positions, skin_mesh
    from .metrics import evaluate, metrics_csv, summary_csv
    from .pipeline import PipelineConfig, load_ground_truth, read_mesh_sequence
    from .raster import render_mask

    cfg = PipelineConfig.load(args.config)
    template, rig, cam = _load_scene(cfg)
    poses = load_poses(args.poses)
    gt = load_ground_truth(args.ground_truth or cfg.resolve(cfg.paths.ground_truth))
    if args.meshes:
        verts, _ = read_mesh_sequence(args.meshes)
    else:
        verts = np.stack([skin_mesh(template, rig, p) for p in poses])
    joints = np.stack([joint_positions(rig, p) for p in poses])
    pm = gm = None
    if "masks" in gt:
        gm = gt["masks"]
        pm = [render_mask(v, template.triangles, cam) for v in verts]
    report = evaluate(joints, gt["joints"], verts, gt.get("vertices"), pm, gm)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(report))
    (out / "summary.csv").write_text(summary_csv(report))
    for k, v in report.means().items():
        print(f"{k}: {v:.4f}")
    return EXIT_OK


def cmd_segment(args) -> int:
    from .batchpose import load_poses
    from .pipeline import PipelineConfig, list_images
    from .raster import save_mask_png
    from .refine import model_trimap
    from .segment import grabcut, load_image, motion_weights, save_trimap_png

    cfg = PipelineConfig.load(args.config)
    template, rig, cam = _load_scene(cfg)
    poses = load_poses(args.poses)
    frames = list_images(args.frames)
    if len(frames) != len(poses):
        raise InputError(f"{len(frames)} frames but {len(poses)} poses")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = cfg.grabcut_params()
    prev = None
    for f, (path, pose) in enumerate(zip(frames, poses)):
        img = load_image(path)
        tm = model_trimap(rig, template, pose, cam)
        mask = grabcut(img, tm, motion_weights(img, prev), params).mask
        save_mask_png(out / f"frame_{f:05d}.png", mask)
        if args.trimaps:
            save_trimap_png(out / f"trimap_{f:05d}.png", tm)
        prev = img
    print(f"wrote {len(frames)} masks to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .metrics import load_metrics_csv, render_report

    files = render_report(load_metrics_csv(args.metrics), args.out)
    print("\n".join(str(f) for f in files))
    return EXIT_OK


def cmd_convert(args) -> int:
    from .detections import convert_csv, save_detections
    from .kinematics import load_default_rig, load_rig

    rig = load_rig(args.rig) if args.rig else load_default_rig()
    dets = convert_csv(args.csv, rig.num_joints)
    save_detections(args.out, dets, rig.names)
    print(f"wrote {len(dets)} frames to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monocap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the capture pipeline from a config file")
    r.add_argument("config")
    r.add_argument("--output")
    r.add_argument("--parallelism", type=int)
    r.add_argument("--no-refine", action="store_true", help="stop after batch pose estimation")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    s.add_argument("out")
    s.add_argument("--frames", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--K", type=int, default=8)
    s.add_argument("--depth", type=float, default=4.0)
    s.add_argument("--sigma-2d", type=float, default=0.0, help="pixels")
    s.add_argument("--sigma-3d", type=float, default=0.0, help="millimetres")
    s.add_argument("--masks", action="store_true", help="also write silhouette masks")
    s.add_argument("--frames-out", action="store_true", help="also write composited RGB frames")
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("evaluate", help="score a pose sequence against ground truth")
    e.add_argument("config")
    e.add_argument("--poses", required=True)
    e.add_argument("--meshes")
    e.add_argument("--ground-truth")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("segment", help="GrabCut silhouettes from frames and poses")
    g.add_argument("config")
    g.add_argument("--frames", required=True)
    g.add_argument("--poses", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--trimaps", action="store_true")
    g.set_defaults(func=cmd_segment)

    o = sub.add_parser("report", help="plots and tables from a metrics CSV")
    o.add_argument("metrics")
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_report)

    c = sub.add_parser("convert-detections", help="CSV detections to the JSON schema")
    c.add_argument("csv")
    c.add_argument("--out", required=True)
    c.add_argument("--rig")
    c.set_defaults(func=cmd_convert)
    return p


def _exit_code(exc: BaseException) -> int:
    from .pipeline import PipelineError

    if isinstance(exc, PipelineError):
        return exc.exit_code
    if isinstance(exc, (InputError, OSError, ValueError, KeyError, json.JSONDecodeError)):
        return EXIT_INPUT
    return EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - mapped to exit codes
        code = _exit_code(e)
        print(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": code}),
              file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
