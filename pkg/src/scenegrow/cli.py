"""Command-line surface: build, render, check.

Exit codes: 0 ok, 2 config, 3 provider, 4 pipeline, 5 optimizer, 6 io.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import fileio
from .config import (
    RunConfig,
    make_construction_config,
    make_provider,
    parse_config,
)
from .errors import (
    ConfigError,
    OptimizerError,
    OutputError,
    PipelineError,
    ProviderError,
    SceneGrowError,
)
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    PointCloud,
    ValidityMask,
    project_cloud,
    round_trip_check,
)
from .pipeline import TrainingView, generate_training_views, run_construction
from .providers import InpaintRequest, OracleProvider, ProviderContext
from .splats import (
    SplatScene,
    init_splats,
    load_checkpoint,
    optimize,
    psnr,
    render_splats,
    save_checkpoint,
)
from .trajectory import make_trajectory
from .world import render_world, surface_distance

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROVIDER = 3
EXIT_PIPELINE = 4
EXIT_OPTIMIZER = 5
EXIT_IO = 6


def _pose_to_json(pose: CameraPose) -> dict:
    return {
        "rotation": pose.rotation.tolist(),
        "translation": pose.translation.tolist(),
    }


def _pose_from_json(blob: dict) -> CameraPose:
    return CameraPose(np.array(blob["rotation"]), np.array(blob["translation"]))


def _record_to_json(rec) -> dict:
    fit = None
    if rec.scale_fit is not None:
        fit = {
            "d": rec.scale_fit.d,
            "iterations": rec.scale_fit.iterations,
            "final_loss": rec.scale_fit.final_loss,
            "converged": rec.scale_fit.converged,
        }
    return {
        "step": rec.step,
        "pose": _pose_to_json(rec.pose),
        "image_digest": rec.image_digest,
        "fill_fraction": rec.fill_fraction,
        "scale_fit": fit,
        "points_added": rec.points_added,
        "cloud_size": rec.cloud_size,
        "warp_clamped": rec.warp_clamped,
        "warp_max_correction": rec.warp_max_correction,
        "warning": rec.warning,
    }


def _interpolate_pose(a: CameraPose, b: CameraPose, f: float) -> CameraPose:
    from scipy.spatial.transform import Rotation, Slerp

    slerp = Slerp([0.0, 1.0], Rotation.from_matrix(np.stack([a.rotation, b.rotation])))
    rot = slerp([f]).as_matrix()[0]
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    eye = (1 - f) * a.camera_center + f * b.camera_center
    return CameraPose(rot, -rot @ eye)


class _BuildOutputs:
    """Collects written artifacts (path -> sha256) for the manifest."""

    def __init__(self, root: str):
        self.root = root
        self.files: dict[str, str] = {}

    def path(self, relative: str) -> str:
        return os.path.join(self.root, relative)

    def record(self, relative: str) -> None:
        self.files[relative] = fileio.sha256_file(self.path(relative))

    def write_manifest(self, manifest: dict) -> None:
        manifest = dict(manifest)
        manifest["outputs"] = {rel: {"sha256": digest} for rel, digest in sorted(self.files.items())}
        blob = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
        fileio.atomic_write_bytes(self.path("manifest.json"), blob.encode())


def _write_step_artifacts(out: _BuildOutputs, record, frame, mask, depth) -> list[str]:
    stem = f"steps/step_{record.step:03d}"
    fileio.save_png_rgb(out.path(stem + ".png"), frame.rgb)
    fileio.save_png_mask(out.path(stem + "_mask.png"), mask)
    fileio.save_png_depth16(out.path(stem + "_depth16.png"), depth)
    fileio.save_depth_npy(out.path(stem + "_depth.npy"), depth)
    names = [stem + ".png", stem + "_mask.png", stem + "_depth16.png", stem + "_depth.npy"]
    for name in names:
        out.record(name)
    return names


def cmd_build(args) -> int:
    config = _load_config_with_overrides(args)
    provider = make_provider(config)
    world = getattr(provider, "world", None)
    out = _BuildOutputs(config.output_dir)
    os.makedirs(out.root, exist_ok=True)

    manifest: dict = {
        "format_version": 1,
        "config": config.to_dict(),
        "provider": getattr(provider, "name", type(provider).__name__),
        "seed": config.seed,
    }

    step_views: list[TrainingView] = []
    step_files: list[list[str]] = []

    def on_step(record, frame, mask, depth):
        step_files.append(_write_step_artifacts(out, record, frame, mask, depth))
        h, w = config.intrinsics.shape
        step_views.append(
            TrainingView(frame=frame, mask=ValidityMask.ones(h, w), pose=record.pose)
        )

    construction = make_construction_config(config, provider)
    try:
        cloud, records = run_construction(construction, provider, on_step=on_step)
    except PipelineError as exc:
        manifest["steps"] = [_record_to_json(r) for r in exc.records]
        manifest["error"] = {"stage": "construction", "step": exc.step, "message": str(exc)}
        out.write_manifest(manifest)
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.__cause__
        return EXIT_PROVIDER if isinstance(cause, ProviderError) else EXIT_PIPELINE

    manifest["steps"] = [_record_to_json(r) for r in records]
    manifest["step_files"] = step_files
    if isinstance(provider, OracleProvider):
        manifest["oracle_depth_scales"] = {
            str(k): v for k, v in sorted(provider.applied_scales.items())
        }

    fileio.export_ply(cloud, out.path("cloud.ply"))
    out.record("cloud.ply")
    manifest["cloud"] = {"points": len(cloud), "file": "cloud.ply"}

    supplemental = make_trajectory(
        "retrace",
        {"base": construction.trajectory, "count": config.extra_views},
        config.intrinsics,
        validate=False,
    )
    extra_views, excluded = generate_training_views(cloud, config.intrinsics, supplemental)
    view_files = []
    for i, view in enumerate(extra_views):
        stem = f"views/view_{i:03d}"
        fileio.save_png_rgb(out.path(stem + ".png"), view.frame.rgb)
        fileio.save_png_mask(out.path(stem + "_mask.png"), view.mask)
        out.record(stem + ".png")
        out.record(stem + "_mask.png")
        view_files.append(
            {"rgb": stem + ".png", "mask": stem + "_mask.png", "pose": _pose_to_json(view.pose)}
        )
    manifest["training_views"] = {
        "requested": config.extra_views,
        "kept": len(extra_views),
        "excluded": excluded,
        "files": view_files,
    }

    metrics: dict = {}
    if world is not None:
        rmse = float(np.sqrt(np.mean(surface_distance(world, cloud.positions) ** 2)))
        metrics["cloud_rmse_m"] = rmse

    if config.splats_enabled:
        try:
            scene = init_splats(
                cloud,
                voxel_size=config.splat_voxel_size,
                background=config.splat_background,
            )
            train_set = step_views + extra_views
            scene, history = optimize(
                scene, train_set, config.intrinsics, config.splat_schedule
            )
        except OptimizerError as exc:
            if exc.last_scene is not None:
                save_checkpoint(exc.last_scene, out.path("splats.ckpt"))
                out.record("splats.ckpt")
            manifest["error"] = {"stage": "optimize", "message": str(exc)}
            out.write_manifest(manifest)
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_OPTIMIZER
        save_checkpoint(
            scene,
            out.path("splats.ckpt"),
            schedule_state=config.splat_schedule.to_dict(),
        )
        out.record("splats.ckpt")
        csv = "iteration,loss\n" + "".join(
            f"{i},{loss!r}\n" for i, loss in enumerate(history)
        )
        fileio.atomic_write_bytes(out.path("loss_history.csv"), csv.encode())
        out.record("loss_history.csv")
        manifest["splats"] = {
            "count": scene.n,
            "iterations": len(history),
            "final_loss": history[-1] if history else None,
            "checkpoint": "splats.ckpt",
        }
        if world is not None and len(construction.trajectory.poses) >= 2:
            holdout = _interpolate_pose(
                construction.trajectory.poses[0], construction.trajectory.poses[1], 0.25
            )
            truth = render_world(world, config.intrinsics, holdout)
            rendered, _ = render_splats(scene, config.intrinsics, holdout)
            metrics["splat_holdout_psnr_db"] = psnr(rendered, truth.rgb)

    manifest["metrics"] = metrics
    out.write_manifest(manifest)
    print(f"build complete: {out.path('manifest.json')}")
    if metrics:
        for key, value in sorted(metrics.items()):
            print(f"  {key} = {value:.6g}")
    return EXIT_OK


def _load_config_with_overrides(args) -> RunConfig:
    config = parse_config(args.config)
    raw = config.to_dict()
    if getattr(args, "providers", None):
        if args.providers == "oracle":
            raw["providers"] = {"kind": "oracle", "world": {}}
        elif args.providers == "remote":
            raw["providers"] = {"kind": "remote", "base_url": args.remote_url or ""}
        else:
            raise ConfigError(f"unknown provider override {args.providers!r}")
    if getattr(args, "remote_url", None) and raw["providers"].get("kind") == "remote":
        raw["providers"]["base_url"] = args.remote_url
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "output", None):
        raw["output_dir"] = args.output
    if getattr(args, "trajectory", None):
        raw.setdefault("trajectory", {})["preset"] = args.trajectory
    if getattr(args, "steps", None) is not None:
        raw["steps"] = args.steps
    if getattr(args, "extra_views", None) is not None:
        raw["extra_views"] = args.extra_views
    if getattr(args, "no_splats", False):
        raw.setdefault("splats", {})["enabled"] = False
    return parse_config(raw)


def _poses_for_render(args, intr: CameraIntrinsics) -> list[CameraPose]:
    if args.pose:
        blob = json.loads(args.pose)
        if "rotation" in blob:
            return [_pose_from_json(blob)]
        return [
            CameraPose.from_yaw_pitch(
                math.radians(blob.get("yaw_deg", 0.0)),
                math.radians(blob.get("pitch_deg", 0.0)),
                blob.get("center", (0.0, 0.0, 0.0)),
            )
        ]
    if args.pose_step is not None:
        if not args.manifest:
            raise ConfigError("--pose-step needs --manifest")
        with open(args.manifest) as fh:
            manifest = json.load(fh)
        steps = manifest.get("steps", [])
        if not (0 <= args.pose_step < len(steps)):
            raise ConfigError(f"--pose-step {args.pose_step} out of range 0..{len(steps) - 1}")
        return [_pose_from_json(steps[args.pose_step]["pose"])]
    if args.trajectory:
        params = json.loads(args.traj_params) if args.traj_params else {}
        traj = make_trajectory(args.trajectory, params, intr, validate=False)
        return list(traj.poses)
    raise ConfigError("render needs one of --pose, --pose-step, or --trajectory")


def _intrinsics_for_render(args) -> CameraIntrinsics:
    if args.intrinsics:
        blob = json.loads(args.intrinsics)
        return CameraIntrinsics(
            fx=blob["fx"], fy=blob["fy"], cx=blob["cx"], cy=blob["cy"],
            width=blob["width"], height=blob["height"],
        )
    if args.manifest:
        with open(args.manifest) as fh:
            manifest = json.load(fh)
        blob = manifest["config"]["intrinsics"]
        return CameraIntrinsics(
            fx=blob["fx"], fy=blob["fy"], cx=blob["cx"], cy=blob["cy"],
            width=blob["width"], height=blob["height"],
        )
    raise ConfigError("render needs --intrinsics or --manifest")


def cmd_render(args) -> int:
    intr = _intrinsics_for_render(args)
    poses = _poses_for_render(args, intr)
    if not poses:
        print("warning: empty trajectory, nothing to render")
        return EXIT_OK
    os.makedirs(args.out, exist_ok=True)

    if args.checkpoint:
        scene, _ = load_checkpoint(args.checkpoint)
        for i, pose in enumerate(poses):
            rgb, _ = render_splats(scene, intr, pose)
            fileio.save_png_rgb(os.path.join(args.out, f"render_{i:03d}.png"), np.clip(rgb, 0, 1))
    else:
        cloud = fileio.load_ply(args.ply)
        for i, pose in enumerate(poses):
            frame, mask = project_cloud(cloud, intr, pose)
            fileio.save_png_rgb(os.path.join(args.out, f"render_{i:03d}.png"), frame.rgb)
            fileio.save_png_mask(os.path.join(args.out, f"render_{i:03d}_mask.png"), mask)
    print(f"rendered {len(poses)} view(s) to {args.out}")
    return EXIT_OK


def _brute_composite(scene: SplatScene, intr, pose):
    """Independent per-pixel compositing used by the self-check."""
    h, w = intr.shape
    cam = pose.to_camera(scene.centers)
    order = np.argsort(cam[:, 2], kind="stable")
    focal = 0.5 * (intr.fx + intr.fy)
    weight_sum = np.zeros((h, w))
    t_end = np.ones((h, w))
    for idx in order:
        x, y, z = cam[idx]
        if z <= 1e-4:
            continue
        u = intr.fx * x / z + intr.cx - 0.5
        v = intr.fy * y / z + intr.cy - 0.5
        sigma = scene.radii[idx] * focal / z
        for py in range(h):
            for px in range(w):
                d2 = (px - u) ** 2 + (py - v) ** 2
                if d2 <= (3.0 * sigma) ** 2:
                    alpha = min(scene.opacities[idx] * math.exp(-0.5 * d2 / sigma**2),
                                1.0 - 1e-12)
                    weight_sum[py, px] += alpha * t_end[py, px]
                    t_end[py, px] *= 1.0 - alpha
    return weight_sum, t_end


def cmd_check(args) -> int:
    config = parse_config(args.config)
    provider = make_provider(config)
    world = getattr(provider, "world", None)
    intr = config.intrinsics
    rng = np.random.default_rng(config.seed)
    results: list[tuple[str, bool, str]] = []

    def report(name: str, ok: bool, detail: str):
        results.append((name, ok, detail))
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")

    pose0 = CameraPose.identity()
    if world is not None:
        frame0 = render_world(world, intr, pose0)
        rt = round_trip_check(frame0, intr, pose0)
        report(
            "geometry-round-trip",
            rt.max_depth_residual <= 1e-6 and rt.color_mismatches == 0,
            f"max depth residual {rt.max_depth_residual:.2e}, "
            f"{rt.color_mismatches} color mismatches",
        )

        positions = rng.uniform(-1.5, 1.5, size=(500, 3)) + np.array([0, 0, 2.5])
        colors = rng.uniform(0, 1, size=(500, 3))
        cloud = PointCloud(positions, colors)
        frame, mask = project_cloud(cloud, intr, pose0)
        brute_depth = np.full(intr.shape, np.inf)
        brute_idx = np.full(intr.shape, -1)
        cam = pose0.to_camera(positions)
        for i in range(len(positions)):
            x, y, z = cam[i]
            if z <= 1e-4:
                continue
            u = int(np.rint(intr.fx * x / z + intr.cx - 0.5))
            v = int(np.rint(intr.fy * y / z + intr.cy - 0.5))
            if 0 <= u < intr.width and 0 <= v < intr.height and z < brute_depth[v, u]:
                brute_depth[v, u] = z
                brute_idx[v, u] = i
        got = np.where(np.isfinite(frame.depth), frame.depth, np.inf)
        report(
            "zbuffer-brute-force",
            bool(np.array_equal(got, brute_depth) and ((brute_idx >= 0) == mask.as_bool()).all()),
            "projected depth equals per-pixel minimum search",
        )

        mask_rand = ValidityMask((rng.random(intr.shape) < 0.5).astype(np.uint8))
        context = ProviderContext(intr=intr, pose=pose0, step=1)
        partial = rng.uniform(0, 1, size=(intr.height, intr.width, 3))
        filled = provider.inpaint(InpaintRequest(partial, mask_rand, ""), context)
        keep = mask_rand.as_bool()
        ok = np.array_equal(filled[keep], partial[keep]) and np.array_equal(
            filled[~keep], frame0.rgb[~keep]
        )
        report("inpaint-preservation", ok, "kept pixels verbatim, holes from the world")

        est = provider.estimate_depth(partial, context)
        scale = provider.scale_for_step(1)
        ok = bool(np.abs(est / scale - frame0.depth).max() <= 1e-9)
        report("depth-scale-contract", ok, f"scale {scale:.4f} unwinds to analytic depth")

        from .alignment import fit_depth_scale

        s = float(np.exp(rng.uniform(np.log(0.25), np.log(4.0))))
        fit = fit_depth_scale(frame0.depth * s, frame0.depth, ValidityMask.ones(*intr.shape))
        ok = abs(fit.d - 1.0 / s) <= 0.02 / s
        report("scale-fit-recovery", ok, f"recovered {fit.d:.5f} for true {1.0 / s:.5f}")
    else:
        print("SKIP oracle checks: remote provider configured")

    small = SplatScene(
        centers=rng.uniform(-0.5, 0.5, size=(20, 3)) + np.array([0, 0, 2.0]),
        log_radii=np.log(rng.uniform(0.02, 0.08, size=20)),
        opacity_logits=rng.uniform(-1, 1, size=20),
        colors=rng.uniform(0, 1, size=(20, 3)),
    )
    _, alpha = render_splats(small, intr, pose0)
    weight_sum, t_end = _brute_composite(small, intr, pose0)
    conservation = np.abs(weight_sum + t_end - 1.0).max()
    report(
        "compositing-conservation",
        bool(conservation <= 1e-6 and np.abs(alpha - weight_sum).max() <= 1e-6),
        f"max |sum(alpha T) + T_end - 1| = {conservation:.2e}",
    )

    failed = [name for name, ok, _ in results if not ok]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_PIPELINE
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenegrow",
        description="Grow a 3D point-cloud scene from one image and fit Gaussian splats.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="run the full construction + optimization pipeline")
    b.add_argument("--config", required=True, help="path to a JSON run config")
    b.add_argument("--providers", choices=["oracle", "remote"], help="override provider kind")
    b.add_argument("--seed", type=int, help="override config seed")
    b.add_argument("--output", help="override output directory")
    b.add_argument("--trajectory", help="override trajectory preset name")
    b.add_argument("--steps", type=int, help="override construction step count N")
    b.add_argument("--extra-views", type=int, dest="extra_views",
                   help="override supplemental view count M")
    b.add_argument("--remote-url", dest="remote_url", help="remote provider base URL")
    b.add_argument("--no-splats", action="store_true", dest="no_splats",
                   help="skip splat optimization")
    b.set_defaults(func=cmd_build)

    r = sub.add_parser("render", help="render a checkpoint or PLY at given pose(s)")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="splat checkpoint file")
    src.add_argument("--ply", help="point cloud PLY file")
    r.add_argument("--manifest", help="manifest to pull intrinsics/poses from")
    r.add_argument("--intrinsics", help="intrinsics as inline JSON")
    r.add_argument("--pose", help="pose as inline JSON (yaw_deg/pitch_deg/center or R,t)")
    r.add_argument("--pose-step", type=int, dest="pose_step",
                   help="use the pose of this construction step from --manifest")
    r.add_argument("--trajectory", help="trajectory preset for a turntable sequence")
    r.add_argument("--traj-params", dest="traj_params", help="preset parameters as JSON")
    r.add_argument("--out", required=True, help="output directory for PNG files")
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("check", help="run fast self-checks against a config")
    c.add_argument("--config", required=True)
    c.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except OptimizerError as exc:
        print(f"optimizer error: {exc}", file=sys.stderr)
        return EXIT_OPTIMIZER
    except PipelineError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except OutputError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SceneGrowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
