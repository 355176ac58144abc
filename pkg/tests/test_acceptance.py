"""Acceptance suite: every shipped criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one line per
criterion. Criterion 5's zero-perturbation variant is known-red: the
pixel-quantized z-buffer reference makes sub-1e-5 reconstruction unreachable
in a box room (see the assertion message for the measured value); it is kept
faithful rather than loosened.
"""

import json
import math
import os
import time

import numpy as np
import pytest

from scenegrow import (
    CameraIntrinsics,
    CameraPose,
    ConstructionConfig,
    OracleProvider,
    PointCloud,
    RgbdFrame,
    SplatScene,
    SyntheticWorld,
    TrainingView,
    ValidityMask,
    apply_warp,
    build_warp_field,
    extract_boundary,
    fit_depth_scale,
    generate_training_views,
    gradient_check,
    init_splats,
    lift_rgbd,
    make_trajectory,
    optimize,
    project_cloud,
    psnr,
    render_splats,
    render_world,
    run_construction,
    save_checkpoint,
    surface_distance,
)
from scenegrow.cli import _interpolate_pose, main
from scenegrow.geometry import pixel_rays_world, ray_l1_norms
from scenegrow.splats import OptimizeSchedule, _logit

from conftest import random_frame, random_intrinsics, random_pose
from test_geometry import brute_force_project
from test_alignment import golden_section_scale
from test_splats import brute_composite, random_scene, smooth_for_fd


def report(name: str, detail: str):
    print(f"PASS {name}: {detail}")


ACCEPT_INTR = CameraIntrinsics(fx=96.0, fy=96.0, cx=32.0, cy=32.0, width=64, height=64)


def build_room(sphere_count=0, seed=11):
    return SyntheticWorld.make(size=4.0, seed=seed, texture="gradient",
                               sphere_count=sphere_count)


def construction_run(world, perturb, steps=8, yaw_total=80.0, provider_seed=5):
    traj = make_trajectory(
        "lookaround", {"steps": steps, "yaw_total_deg": yaw_total}, ACCEPT_INTR
    )
    frame0 = render_world(world, ACCEPT_INTR, traj.poses[0])
    provider = OracleProvider(world, seed=provider_seed, perturb_depth_scale=perturb)
    step_views = []

    def on_step(record, frame, mask, depth):
        step_views.append(
            TrainingView(frame=frame, mask=ValidityMask.ones(64, 64), pose=record.pose)
        )

    config = ConstructionConfig(input=frame0, intr=ACCEPT_INTR, trajectory=traj)
    cloud, records = run_construction(config, provider, on_step=on_step)
    return cloud, records, provider, traj, step_views


def test_01_geometry_round_trip():
    start = time.time()
    rng = np.random.default_rng(101)
    for _ in range(100):
        intr = random_intrinsics(rng, max_size=64)
        frame = random_frame(rng, intr.height, intr.width)
        pose = random_pose(rng)
        cloud = lift_rgbd(frame, None, intr, pose)
        reproj, mask = project_cloud(cloud, intr, pose)
        assert mask.as_bool().all()
        rel = np.abs(reproj.depth - frame.depth) / frame.depth
        assert rel.max() <= 1e-6
        assert np.array_equal(reproj.rgb, frame.rgb)
    elapsed = time.time() - start
    assert elapsed < 10.0
    report("criterion-1 geometry round trip",
           f"100 frames exact (depth rel <= 1e-6, colors bit-equal) in {elapsed:.1f}s")


def test_02_zbuffer_matches_brute_force():
    start = time.time()
    rng = np.random.default_rng(202)
    for trial in range(50):
        n = int(rng.integers(100, 10_001))
        intr = random_intrinsics(rng, max_size=32)
        pose = random_pose(rng)
        positions = rng.uniform(-2, 2, size=(n, 3)) + np.array([0, 0, rng.uniform(1, 4)])
        cloud = PointCloud(positions, rng.uniform(0, 1, size=(n, 3)))
        frame, mask = project_cloud(cloud, intr, pose)
        brute_depth, brute_idx = brute_force_project(cloud, intr, pose)
        got = np.where(np.isfinite(frame.depth), frame.depth, np.inf)
        assert np.array_equal(got, brute_depth)
        assert np.array_equal(mask.as_bool(), brute_idx >= 0)
        sel = brute_idx >= 0
        assert np.array_equal(frame.rgb[sel], cloud.colors[brute_idx[sel]])
    elapsed = time.time() - start
    assert elapsed < 30.0
    report("criterion-2 z-buffer oracle equivalence",
           f"50 clouds bit-exact vs per-pixel minimum search in {elapsed:.1f}s")


def test_03_depth_scale_recovery():
    start = time.time()
    rng = np.random.default_rng(303)
    world = build_room(sphere_count=2, seed=3)
    worst_rel = 0.0
    for trial in range(50):
        yaw_a = rng.uniform(-math.pi, math.pi)
        yaw_b = yaw_a + rng.uniform(-0.35, 0.35)
        pose_a = CameraPose.from_yaw_pitch(yaw_a, 0.0)
        pose_b = CameraPose.from_yaw_pitch(yaw_b, 0.0)
        base = lift_rgbd(render_world(world, ACCEPT_INTR, pose_a), None, ACCEPT_INTR, pose_a)
        ref, mask = project_cloud(base, ACCEPT_INTR, pose_b)
        s = float(np.exp(rng.uniform(np.log(0.25), np.log(4.0))))
        est = render_world(world, ACCEPT_INTR, pose_b).depth * s
        rays = ray_l1_norms(ACCEPT_INTR, pose_b)
        fit = fit_depth_scale(est, ref.depth, mask, ray_norms=rays)
        assert fit.converged
        rel = abs(fit.d - 1.0 / s) * s
        worst_rel = max(worst_rel, rel)
        assert rel <= 0.02
        _, loss_gs = golden_section_scale(est, ref.depth, mask, ray_norms=rays)
        assert fit.final_loss <= loss_gs * (1 + 1e-3) + 1e-12
    elapsed = time.time() - start
    assert elapsed < 20.0
    report("criterion-3 depth-scale recovery",
           f"50 cases within 2% of 1/s (worst {worst_rel * 100:.2f}%), "
           f"loss within 1e-3 of golden-section, {elapsed:.1f}s")


def test_04_seam_closure():
    rng = np.random.default_rng(404)
    world = build_room(sphere_count=0, seed=7)
    checked_boundary = 0
    for trial in range(25):
        yaw = rng.uniform(-math.pi, math.pi)
        dyaw = rng.uniform(0.12, 0.3) * (1 if trial % 2 == 0 else -1)
        pose_a = CameraPose.from_yaw_pitch(yaw, 0.0)
        pose_b = CameraPose.from_yaw_pitch(yaw + dyaw, 0.0)
        base = lift_rgbd(render_world(world, ACCEPT_INTR, pose_a), None, ACCEPT_INTR, pose_a)
        ref, mask = project_cloud(base, ACCEPT_INTR, pose_b)
        s = float(np.exp(rng.uniform(np.log(0.25), np.log(4.0))))
        truth = render_world(world, ACCEPT_INTR, pose_b)
        est = truth.depth * s
        fit = fit_depth_scale(est, ref.depth, mask,
                              ray_norms=ray_l1_norms(ACCEPT_INTR, pose_b))
        scaled = fit.d * est
        field = build_warp_field(scaled, mask, ref.depth, ACCEPT_INTR, pose_b)
        frame = RgbdFrame(truth.rgb, scaled)
        cloud, _ = apply_warp(frame, mask, field, ACCEPT_INTR, pose_b)

        holes = np.nonzero((mask.mask == 0).reshape(-1))[0]
        index_of = {flat: i for i, flat in enumerate(holes)}
        cam = pose_b.to_camera(cloud.positions)
        boundary, neighbors = extract_boundary(mask)
        for (r, c), (nr, nc) in zip(boundary, neighbors):
            i = index_of[r * 64 + c]
            assert abs(cam[i, 2] - ref.depth[nr, nc]) <= 1e-6
            checked_boundary += 1
        rays = pixel_rays_world(ACCEPT_INTR, pose_b).reshape(64 * 64, 3)[holes]
        rel = cloud.positions - pose_b.camera_center[None, :]
        cross = np.cross(rel, rays)
        scale_ref = np.linalg.norm(rel, axis=1) * np.linalg.norm(rays, axis=1)
        assert (np.linalg.norm(cross, axis=1) / scale_ref).max() <= 1e-9
        assert np.array_equal(cloud.colors, truth.rgb[mask.mask == 0])
    report("criterion-4 seam closure",
           f"25 instances, {checked_boundary} boundary pixels land within 1e-6 m, "
           "ray constraint <= 1e-9, colors bit-equal")


def test_05_end_to_end_with_perturbation():
    start = time.time()
    world = build_room()
    cloud, records, provider, _, _ = construction_run(world, perturb=True)
    d = surface_distance(world, cloud.positions)
    rmse = float(np.sqrt(np.mean(d**2)))
    assert rmse <= 5e-3, f"RMSE {rmse * 1000:.2f} mm exceeds 5 mm"
    for rec in records[1:]:
        s = provider.applied_scales[rec.step]
        assert rec.scale_fit.converged
        assert abs(rec.scale_fit.d - 1.0 / s) <= 0.02 / s
    elapsed = time.time() - start
    assert elapsed < 120.0
    report("criterion-5 end-to-end (perturbation ON)",
           f"cloud RMSE {rmse * 1000:.2f} mm <= 5 mm, all scales within 2%, "
           f"{elapsed:.1f}s")


def test_05b_end_to_end_exact_depth_known_red():
    """Faithful to the stated 1e-5 m bound; fails at the quantization floor.

    The projected reference depth is the minimum camera-z of the points that
    round into each pixel, so at s=1 the fitted coefficient lands at the
    quantization-skewed median (~0.9965, matching the golden-section optimum
    of the same objective) and seam residuals carry one pixel of depth
    gradient. Both effects are properties of the single-pixel z-buffered
    projection, not of the optimizer; the measured RMSE equals the
    perturbation-ON value to float precision.
    """
    world = build_room()
    cloud, records, _, _, _ = construction_run(world, perturb=False)
    d = surface_distance(world, cloud.positions)
    rmse = float(np.sqrt(np.mean(d**2)))
    if rmse > 1e-5:
        print(f"FAIL criterion-5 end-to-end (perturbation OFF): cloud RMSE "
              f"{rmse:.6e} m > 1e-5 m (z-buffer quantization floor)")
    assert rmse <= 1e-5, (
        f"RMSE {rmse:.6e} m exceeds the stated 1e-5 m bound; quantization of "
        "the z-buffered reference keeps this criterion red (see docstring)"
    )
    report("criterion-5 end-to-end (perturbation OFF)", f"cloud RMSE {rmse:.2e} m")


def test_06_gradient_check():
    start = time.time()
    rng = np.random.default_rng(606)
    intr = CameraIntrinsics(fx=20.0, fy=20.0, cx=8.0, cy=8.0, width=16, height=16)
    pose = CameraPose.identity()
    worst = 0.0
    checked = 0
    attempts = 0
    while checked < 50 and attempts < 400:
        attempts += 1
        scene = random_scene(rng, 6, intr)
        if not smooth_for_fd(scene, intr, pose, 1e-5):
            continue
        target = RgbdFrame(rng.uniform(0, 1, size=(16, 16, 3)), np.full((16, 16), 1.0))
        mask = ValidityMask((rng.random((16, 16)) < 0.8).astype(np.uint8))
        if not mask.as_bool().any():
            continue
        view = TrainingView(frame=target, mask=mask, pose=pose)
        err = gradient_check(scene, view, intr, epsilon=1e-5)
        worst = max(worst, err)
        assert err <= 1e-4
        checked += 1
    assert checked == 50
    elapsed = time.time() - start
    assert elapsed < 120.0
    report("criterion-6 splat gradient check",
           f"50 scenes, max rel err {worst:.2e} <= 1e-4, {elapsed:.1f}s")


def test_07_compositing_conservation():
    rng = np.random.default_rng(707)
    intr = CameraIntrinsics(fx=20.0, fy=20.0, cx=8.0, cy=8.0, width=16, height=16)
    worst = 0.0
    for trial in range(20):
        scene = random_scene(rng, int(rng.integers(5, 40)), intr)
        pose = CameraPose.from_yaw_pitch(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3))
        _, alpha = render_splats(scene, intr, pose)
        ref_rgb, weight_sum, t_end = brute_composite(scene, intr, pose)
        gap = np.abs(weight_sum + t_end - 1.0).max()
        worst = max(worst, gap)
        assert gap <= 1e-6
        assert np.abs(alpha - weight_sum).max() <= 1e-6
    report("criterion-7 compositing conservation",
           f"20 renders, max |sum(aT) + T_end - 1| = {worst:.2e} <= 1e-6")


def test_08_masked_training_invariance(tmp_path):
    world = build_room()
    cloud, _, _, traj, step_views = construction_run(world, perturb=True, steps=4,
                                                     yaw_total=40.0)
    supp = make_trajectory("retrace", {"base": traj, "count": 6}, ACCEPT_INTR,
                           validate=False)
    extra, _ = generate_training_views(cloud, ACCEPT_INTR, supp)
    views = [v for v in extra if (v.mask.mask == 0).any()]
    assert views, "need views with holes to make the check meaningful"
    scene = init_splats(cloud, voxel_size=0.05)

    rng = np.random.default_rng(808)
    corrupted = []
    for v in views:
        rgb = v.frame.rgb.copy()
        holes = ~v.mask.as_bool()
        rgb[holes] = rng.uniform(0, 1, size=(int(holes.sum()), 3))
        depth = np.where(holes, np.nan, v.frame.depth)
        corrupted.append(TrainingView(frame=RgbdFrame(rgb, depth), mask=v.mask,
                                      pose=v.pose))

    schedule = OptimizeSchedule(iterations=60)
    out_a, hist_a = optimize(scene, views, ACCEPT_INTR, schedule)
    out_b, hist_b = optimize(scene, corrupted, ACCEPT_INTR, schedule)
    assert hist_a == hist_b
    path_a, path_b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(out_a, path_a)
    save_checkpoint(out_b, path_b)
    assert open(path_a, "rb").read() == open(path_b, "rb").read()
    report("criterion-8 masked-training invariance",
           f"{len(views)} hole-bearing views, {len(hist_a)} iterations, "
           "loss history and checkpoint bytes identical under corruption")


def test_09_initialization_race():
    start = time.time()
    world = build_room()
    cloud, _, _, traj, step_views = construction_run(world, perturb=True)
    supp = make_trajectory("retrace", {"base": traj, "count": 16}, ACCEPT_INTR,
                           validate=False)
    extra, _ = generate_training_views(cloud, ACCEPT_INTR, supp)
    views = step_views + extra
    holdout = _interpolate_pose(traj.poses[0], traj.poses[1], 0.25)
    truth = render_world(world, ACCEPT_INTR, holdout)
    target_db = 28.0
    cap, chunk = 120, 30

    def first_crossing(scene):
        rendered, _ = render_splats(scene, ACCEPT_INTR, holdout)
        if psnr(np.clip(rendered, 0, 1), truth.rgb) >= target_db:
            return 0
        done = 0
        while done < cap:
            scene, _ = optimize(scene, views, ACCEPT_INTR,
                                OptimizeSchedule(iterations=chunk))
            done += chunk
            rendered, _ = render_splats(scene, ACCEPT_INTR, holdout)
            if psnr(np.clip(rendered, 0, 1), truth.rgb) >= target_db:
                return done
        return None

    cloud_scene = init_splats(cloud, voxel_size=0.04)
    assert cloud_scene.n <= 20_000
    from scipy.spatial import cKDTree

    outcomes = []
    for seed in range(5):
        rng = np.random.default_rng(900 + seed)
        lo, hi = cloud.positions.min(axis=0), cloud.positions.max(axis=0)
        centers = rng.uniform(lo, hi, size=(cloud_scene.n, 3))
        dist, _ = cKDTree(centers).query(centers, k=4)
        rand_scene = SplatScene(
            centers=centers,
            log_radii=np.log(np.clip(dist[:, 1:].mean(axis=1), 1e-4, 0.1)),
            opacity_logits=np.full(cloud_scene.n, _logit(0.7)),
            colors=rng.uniform(0, 1, size=(cloud_scene.n, 3)),
        )
        cloud_iters = first_crossing(cloud_scene.copy())
        rand_iters = first_crossing(rand_scene)
        assert cloud_iters is not None, f"seed {seed}: cloud init never reached 28 dB"
        effective_rand = math.inf if rand_iters is None else rand_iters
        assert cloud_iters < effective_rand, (
            f"seed {seed}: cloud init needed {cloud_iters}, random {rand_iters}"
        )
        outcomes.append((cloud_iters, rand_iters))
    elapsed = time.time() - start
    assert elapsed < 600.0
    report("criterion-9 initialization advantage",
           f"5/5 seeds: cloud-init crossings {[o[0] for o in outcomes]}, "
           f"random {[o[1] for o in outcomes]} (None = never within {cap}), "
           f"{elapsed:.0f}s, {cloud_scene.n} splats")


def test_10_build_determinism(tmp_path):
    raw = {
        "input": {"prompt": "tidy room"},
        "intrinsics": {"fx": 96.0, "fy": 96.0, "cx": 32.0, "cy": 32.0,
                       "width": 64, "height": 64},
        "trajectory": {"preset": "lookaround",
                       "parameters": {"steps": 8, "yaw_total_deg": 80.0}},
        "steps": 8,
        "extra_views": 16,
        "providers": {"kind": "oracle",
                      "world": {"size": 4.0, "seed": 11, "texture": "gradient",
                                "sphere_count": 0}},
        "seed": 7,
        "splats": {"enabled": True, "iterations": 100, "voxel_size": 0.04},
        "output_dir": str(tmp_path / "out"),
    }
    config_path = tmp_path / "demo.json"
    config_path.write_text(json.dumps(raw))
    tracked = ("manifest.json", "cloud.ply", "splats.ckpt", "loss_history.csv")
    assert main(["build", "--config", str(config_path), "--providers", "oracle",
                 "--seed", "7"]) == 0
    first = {rel: open(os.path.join(raw["output_dir"], rel), "rb").read()
             for rel in tracked}
    assert main(["build", "--config", str(config_path), "--providers", "oracle",
                 "--seed", "7"]) == 0
    for rel in tracked:
        assert open(os.path.join(raw["output_dir"], rel), "rb").read() == first[rel], rel
    report("criterion-10 determinism",
           "two builds byte-identical across manifest, PLY, checkpoint, loss CSV")
