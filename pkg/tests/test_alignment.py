"""Scale fit vs golden-section oracle; boundary/warp closed-form checks."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from scenegrow import (
    CameraIntrinsics,
    CameraPose,
    NoCorrespondenceError,
    RgbdFrame,
    ValidityMask,
    apply_warp,
    build_warp_field,
    extract_boundary,
    fit_depth_scale,
    lift_rgbd,
)
from scenegrow.geometry import pixel_rays_world


def golden_section_scale(est, ref, mask, ray_norms=None, lo=1e-3, hi=1e3, iters=200):
    """Independent 1-D minimizer of the same weighted L1 objective."""
    sel = mask.as_bool() & np.isfinite(ref) & (ref > 0)
    a, b = est[sel], ref[sel]
    w = np.ones_like(a) if ray_norms is None else ray_norms[sel]

    def loss(d):
        return float(np.mean(w * np.abs(d * a - b)))

    phi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - phi * (hi - lo)
    x2 = lo + phi * (hi - lo)
    f1, f2 = loss(x1), loss(x2)
    for _ in range(iters):
        if f1 > f2:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + phi * (hi - lo)
            f2 = loss(x2)
        else:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - phi * (hi - lo)
            f1 = loss(x1)
    d = 0.5 * (lo + hi)
    return d, loss(d)


class TestScaleFit:
    def test_identical_depths_give_unit_scale(self):
        depth = np.full((8, 8), 2.5)
        report = fit_depth_scale(depth, depth, ValidityMask.ones(8, 8))
        assert report.d == 1.0
        assert report.final_loss == 0.0
        assert report.converged

    def test_half_depth_recovers_two(self):
        rng = np.random.default_rng(0)
        ref = rng.uniform(1.0, 4.0, size=(16, 16))
        report = fit_depth_scale(0.5 * ref, ref, ValidityMask.ones(16, 16), tol=1e-4)
        assert report.converged
        assert report.d == pytest.approx(2.0, abs=2e-3)

    def test_outliers_beat_least_squares(self):
        rng = np.random.default_rng(1)
        s = 0.6
        ref = rng.uniform(1.0, 4.0, size=(32, 32))
        est = s * ref
        n_out = int(0.05 * est.size)
        flat = est.reshape(-1)
        idx = rng.choice(est.size, size=n_out, replace=False)
        flat[idx] *= rng.choice([0.1, 10.0], size=n_out)  # salt and pepper
        est = flat.reshape(est.shape)
        mask = ValidityMask.ones(32, 32)
        report = fit_depth_scale(est, ref, mask)
        true_d = 1.0 / s
        assert abs(report.d - true_d) <= 0.02 * true_d
        # Closed-form least squares is dragged further by the outliers.
        lsq = float((est * ref).sum() / (est * est).sum())
        assert abs(lsq - true_d) > abs(report.d - true_d)
        # And the L1 loss matches an independent golden-section search.
        d_gs, loss_gs = golden_section_scale(est, ref, mask)
        assert report.final_loss <= loss_gs * (1 + 1e-3) + 1e-12

    def test_ray_norm_weights_change_objective_consistently(self):
        rng = np.random.default_rng(2)
        intr = CameraIntrinsics(fx=10.0, fy=10.0, cx=8.0, cy=8.0, width=16, height=16)
        pose = CameraPose.from_yaw_pitch(0.3, -0.2)
        rays = np.abs(pixel_rays_world(intr, pose)).sum(axis=-1)
        ref = rng.uniform(1.0, 3.0, size=(16, 16))
        est = 0.8 * ref + rng.normal(0, 0.05, size=(16, 16))
        est = np.clip(est, 0.1, None)
        mask = ValidityMask.ones(16, 16)
        report = fit_depth_scale(est, ref, mask, ray_norms=rays)
        d_gs, loss_gs = golden_section_scale(est, ref, mask, ray_norms=rays)
        assert report.final_loss <= loss_gs * (1 + 1e-3) + 1e-12
        assert report.d == pytest.approx(d_gs, rel=5e-3)

    def test_scale_equivariance(self):
        rng = np.random.default_rng(3)
        ref = rng.uniform(0.5, 5.0, size=(16, 16))
        est = 1.7 * ref + rng.normal(0, 0.02, size=(16, 16))
        est = np.clip(est, 0.05, None)
        mask = ValidityMask.ones(16, 16)
        base = fit_depth_scale(est, ref, mask)
        for k in (0.25, 3.0):
            scaled = fit_depth_scale(k * est, ref, mask)
            assert scaled.d == pytest.approx(base.d / k, rel=1e-3)

    def test_no_overlap_raises(self):
        est = np.full((4, 4), 1.0)
        ref = np.full((4, 4), np.nan)
        with pytest.raises(NoCorrespondenceError, match="no correspondence"):
            fit_depth_scale(est, ref, ValidityMask.ones(4, 4))
        with pytest.raises(NoCorrespondenceError):
            fit_depth_scale(est, np.full((4, 4), 2.0), ValidityMask.zeros(4, 4))

    def test_golden_section_agreement_over_random_cases(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            s = float(np.exp(rng.uniform(np.log(0.25), np.log(4.0))))
            ref = rng.uniform(0.5, 4.0, size=(24, 24))
            noise = rng.normal(0, 0.01, size=ref.shape)
            est = np.clip(s * ref + noise, 0.05, None)
            mask = ValidityMask((rng.random(ref.shape) < 0.7).astype(np.uint8))
            if not mask.as_bool().any():
                continue
            report = fit_depth_scale(est, ref, mask)
            _, loss_gs = golden_section_scale(est, ref, mask)
            assert report.converged
            assert report.final_loss <= loss_gs * (1 + 1e-3) + 1e-12


class TestBoundary:
    def test_straight_seam(self):
        mask = np.zeros((6, 8), dtype=np.uint8)
        mask[:, :4] = 1
        boundary, neighbors = extract_boundary(ValidityMask(mask))
        assert np.array_equal(np.unique(boundary[:, 1]), [4])
        assert len(boundary) == 6
        assert np.array_equal(neighbors[:, 1], np.full(6, 3))
        assert np.array_equal(neighbors[:, 0], boundary[:, 0])

    def test_all_ones_empty(self):
        boundary, _ = extract_boundary(ValidityMask.ones(5, 5))
        assert len(boundary) == 0

    def test_all_zeros_empty(self):
        boundary, _ = extract_boundary(ValidityMask.zeros(5, 5))
        assert len(boundary) == 0

    @settings(max_examples=30, deadline=None)
    @given(hnp.arrays(np.uint8, (16, 16), elements=st.integers(0, 1)))
    def test_matches_brute_force(self, mask_arr):
        mask = ValidityMask(mask_arr)
        boundary, neighbors = extract_boundary(mask)
        got = {tuple(rc) for rc in boundary}
        expected = set()
        for r in range(16):
            for c in range(16):
                if mask_arr[r, c] == 0:
                    for dr, dc in ((-1, 0), (0, -1), (0, 1), (1, 0)):
                        rr, cc = r + dr, c + dc
                        if 0 <= rr < 16 and 0 <= cc < 16 and mask_arr[rr, cc] == 1:
                            expected.add((r, c))
                            break
        assert got == expected
        for (r, c), (nr, nc) in zip(boundary, neighbors):
            assert abs(nr - r) + abs(nc - c) == 1
            assert mask_arr[nr, nc] == 1


class TestWarpField:
    def test_already_aligned_seam_is_identity(self):
        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[:, :4] = 1
        depth = np.full((8, 8), 2.0)
        field = build_warp_field(depth, ValidityMask(mask), depth, _intr(8), CameraPose.identity())
        assert np.array_equal(field.corrections, np.zeros((8, 8)))

    def test_uniform_residual_linear_ramp_midrow(self):
        # Tall instance: on middle rows the nearest anchor is the far column,
        # so the correction ramps linearly from delta at the seam to 0 there.
        h, w, seam = 33, 10, 4
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[:, :seam] = 1
        delta = 0.35
        new_depth = np.full((h, w), 2.0)
        ref = np.full((h, w), np.nan)
        ref[:, :seam] = 2.0 + delta
        field = build_warp_field(new_depth, ValidityMask(mask), ref, _intr(8), CameraPose.identity())
        row = h // 2
        cols = np.arange(seam, w)
        d_b = cols - seam
        d_a = (w - 1) - cols
        expected = (1.0 - d_b / np.maximum(d_b + d_a, 1)) * delta
        expected[-1] = 0.0  # far edge is an anchor
        np.testing.assert_allclose(field.corrections[row, seam:], expected, atol=1e-12)
        # Per-column decay is monotone along the middle row.
        assert (np.diff(field.corrections[row, seam:]) <= 1e-12).all()

    def test_equidistant_midpoint_gets_half_residual(self):
        h, w, seam = 33, 11, 4
        mask = np.zeros((h, w), dtype=np.uint8)
        mask[:, :seam] = 1
        delta = 0.4
        new_depth = np.full((h, w), 1.5)
        ref = np.where(mask == 1, 1.5 + delta, np.nan)
        field = build_warp_field(new_depth, ValidityMask(mask), ref, _intr(8), CameraPose.identity())
        mid_col = seam + (w - 1 - seam) // 2  # equidistant between seam and far edge
        assert field.corrections[h // 2, mid_col] == pytest.approx(delta / 2, abs=1e-12)

    def test_boundary_exact_anchor_zero_and_bounded(self):
        rng = np.random.default_rng(5)
        mask_arr = (rng.random((16, 16)) < 0.45).astype(np.uint8)
        new_depth = rng.uniform(1.0, 3.0, size=(16, 16))
        ref = np.where(mask_arr == 1, rng.uniform(1.0, 3.0, size=(16, 16)), np.nan)
        field = build_warp_field(new_depth, ValidityMask(mask_arr), ref, _intr(16), CameraPose.identity())
        boundary, neighbors = extract_boundary(ValidityMask(mask_arr))
        for (r, c), (nr, nc) in zip(boundary, neighbors):
            assert field.corrections[r, c] == pytest.approx(
                ref[nr, nc] - new_depth[r, c], abs=1e-12
            )
        assert np.array_equal(field.corrections[field.anchor_mask],
                              np.zeros(int(field.anchor_mask.sum())))
        if field.boundary_mask.any():
            cap = np.abs(field.corrections[field.boundary_mask]).max()
            assert (np.abs(field.corrections) <= cap + 1e-12).all()
        assert np.isfinite(field.corrections).all()

    def test_interior_hole_center_anchors_at_zero(self):
        # 3x3 hole: the ring is seam (full residual), the center is the
        # distance local maximum and therefore an anchor held at zero.
        mask = np.ones((9, 9), dtype=np.uint8)
        mask[4:7, 4:7] = 0
        new_depth = np.full((9, 9), 2.0)
        ref = np.where(mask == 1, 2.5, np.nan)
        field = build_warp_field(new_depth, ValidityMask(mask), ref, _intr(9), CameraPose.identity())
        ring = field.boundary_mask
        assert ring.sum() == 8 and not ring[5, 5]
        np.testing.assert_allclose(field.corrections[ring], 0.5)
        assert field.anchor_mask[5, 5]
        assert field.corrections[5, 5] == 0.0

    def test_seamless_mask_keeps_zero_correction(self):
        # All-zero mask: the single hole component has no seam at all.
        new_depth = np.full((9, 9), 2.0)
        lone = ValidityMask.zeros(9, 9)
        field = build_warp_field(new_depth, lone, np.full((9, 9), np.nan), _intr(9),
                                 CameraPose.identity())
        assert np.array_equal(field.corrections, np.zeros((9, 9)))


def _intr(size):
    return CameraIntrinsics(fx=float(size), fy=float(size), cx=size / 2, cy=size / 2,
                            width=size, height=size)


class TestApplyWarp:
    def test_zero_field_equals_plain_lift(self):
        rng = np.random.default_rng(6)
        intr = _intr(12)
        pose = CameraPose.from_yaw_pitch(0.2, 0.1)
        rgb = rng.uniform(0, 1, size=(12, 12, 3))
        depth = rng.uniform(1.0, 3.0, size=(12, 12))
        frame = RgbdFrame(rgb, depth)
        mask = ValidityMask((rng.random((12, 12)) < 0.5).astype(np.uint8))
        field = build_warp_field(depth, ValidityMask.ones(12, 12), depth, intr, pose)
        # all-ones mask gives an all-zero field; apply with the real mask
        cloud, clamped = apply_warp(frame, mask, field, intr, pose, source_step=3)
        plain = lift_rgbd(frame, mask, intr, pose, select_value=0, source_step=3)
        assert clamped == 0
        np.testing.assert_array_equal(cloud.positions, plain.positions)
        np.testing.assert_array_equal(cloud.colors, plain.colors)
        assert (cloud.source_steps == 3).all()

    def test_uniform_correction_moves_along_rays(self):
        rng = np.random.default_rng(7)
        intr = _intr(10)
        pose = CameraPose.from_yaw_pitch(-0.3, 0.0)
        rgb = rng.uniform(0, 1, size=(10, 10, 3))
        depth = rng.uniform(2.0, 3.0, size=(10, 10))
        frame = RgbdFrame(rgb, depth)
        mask = ValidityMask.zeros(10, 10)
        c = 0.25
        field_arr = np.full((10, 10), c)
        from scenegrow.alignment import WarpField

        field = WarpField(field_arr, np.zeros((10, 10), bool), np.zeros((10, 10), bool))
        warped, _ = apply_warp(frame, mask, field, intr, pose)
        plain = lift_rgbd(frame, mask, intr, pose, select_value=0)
        rays = pixel_rays_world(intr, pose).reshape(-1, 3)
        moved = np.linalg.norm(warped.positions - plain.positions, axis=1)
        np.testing.assert_allclose(moved, c * np.linalg.norm(rays, axis=1), rtol=1e-9)

    def test_mask_all_ones_yields_empty_cloud(self):
        intr = _intr(6)
        frame = RgbdFrame(np.zeros((6, 6, 3)), np.full((6, 6), 2.0))
        field = build_warp_field(frame.depth, ValidityMask.ones(6, 6), frame.depth,
                                 intr, CameraPose.identity())
        cloud, _ = apply_warp(frame, ValidityMask.ones(6, 6), field, intr, CameraPose.identity())
        assert len(cloud) == 0

    def test_colors_bit_exact_and_ray_constraint(self):
        rng = np.random.default_rng(8)
        intr = _intr(12)
        pose = CameraPose.from_yaw_pitch(0.5, -0.1)
        rgb = rng.uniform(0, 1, size=(12, 12, 3))
        depth = rng.uniform(1.5, 2.5, size=(12, 12))
        frame = RgbdFrame(rgb, depth)
        mask_arr = (rng.random((12, 12)) < 0.5).astype(np.uint8)
        ref = np.where(mask_arr == 1, rng.uniform(1.5, 2.5, size=(12, 12)), np.nan)
        field = build_warp_field(depth, ValidityMask(mask_arr), ref, intr, pose)
        cloud, _ = apply_warp(frame, ValidityMask(mask_arr), field, intr, pose)
        holes = mask_arr == 0
        assert np.array_equal(cloud.colors, rgb[holes])
        # Every warped point stays on its source pixel's ray.
        rays = pixel_rays_world(intr, pose)[holes]
        rel = cloud.positions - pose.camera_center[None, :]
        cross = np.cross(rel, rays)
        assert np.abs(np.linalg.norm(cross, axis=1)).max() <= 1e-9 * np.abs(rel).max()

    def test_clamping_reported(self):
        intr = _intr(4)
        frame = RgbdFrame(np.zeros((4, 4, 3)), np.full((4, 4), 0.5))
        from scenegrow.alignment import WarpField

        field = WarpField(np.full((4, 4), -1.0), np.zeros((4, 4), bool), np.zeros((4, 4), bool))
        cloud, clamped = apply_warp(frame, ValidityMask.zeros(4, 4), field, intr,
                                    CameraPose.identity())
        assert clamped == 16
        assert (pose_depths := cloud.positions[:, 2]).min() > 0


class TestSeamClosure:
    def test_boundary_points_land_on_reference_depth(self):
        rng = np.random.default_rng(9)
        intr = _intr(16)
        pose = CameraPose.from_yaw_pitch(0.4, 0.2)
        mask_arr = np.zeros((16, 16), dtype=np.uint8)
        mask_arr[:, :7] = 1
        ref = np.where(mask_arr == 1, rng.uniform(1.0, 3.0, size=(16, 16)), np.nan)
        est = rng.uniform(1.0, 3.0, size=(16, 16))
        frame = RgbdFrame(rng.uniform(0, 1, size=(16, 16, 3)), est)
        field = build_warp_field(est, ValidityMask(mask_arr), ref, intr, pose)
        cloud, _ = apply_warp(frame, ValidityMask(mask_arr), field, intr, pose)
        boundary, neighbors = extract_boundary(ValidityMask(mask_arr))
        # Map hole pixels to cloud row indices (row-major lift order).
        holes = np.nonzero((mask_arr == 0).reshape(-1))[0]
        index_of = {flat: i for i, flat in enumerate(holes)}
        cam = pose.to_camera(cloud.positions)
        for (r, c), (nr, nc) in zip(boundary, neighbors):
            i = index_of[r * 16 + c]
            assert cam[i, 2] == pytest.approx(ref[nr, nc], abs=1e-9)
