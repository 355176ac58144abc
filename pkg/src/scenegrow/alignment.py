"""Depth-scale fitting and seam-closing warps for newly lifted points.

Two procedures live here. ``fit_depth_scale`` recovers the scalar that maps a
relative depth estimate onto the metric depths already present in the scene,
by minimizing a per-ray L1 distance with gradient descent. ``build_warp_field``
and ``apply_warp`` then move the newly generated points along their own camera
rays so the seam against the existing geometry closes, interpolating the
seam corrections smoothly into the interior of the new region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import NoCorrespondenceError
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    PointCloud,
    RgbdFrame,
    ValidityMask,
    Z_NEAR,
    lift_rgbd,
)

_EPS_L1 = 1e-6  # smoothing of the L1 kink, in meters
_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class ScaleFitReport:
    """Outcome of the depth-coefficient descent."""

    d: float
    iterations: int
    final_loss: float
    converged: bool


def fit_depth_scale(
    est_depth: np.ndarray,
    ref_depth: np.ndarray,
    mask: ValidityMask,
    lr: float = 0.1,
    max_iter: int = 100,
    tol: float = 1e-5,
    ray_norms: np.ndarray | None = None,
) -> ScaleFitReport:
    """Fit d minimizing mean |d * est - ref| (weighted per-pixel) over mask=1.

    Weights are the per-pixel ray L1 norms when given, converting depth
    residuals into 3-D point distances along each ray. The descent runs on
    log d (multiplicative updates keep d positive) starting from d = 1, with
    step halving whenever a step fails to decrease the loss; stops when the
    accepted step changes d by less than ``tol``.
    """
    est = np.asarray(est_depth, dtype=np.float64)
    ref = np.asarray(ref_depth, dtype=np.float64)
    overlap = mask.as_bool() & np.isfinite(ref) & (ref > 0)
    if not overlap.any():
        raise NoCorrespondenceError("no correspondence for scale fit")
    a = est[overlap]
    if not np.isfinite(a).all() or (a <= 0).any():
        raise ValueError("estimated depth must be finite and positive on the overlap")
    b = ref[overlap]
    w = np.ones_like(a) if ray_norms is None else np.asarray(ray_norms)[overlap]

    def smoothed(d: float) -> float:
        r = d * a - b
        return float(np.mean(w * np.sqrt(r * r + _EPS_L1**2)))

    def grad_log(d: float) -> float:
        r = d * a - b
        dd = np.mean(w * a * r / np.sqrt(r * r + _EPS_L1**2))
        return float(d * dd)

    d = 1.0
    loss = smoothed(d)
    iterations = 0
    converged = False
    for iterations in range(1, max_iter + 1):
        g = grad_log(d)
        if abs(g) < 1e-18:
            converged = True
            break
        step = lr
        d_new = d * np.exp(-step * g)
        loss_new = smoothed(d_new)
        while loss_new >= loss and step > 1e-12:
            step *= 0.5
            d_new = d * np.exp(-step * g)
            loss_new = smoothed(d_new)
        if loss_new >= loss:
            converged = True  # no improving step exists: at the minimum
            break
        delta = abs(d_new - d)
        rel_gain = (loss - loss_new) / max(loss_new, 1e-300)
        d, loss = float(d_new), loss_new
        # Small steps alone can fire while the loss still has relative slack
        # (near-zero optima); require the improvement to have died out too.
        if delta < tol and rel_gain < 1e-4:
            converged = True
            break
    final_loss = float(np.mean(w * np.abs(d * a - b)))
    return ScaleFitReport(d=d, iterations=iterations, final_loss=final_loss, converged=converged)


def extract_boundary(mask: ValidityMask) -> tuple[np.ndarray, np.ndarray]:
    """Hole pixels that touch filled pixels, paired with a filled neighbor.

    Returns ``(boundary, neighbors)``: (n, 2) arrays of (row, col) indices in
    row-major order. A boundary pixel is a mask=0 pixel 4-adjacent to at least
    one mask=1 pixel; its paired neighbor is the first filled one in N, W, E,
    S order.
    """
    m = mask.as_bool()
    h, w = m.shape
    has = {}
    for name, (dr, dc) in (("N", (-1, 0)), ("W", (0, -1)), ("E", (0, 1)), ("S", (1, 0))):
        shifted = np.zeros_like(m)
        shifted[max(0, -dr) : h - max(0, dr), max(0, -dc) : w - max(0, dc)] = m[
            max(0, dr) : h - max(0, -dr), max(0, dc) : w - max(0, -dc)
        ]
        has[name] = shifted
    boundary = ~m & (has["N"] | has["W"] | has["E"] | has["S"])
    rows, cols = np.nonzero(boundary)
    if len(rows) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros((0, 2), dtype=np.int64)
    offsets = {"N": (-1, 0), "W": (0, -1), "E": (0, 1), "S": (1, 0)}
    dr = np.zeros(len(rows), dtype=np.int64)
    dc = np.zeros(len(rows), dtype=np.int64)
    unset = np.ones(len(rows), dtype=bool)
    for name in ("N", "W", "E", "S"):
        pick = unset & has[name][rows, cols]
        dr[pick], dc[pick] = offsets[name]
        unset &= ~pick
    return np.column_stack([rows, cols]), np.column_stack([rows + dr, cols + dc])


@dataclass(frozen=True)
class WarpField:
    """Per-pixel signed depth corrections plus the seam/anchor sets behind them."""

    corrections: np.ndarray
    boundary_mask: np.ndarray
    anchor_mask: np.ndarray

    @property
    def max_correction(self) -> float:
        return float(np.abs(self.corrections).max()) if self.corrections.size else 0.0


def build_warp_field(
    new_depth: np.ndarray,
    mask: ValidityMask,
    ref_depth: np.ndarray,
    intr: CameraIntrinsics,
    pose: CameraPose,
) -> WarpField:
    """Depth corrections that close the seam between new and existing geometry.

    Boundary pixels receive exactly the residual to their nearest filled
    neighbor's reference depth. Anchor pixels (local maxima of the distance
    to the seam, plus hole pixels on the image border) are held at zero.
    Everything else interpolates linearly between its nearest boundary
    pixel's correction and zero, weighted by the two Euclidean distances.
    Disconnected hole components are treated independently; a component with
    no seam keeps zero correction.
    """
    new_depth = np.asarray(new_depth, dtype=np.float64)
    ref_depth = np.asarray(ref_depth, dtype=np.float64)
    h, w = mask.shape
    if new_depth.shape != (h, w) or ref_depth.shape != (h, w):
        raise ValueError(
            f"depth shapes {new_depth.shape}/{ref_depth.shape} do not match mask {(h, w)}"
        )
    corrections = np.zeros((h, w))
    boundary_mask = np.zeros((h, w), dtype=bool)
    anchor_mask = np.zeros((h, w), dtype=bool)
    holes = ~mask.as_bool()
    if not holes.any():
        return WarpField(corrections, boundary_mask, anchor_mask)

    boundary, neighbors = extract_boundary(mask)
    residuals = np.zeros((h, w))
    if len(boundary):
        br, bc = boundary[:, 0], boundary[:, 1]
        nr, nc = neighbors[:, 0], neighbors[:, 1]
        usable = np.isfinite(ref_depth[nr, nc]) & np.isfinite(new_depth[br, bc])
        br, bc, nr, nc = br[usable], bc[usable], nr[usable], nc[usable]
        residuals[br, bc] = ref_depth[nr, nc] - new_depth[br, bc]
        boundary_mask[br, bc] = True

    labels, n_comp = ndimage.label(holes, structure=_FOUR_CONN)
    border = np.zeros((h, w), dtype=bool)
    border[0, :] = border[-1, :] = True
    border[:, 0] = border[:, -1] = True

    for comp in range(1, n_comp + 1):
        comp_mask = labels == comp
        bnd_c = boundary_mask & comp_mask
        if not bnd_c.any():
            continue  # detached hole: no seam, keep zero correction
        # Distance to the seam and which seam pixel is closest.
        dist_b, (near_r, near_c) = ndimage.distance_transform_edt(
            ~bnd_c, return_indices=True
        )
        # Anchors: distance local maxima inside the component, plus hole pixels
        # on the image border; seam pixels themselves never anchor.
        dist_in = np.where(comp_mask, dist_b, -np.inf)
        local_max = comp_mask & (dist_in >= ndimage.maximum_filter(dist_in, size=3))
        anchors_c = (local_max | (border & comp_mask)) & ~bnd_c
        anchor_mask |= anchors_c
        if anchors_c.any():
            dist_a = ndimage.distance_transform_edt(~anchors_c)
        else:
            dist_a = np.full((h, w), np.inf)
        seam_value = residuals[near_r, near_c]
        with np.errstate(invalid="ignore"):
            total = dist_b + dist_a
            frac = np.where(total > 0, dist_b / np.where(total > 0, total, 1.0), 0.0)
        comp_corr = (1.0 - frac) * seam_value
        corrections[comp_mask] = comp_corr[comp_mask]
        corrections[anchors_c] = 0.0
        corrections[bnd_c] = residuals[bnd_c]

    return WarpField(corrections, boundary_mask, anchor_mask)


def apply_warp(
    frame: RgbdFrame,
    mask: ValidityMask,
    field: WarpField,
    intr: CameraIntrinsics,
    pose: CameraPose,
    source_step: int = 0,
    z_near: float = Z_NEAR,
) -> tuple[PointCloud, int]:
    """Lift the hole pixels with corrected depths; colors pass through untouched.

    Depths are clamped to ``z_near`` where a correction would push them
    nonpositive; the clamped-pixel count is returned so callers can surface a
    warning when it exceeds their budget.
    """
    if field.corrections.shape != mask.shape:
        raise ValueError(
            f"warp field shape {field.corrections.shape} does not match mask {mask.shape}"
        )
    holes = ~mask.as_bool()
    corrected = frame.depth + field.corrections
    lifted_sel = holes & frame.valid_depth
    clamped = int((lifted_sel & (corrected <= z_near)).sum())
    corrected = np.where(np.isfinite(corrected), np.maximum(corrected, z_near), corrected)
    warped = RgbdFrame(frame.rgb, corrected)
    cloud = lift_rgbd(warped, mask, intr, pose, select_value=0, source_step=source_step)
    return cloud, clamped
