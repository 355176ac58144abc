"""Isotropic Gaussian-splat scene: rendering, masked loss, optimization.

Splats are isotropic 3-D Gaussians with flat RGB color and sigmoid opacity.
Rendering projects each splat to a 2-D Gaussian footprint (pixel sigma =
radius * focal / z, truncated at 3 sigma) and alpha-composites front to back;
the remaining transmittance blends the background. Gradients of the masked
L1 photometric loss are derived analytically for every parameter, which a
finite-difference checker verifies.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloudError, EmptyMaskError, OptimizerError, OutputError
from .fileio import atomic_write_bytes
from .geometry import CameraIntrinsics, CameraPose, PointCloud, RgbdFrame, ValidityMask, Z_NEAR
from .pipeline import TrainingView

RADIUS_CLAMP = (1e-4, 0.1)
_TRUNCATION = 3.0  # footprint cutoff in units of sigma

_CHECKPOINT_MAGIC = b"SGSPLAT1"


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass
class SplatScene:
    """Flat parameter arrays for every splat plus the background color."""

    centers: np.ndarray        # (n, 3) world meters
    log_radii: np.ndarray      # (n,) radius = exp(log_radii)
    opacity_logits: np.ndarray # (n,) opacity = sigmoid(logits)
    colors: np.ndarray         # (n, 3) in [0, 1]
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        self.log_radii = np.asarray(self.log_radii, dtype=np.float64).reshape(-1)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        n = len(self.centers)
        if not (len(self.log_radii) == len(self.opacity_logits) == len(self.colors) == n):
            raise ValueError("splat parameter arrays disagree in length")

    @property
    def n(self) -> int:
        return len(self.centers)

    @property
    def radii(self) -> np.ndarray:
        return np.exp(self.log_radii)

    @property
    def opacities(self) -> np.ndarray:
        return _sigmoid(self.opacity_logits)

    def copy(self) -> "SplatScene":
        return SplatScene(
            self.centers.copy(),
            self.log_radii.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
            self.background.copy(),
        )

    def all_finite(self) -> bool:
        return bool(
            np.isfinite(self.centers).all()
            and np.isfinite(self.log_radii).all()
            and np.isfinite(self.opacity_logits).all()
            and np.isfinite(self.colors).all()
        )

    def extent(self) -> float:
        if self.n == 0:
            return 1.0
        diag = self.centers.max(axis=0) - self.centers.min(axis=0)
        return float(max(np.linalg.norm(diag), 1e-6))


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Average positions/colors per occupied voxel; keeps the earliest step id."""
    keys = np.floor(cloud.positions / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    k = len(uniq)
    counts = np.bincount(inverse, minlength=k).astype(np.float64)
    pos = np.zeros((k, 3))
    col = np.zeros((k, 3))
    for c in range(3):
        pos[:, c] = np.bincount(inverse, weights=cloud.positions[:, c], minlength=k)
        col[:, c] = np.bincount(inverse, weights=cloud.colors[:, c], minlength=k)
    pos /= counts[:, None]
    col /= counts[:, None]
    steps = np.full(k, np.iinfo(np.int32).max, dtype=np.int64)
    np.minimum.at(steps, inverse, cloud.source_steps.astype(np.int64))
    return PointCloud(pos, np.clip(col, 0.0, 1.0), steps.astype(np.int32))


def init_splats(
    cloud: PointCloud,
    voxel_size: float = 0.0,
    radius_clamp: tuple[float, float] = RADIUS_CLAMP,
    opacity: float = 0.7,
    background=(0.0, 0.0, 0.0),
) -> SplatScene:
    """One splat per (optionally voxel-downsampled) point.

    Radius is the mean distance to the 3 nearest neighbors among points of the
    same source view (globally after downsampling), clamped to radius_clamp.
    """
    if len(cloud) == 0:
        raise EmptyCloudError("cannot initialize splats from an empty cloud")
    if voxel_size > 0:
        cloud = voxel_downsample(cloud, voxel_size)
        groups = [np.arange(len(cloud))]
    else:
        groups = [
            np.nonzero(cloud.source_steps == s)[0]
            for s in np.unique(cloud.source_steps)
        ]
    lo, hi = radius_clamp
    radii = np.full(len(cloud), lo)
    for idx in groups:
        pts = cloud.positions[idx]
        if len(pts) < 2:
            continue
        k = min(4, len(pts))
        dist, _ = cKDTree(pts).query(pts, k=k)
        radii[idx] = dist[:, 1:].mean(axis=1)  # drop the self-distance column
    radii = np.clip(radii, lo, hi)
    return SplatScene(
        centers=cloud.positions.copy(),
        log_radii=np.log(radii),
        opacity_logits=np.full(len(cloud), _logit(opacity)),
        colors=cloud.colors.copy(),
        background=np.asarray(background, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Rendering


class _PairCache:
    """Everything the forward pass computed, reused by the backward pass."""

    __slots__ = (
        "splat_ids", "pix", "alpha", "gauss", "transmittance", "seg_starts",
        "du", "dv", "sigma_pair", "cam", "u", "v", "sigma", "kept",
        "t_end_flat", "out_flat", "n_pairs",
    )


def _forward(scene: SplatScene, intr: CameraIntrinsics, pose: CameraPose, z_near: float):
    """Project, pair splats with covered pixels, composite front to back."""
    h, w = intr.shape
    out = np.tile(scene.background, (h * w, 1))
    t_end = np.ones(h * w)
    cache = _PairCache()
    cache.n_pairs = 0
    if scene.n == 0:
        cache.out_flat = out
        cache.t_end_flat = t_end
        return out.reshape(h, w, 3), (1.0 - t_end).reshape(h, w), cache

    cam = pose.to_camera(scene.centers)
    z = cam[:, 2]
    focal = 0.5 * (intr.fx + intr.fy)
    front = z > z_near
    zs = np.where(front, z, 1.0)
    u = intr.fx * cam[:, 0] / zs + intr.cx - 0.5
    v = intr.fy * cam[:, 1] / zs + intr.cy - 0.5
    sigma = scene.radii * focal / zs
    rad = _TRUNCATION * sigma
    lo_u = np.ceil(u - rad).astype(np.int64)
    hi_u = np.floor(u + rad).astype(np.int64)
    lo_v = np.ceil(v - rad).astype(np.int64)
    hi_v = np.floor(v + rad).astype(np.int64)
    lo_u, hi_u = np.clip(lo_u, 0, w - 1), np.clip(hi_u, 0, w - 1)
    lo_v, hi_v = np.clip(lo_v, 0, h - 1), np.clip(hi_v, 0, h - 1)
    nonempty = (
        front
        & (u + rad >= -0.5) & (u - rad <= w - 0.5)
        & (v + rad >= -0.5) & (v - rad <= h - 0.5)
        & (hi_u >= lo_u) & (hi_v >= lo_v)
    )
    kept = np.nonzero(nonempty)[0]
    cache.kept = kept
    cache.cam, cache.u, cache.v, cache.sigma = cam, u, v, sigma
    if len(kept) == 0:
        cache.out_flat = out
        cache.t_end_flat = t_end
        return out.reshape(h, w, 3), (1.0 - t_end).reshape(h, w), cache

    # Composite order: increasing depth, ties by original splat index
    # (stable sort over ascending indices).
    kept = kept[np.argsort(z[kept], kind="stable")]
    wu = hi_u[kept] - lo_u[kept] + 1
    wv = hi_v[kept] - lo_v[kept] + 1
    counts = wu * wv
    total = int(counts.sum())
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pair_rank = np.repeat(np.arange(len(kept)), counts)
    local = np.arange(total) - np.repeat(starts, counts)
    du_i = local % wu[pair_rank]
    dv_i = local // wu[pair_rank]
    px = lo_u[kept][pair_rank] + du_i
    py = lo_v[kept][pair_rank] + dv_i

    ids = kept[pair_rank]
    ddu = px - u[ids]
    ddv = py - v[ids]
    d2 = ddu * ddu + ddv * ddv
    sig = sigma[ids]
    inside = d2 <= (_TRUNCATION * sig) ** 2
    ids, px, py, ddu, ddv, d2, sig = (
        a[inside] for a in (ids, px, py, ddu, ddv, d2, sig)
    )
    if len(ids) == 0:
        cache.n_pairs = 0
        cache.out_flat = out
        cache.t_end_flat = t_end
        return out.reshape(h, w, 3), (1.0 - t_end).reshape(h, w), cache

    gauss = np.exp(-0.5 * d2 / (sig * sig))
    opac = scene.opacities[ids]
    # Guard the 1 - alpha division in the backward pass against saturated
    # opacities; invisible at any sane logit.
    alpha = np.minimum(opac * gauss, 1.0 - 1e-12)

    pix = py * w + px
    order = np.argsort(pix, kind="stable")  # pairs already in depth order
    ids, pix, alpha, gauss, ddu, ddv, sig = (
        a[order] for a in (ids, pix, alpha, gauss, ddu, ddv, sig)
    )

    logs = np.log1p(-alpha)
    cs = np.cumsum(logs)
    excl = cs - logs
    seg_starts = np.concatenate([[0], np.flatnonzero(np.diff(pix) != 0) + 1])
    seg_len = np.diff(np.concatenate([seg_starts, [len(pix)]]))
    seg_id = np.repeat(np.arange(len(seg_starts)), seg_len)
    transmittance = np.exp(excl - excl[seg_starts][seg_id])

    weight = alpha * transmittance
    seg_pix = pix[seg_starts]
    contrib = weight[:, None] * scene.colors[ids]
    sums = np.add.reduceat(contrib, seg_starts, axis=0)
    total_log = cs[seg_starts + seg_len - 1] - excl[seg_starts]
    t_end_seg = np.exp(total_log)
    out[seg_pix] = sums + t_end_seg[:, None] * scene.background
    t_end[seg_pix] = t_end_seg

    cache.splat_ids = ids
    cache.pix = pix
    cache.alpha = alpha
    cache.gauss = gauss
    cache.transmittance = transmittance
    cache.seg_starts = seg_starts
    cache.du = ddu
    cache.dv = ddv
    cache.sigma_pair = sig
    cache.t_end_flat = t_end
    cache.out_flat = out
    cache.n_pairs = len(ids)
    return out.reshape(h, w, 3), (1.0 - t_end).reshape(h, w), cache


def render_splats(
    scene: SplatScene,
    intr: CameraIntrinsics,
    pose: CameraPose,
    z_near: float = Z_NEAR,
) -> tuple[np.ndarray, np.ndarray]:
    """Render to an RGB image and an alpha (coverage) map."""
    rgb, alpha, _ = _forward(scene, intr, pose, z_near)
    return rgb, alpha


def masked_loss(rendered: np.ndarray, target: RgbdFrame, mask: ValidityMask) -> float:
    """Mean per-channel L1 color error over mask=1 pixels only."""
    if rendered.shape != target.rgb.shape:
        raise ValueError(
            f"rendered shape {rendered.shape} does not match target {target.rgb.shape}"
        )
    if mask.shape != target.rgb.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match target")
    keep = mask.as_bool()
    if not keep.any():
        raise EmptyMaskError("masked loss over an all-zero mask")
    return float(np.abs(rendered[keep] - target.rgb[keep]).mean())


def _loss_and_grads(
    scene: SplatScene,
    intr: CameraIntrinsics,
    pose: CameraPose,
    target: RgbdFrame,
    mask: ValidityMask,
    z_near: float = Z_NEAR,
):
    """Masked L1 loss and its analytic gradients for every splat parameter."""
    h, w = intr.shape
    rendered, _, cache = _forward(scene, intr, pose, z_near)
    loss = masked_loss(rendered, target, mask)

    grads = {
        "centers": np.zeros_like(scene.centers),
        "log_radii": np.zeros_like(scene.log_radii),
        "opacity_logits": np.zeros_like(scene.opacity_logits),
        "colors": np.zeros_like(scene.colors),
    }
    keep = mask.as_bool()
    n_mask = int(keep.sum())
    dldc_img = np.where(
        keep[..., None], np.sign(rendered - target.rgb), 0.0
    ) / (n_mask * 3.0)
    if cache.n_pairs == 0:
        return loss, grads

    ids = cache.splat_ids
    pix = cache.pix
    alpha = cache.alpha
    gauss = cache.gauss
    trans = cache.transmittance
    seg_starts = cache.seg_starts

    gp = dldc_img.reshape(-1, 3)[pix]  # (pairs, 3) pixel loss gradient
    colors_pair = scene.colors[ids]
    weight = alpha * trans

    # Suffix sums: what comes after each pair in its pixel, background included.
    contrib = weight[:, None] * colors_pair
    incl = np.cumsum(contrib, axis=0)
    seg_base = incl[seg_starts] - contrib[seg_starts]
    seg_len = np.diff(np.concatenate([seg_starts, [len(pix)]]))
    seg_id = np.repeat(np.arange(len(seg_starts)), seg_len)
    prefix_incl = incl - seg_base[seg_id]
    suffix = cache.out_flat[pix] - prefix_incl  # includes bg * T_end

    d_alpha = (gp * (colors_pair * trans[:, None] - suffix / (1.0 - alpha)[:, None])).sum(axis=1)
    d_color_pair = gp * weight[:, None]

    opac = scene.opacities[ids]
    d_gauss = d_alpha * opac
    d_opac = d_alpha * gauss
    sig = cache.sigma_pair
    d_u = d_gauss * gauss * cache.du / (sig * sig)
    d_v = d_gauss * gauss * cache.dv / (sig * sig)
    d_sigma = d_gauss * gauss * (cache.du**2 + cache.dv**2) / (sig**3)

    n = scene.n
    acc_u = np.bincount(ids, weights=d_u, minlength=n)
    acc_v = np.bincount(ids, weights=d_v, minlength=n)
    acc_sig = np.bincount(ids, weights=d_sigma, minlength=n)
    acc_op = np.bincount(ids, weights=d_opac, minlength=n)
    for c in range(3):
        grads["colors"][:, c] = np.bincount(ids, weights=d_color_pair[:, c], minlength=n)

    cam, u, v, sigma = cache.cam, cache.u, cache.v, cache.sigma
    z = cam[:, 2]
    zs = np.where(z > z_near, z, 1.0)
    dcam = np.zeros_like(cam)
    dcam[:, 0] = acc_u * intr.fx / zs
    dcam[:, 1] = acc_v * intr.fy / zs
    dcam[:, 2] = (
        -acc_u * intr.fx * cam[:, 0] / (zs * zs)
        - acc_v * intr.fy * cam[:, 1] / (zs * zs)
        - acc_sig * sigma / zs
    )
    grads["centers"] = dcam @ pose.rotation
    grads["log_radii"] = acc_sig * sigma  # sigma is linear in radius
    opac_all = scene.opacities
    grads["opacity_logits"] = acc_op * opac_all * (1.0 - opac_all)
    return loss, grads


@dataclass
class OptimizeSchedule:
    """Per-group learning rates and loop length for splat optimization."""

    iterations: int = 300
    lr_centers: float = 1e-3   # multiplied by the scene extent
    lr_log_radius: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 1e-2
    momentum: float = 0.9

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "lr_centers": self.lr_centers,
            "lr_log_radius": self.lr_log_radius,
            "lr_opacity": self.lr_opacity,
            "lr_color": self.lr_color,
            "momentum": self.momentum,
        }


def optimize(
    scene: SplatScene,
    views: list[TrainingView],
    intr: CameraIntrinsics,
    schedule: OptimizeSchedule | None = None,
    callback=None,
) -> tuple[SplatScene, list[float]]:
    """Momentum SGD on all splat parameters against the masked L1 loss.

    Views are cycled in their given order, one per iteration. Colors are
    clamped back into [0, 1] after each step. Deterministic given inputs.
    A non-finite loss aborts with the last finite scene attached.
    """
    if not views:
        raise ValueError("optimize requires at least one training view")
    schedule = schedule or OptimizeSchedule()
    scene = scene.copy()
    extent = scene.extent()
    lr = {
        "centers": schedule.lr_centers * extent,
        "log_radii": schedule.lr_log_radius,
        "opacity_logits": schedule.lr_opacity,
        "colors": schedule.lr_color,
    }
    vel = {
        "centers": np.zeros_like(scene.centers),
        "log_radii": np.zeros_like(scene.log_radii),
        "opacity_logits": np.zeros_like(scene.opacity_logits),
        "colors": np.zeros_like(scene.colors),
    }
    history: list[float] = []
    last_good = scene.copy()
    for it in range(schedule.iterations):
        view = views[it % len(views)]
        loss, grads = _loss_and_grads(scene, intr, view.pose, view.frame, view.mask)
        if not np.isfinite(loss):
            raise OptimizerError(
                f"non-finite loss at iteration {it}", last_scene=last_good, history=history
            )
        history.append(loss)
        for key in vel:
            vel[key] = schedule.momentum * vel[key] + grads[key]
            current = getattr(scene, key)
            current -= lr[key] * vel[key]
        np.clip(scene.colors, 0.0, 1.0, out=scene.colors)
        if not scene.all_finite():
            raise OptimizerError(
                f"non-finite parameters after iteration {it}",
                last_scene=last_good,
                history=history,
            )
        last_good = scene.copy()
        if callback is not None:
            callback(it, scene, loss)
    return scene, history


def gradient_check(
    scene: SplatScene,
    view: TrainingView,
    intr: CameraIntrinsics,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error of analytic vs central-difference gradients.

    Intended for small scenes; every scalar parameter is perturbed twice.
    The relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    _, grads = _loss_and_grads(scene, intr, view.pose, view.frame, view.mask)

    def loss_of(s: SplatScene) -> float:
        rendered, _, _ = _forward(s, intr, view.pose, Z_NEAR)
        return masked_loss(rendered, view.frame, view.mask)

    worst = 0.0
    for key in ("centers", "log_radii", "opacity_logits", "colors"):
        arr = getattr(scene, key)
        flat_analytic = grads[key].reshape(-1)
        for i in range(arr.size):
            probe = scene.copy()
            target = getattr(probe, key).reshape(-1)
            target[i] += epsilon
            hi = loss_of(probe)
            target[i] -= 2 * epsilon
            lo = loss_of(probe)
            numeric = (hi - lo) / (2 * epsilon)
            analytic = flat_analytic[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    mse = float(np.mean(diff * diff))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(scene: SplatScene, path: str, schedule_state: dict | None = None) -> None:
    """Versioned binary: JSON header + little-endian float32 parameter blocks."""
    header = {
        "version": 1,
        "n_splats": scene.n,
        "bounds": [
            scene.centers.min(axis=0).tolist() if scene.n else [0, 0, 0],
            scene.centers.max(axis=0).tolist() if scene.n else [0, 0, 0],
        ],
        "blocks": ["centers", "log_radii", "opacity_logits", "colors", "background"],
        "schedule_state": schedule_state or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(_CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for block in (scene.centers, scene.log_radii, scene.opacity_logits, scene.colors,
                  scene.background):
        buf.write(np.ascontiguousarray(block, dtype="<f4").tobytes())
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str) -> tuple[SplatScene, dict]:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise OutputError(f"failed to read checkpoint {path}: {exc}", path=path) from exc
    if not data.startswith(_CHECKPOINT_MAGIC):
        raise OutputError(f"{path} is not a splat checkpoint", path=path)
    (head_len,) = struct.unpack_from("<I", data, len(_CHECKPOINT_MAGIC))
    off = len(_CHECKPOINT_MAGIC) + 4
    try:
        header = json.loads(data[off : off + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise OutputError(f"{path}: corrupt checkpoint header", path=path) from exc
    off += head_len
    n = int(header["n_splats"])
    sizes = [("centers", n * 3), ("log_radii", n), ("opacity_logits", n),
             ("colors", n * 3), ("background", 3)]
    expected = sum(s for _, s in sizes) * 4
    if len(data) - off != expected:
        raise OutputError(
            f"{path}: checkpoint payload is {len(data) - off} bytes, expected {expected}",
            path=path,
        )
    blocks = {}
    for name, count in sizes:
        blocks[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(
            np.float64
        )
        off += count * 4
    scene = SplatScene(
        centers=blocks["centers"].reshape(n, 3),
        log_radii=blocks["log_radii"],
        opacity_logits=blocks["opacity_logits"],
        colors=blocks["colors"].reshape(n, 3),
        background=blocks["background"],
    )
    return scene, header
