"""Pluggable generative providers: image inpainting and monocular depth.

Two implementations ship here: a deterministic synthetic-world oracle used
for verification, and an HTTP client for attaching real models. Provider
calls receive an opaque context carrying the current camera; the oracle needs
it to render ground truth, remote services ignore it.
"""

from __future__ import annotations

import base64
import time
from dataclasses import dataclass

import numpy as np
import requests

from .errors import ProviderError
from .fileio import decode_png_rgb, encode_png_mask, encode_png_rgb
from .geometry import CameraIntrinsics, CameraPose, ValidityMask
from .world import SyntheticWorld, render_world

DEPTH_SCALE_RANGE = (0.25, 4.0)


@dataclass(frozen=True)
class ProviderContext:
    """Per-call pipeline state handed to providers."""

    intr: CameraIntrinsics
    pose: CameraPose
    step: int = 0


@dataclass(frozen=True)
class InpaintRequest:
    """Partial image plus the keep-mask (1 = keep, 0 = fill) and a text prompt."""

    partial_rgb: np.ndarray
    mask: ValidityMask
    prompt: str = ""

    def __post_init__(self):
        if self.partial_rgb.shape[:2] != self.mask.shape:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match image "
                f"{self.partial_rgb.shape[:2]}"
            )


def inpaint(provider, request: InpaintRequest, context: ProviderContext) -> np.ndarray:
    """Run the provider and enforce that mask=1 pixels pass through verbatim."""
    out = np.asarray(provider.inpaint(request, context), dtype=np.float64)
    if out.shape != request.partial_rgb.shape:
        raise ProviderError(
            f"inpaint provider returned shape {out.shape}, "
            f"expected {request.partial_rgb.shape}"
        )
    keep = request.mask.as_bool()
    return np.where(keep[..., None], request.partial_rgb, out)


def estimate_depth(provider, rgb: np.ndarray, context: ProviderContext) -> np.ndarray:
    """Run the provider's relative-depth estimate and validate positivity."""
    depth = np.asarray(provider.estimate_depth(rgb, context), dtype=np.float64)
    if depth.shape != rgb.shape[:2]:
        raise ProviderError(
            f"depth provider returned shape {depth.shape}, expected {rgb.shape[:2]}"
        )
    if not np.isfinite(depth).all() or (depth <= 0).any():
        raise ProviderError("depth provider output must be finite and strictly positive")
    return depth


class OracleProvider:
    """Renders the synthetic world instead of calling generative models.

    Depth estimates are multiplied by a per-step random scale drawn
    log-uniformly from ``scale_range`` to emulate the unknown per-image scale
    of monocular estimators. Step 0 is never perturbed: the first frame
    defines the scene's metric scale by convention. Scales actually applied
    are logged in ``applied_scales`` for verification.
    """

    name = "oracle"

    def __init__(
        self,
        world: SyntheticWorld,
        seed: int = 0,
        perturb_depth_scale: bool = True,
        scale_range: tuple[float, float] = DEPTH_SCALE_RANGE,
    ):
        self.world = world
        self.seed = int(seed)
        self.perturb_depth_scale = bool(perturb_depth_scale)
        self.scale_range = (float(scale_range[0]), float(scale_range[1]))
        self.applied_scales: dict[int, float] = {}

    def scale_for_step(self, step: int) -> float:
        if not self.perturb_depth_scale or step == 0:
            return 1.0
        rng = np.random.default_rng((self.seed, 0x5CA1E, step))
        lo, hi = self.scale_range
        return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))

    def inpaint(self, request: InpaintRequest, context: ProviderContext) -> np.ndarray:
        rendered = render_world(self.world, context.intr, context.pose)
        keep = request.mask.as_bool()
        return np.where(keep[..., None], request.partial_rgb, rendered.rgb)

    def estimate_depth(self, rgb: np.ndarray, context: ProviderContext) -> np.ndarray:
        scale = self.scale_for_step(context.step)
        self.applied_scales[context.step] = scale
        truth = render_world(self.world, context.intr, context.pose)
        return truth.depth * scale


class ConstantFillProvider:
    """Test double: fills holes with one color, reports constant depth."""

    name = "constant-fill"

    def __init__(self, fill_color=(0.5, 0.5, 0.5), depth_value: float = 1.0):
        self.fill_color = np.asarray(fill_color, dtype=np.float64)
        self.depth_value = float(depth_value)

    def inpaint(self, request: InpaintRequest, context: ProviderContext) -> np.ndarray:
        keep = request.mask.as_bool()
        return np.where(keep[..., None], request.partial_rgb, self.fill_color)

    def estimate_depth(self, rgb: np.ndarray, context: ProviderContext) -> np.ndarray:
        return np.full(rgb.shape[:2], self.depth_value)


class RemoteProvider:
    """HTTP client for external inpainting/depth services.

    Wire protocol (JSON bodies): POST ``/inpaint`` with {image: base64 PNG,
    mask: base64 1-bit PNG, prompt: string} returns {image: base64 PNG};
    POST ``/depth`` with {image: base64 PNG} returns {depth: base64
    little-endian float32 array, width, height}. Failed calls are retried
    ``retries`` times with exponential backoff, then raise ProviderError.
    """

    name = "remote"

    def __init__(
        self,
        base_url: str,
        timeout_s: float = 30.0,
        retries: int = 3,
        backoff_s: float = 0.5,
        auth_token: str | None = None,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout_s = float(timeout_s)
        self.retries = int(retries)
        self.backoff_s = float(backoff_s)
        self.auth_token = auth_token
        self._session = session or requests.Session()

    def _post(self, path: str, payload: dict) -> dict:
        url = self.base_url + path
        headers = {}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        last_error: Exception | None = None
        attempts = 0
        for attempt in range(self.retries + 1):
            attempts = attempt + 1
            try:
                resp = self._session.post(
                    url, json=payload, headers=headers, timeout=self.timeout_s
                )
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, ValueError) as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(self.backoff_s * (2.0**attempt))
        raise ProviderError(
            f"{url} failed after {attempts} attempts: {last_error}",
            attempts=attempts,
            last_error=last_error,
        )

    def inpaint(self, request: InpaintRequest, context: ProviderContext) -> np.ndarray:
        payload = {
            "image": base64.b64encode(encode_png_rgb(request.partial_rgb)).decode("ascii"),
            "mask": base64.b64encode(encode_png_mask(request.mask)).decode("ascii"),
            "prompt": request.prompt,
        }
        data = self._post("/inpaint", payload)
        if "image" not in data:
            raise ProviderError("inpaint response missing 'image'")
        out = decode_png_rgb(base64.b64decode(data["image"]))
        if out.shape != request.partial_rgb.shape:
            raise ProviderError(
                f"inpaint response shape {out.shape} does not match request "
                f"{request.partial_rgb.shape}"
            )
        return out

    def estimate_depth(self, rgb: np.ndarray, context: ProviderContext) -> np.ndarray:
        payload = {"image": base64.b64encode(encode_png_rgb(rgb)).decode("ascii")}
        data = self._post("/depth", payload)
        for key in ("depth", "width", "height"):
            if key not in data:
                raise ProviderError(f"depth response missing {key!r}")
        h, w = int(data["height"]), int(data["width"])
        if (h, w) != rgb.shape[:2]:
            raise ProviderError(
                f"depth response is {h}x{w}, expected {rgb.shape[0]}x{rgb.shape[1]}"
            )
        raw = base64.b64decode(data["depth"])
        if len(raw) != h * w * 4:
            raise ProviderError(
                f"depth payload has {len(raw)} bytes, expected {h * w * 4}"
            )
        return np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)
