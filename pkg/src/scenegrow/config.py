"""Run configuration: strict JSON schema, defaults, and object factories."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .fileio import load_depth_npy, load_png_depth16, load_png_rgb
from .geometry import CameraIntrinsics, RgbdFrame
from .pipeline import ConstructionConfig, ScaleFitParams
from .providers import OracleProvider, RemoteProvider
from .splats import OptimizeSchedule
from .trajectory import Trajectory, make_trajectory
from .world import SyntheticWorld

REMOTE_TOKEN_ENV = "SCENEGROW_REMOTE_TOKEN"

_INPUT_KEYS = ("prompt", "rgb", "rgbd")


def _require_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def _get_number(section: dict, key: str, where: str, lo=None, hi=None, default=None):
    if key not in section:
        if default is None:
            raise ConfigError(f"missing required key {key!r} in {where}")
        return default
    value = section[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}.{key} must be a number, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(f"{where}.{key} = {value} is below the minimum {lo}")
    if hi is not None and value > hi:
        raise ConfigError(f"{where}.{key} = {value} is above the maximum {hi}")
    return value


@dataclass
class RunConfig:
    """Validated configuration for one build run."""

    input_kind: str                  # "prompt" | "rgb" | "rgbd"
    input_value: object              # prompt string or path(s)
    intrinsics: CameraIntrinsics
    trajectory_preset: str
    trajectory_parameters: dict
    steps: int
    extra_views: int
    min_overlap: float
    provider_kind: str               # "oracle" | "remote"
    provider_options: dict
    seed: int
    prompt: str
    prompt_schedule: tuple[tuple[int, str], ...]
    scale_fit: ScaleFitParams
    splats_enabled: bool
    splat_schedule: OptimizeSchedule
    splat_voxel_size: float
    splat_background: tuple[float, float, float]
    output_dir: str
    raw: dict = field(repr=False, default_factory=dict)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.raw, sort_keys=True))


def parse_config(source) -> RunConfig:
    """Parse and validate a config mapping, JSON text, or file path."""
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source) as fh:
            data = json.load(fh)
    elif isinstance(source, str):
        data = json.loads(source)
    elif isinstance(source, dict):
        data = json.loads(json.dumps(source))
    else:
        raise ConfigError(f"cannot parse config from {type(source).__name__}")
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")

    _require_keys(
        data,
        {
            "input", "intrinsics", "trajectory", "steps", "extra_views",
            "min_overlap", "providers", "seed", "prompt", "prompt_schedule",
            "scale_fit", "splats", "output_dir",
        },
        "config",
    )

    # Input: exactly one variant.
    input_section = data.get("input")
    if not isinstance(input_section, dict):
        raise ConfigError("config.input must be an object with exactly one of "
                          f"{_INPUT_KEYS}")
    _require_keys(input_section, set(_INPUT_KEYS), "config.input")
    present = [k for k in _INPUT_KEYS if k in input_section]
    if len(present) != 1:
        raise ConfigError(
            f"config.input must contain exactly one of {_INPUT_KEYS}, got {present}"
        )
    input_kind = present[0]
    input_value = input_section[input_kind]
    if input_kind == "rgbd":
        if not isinstance(input_value, dict):
            raise ConfigError("config.input.rgbd must be {'rgb': path, 'depth': path}")
        _require_keys(input_value, {"rgb", "depth"}, "config.input.rgbd")
        for key in ("rgb", "depth"):
            if key not in input_value:
                raise ConfigError(f"config.input.rgbd missing {key!r}")

    intr_section = data.get("intrinsics")
    if not isinstance(intr_section, dict):
        raise ConfigError("config.intrinsics must be an object")
    _require_keys(intr_section, {"fx", "fy", "cx", "cy", "width", "height"},
                  "config.intrinsics")
    try:
        intr = CameraIntrinsics(
            fx=float(_get_number(intr_section, "fx", "config.intrinsics", lo=1e-9)),
            fy=float(_get_number(intr_section, "fy", "config.intrinsics", lo=1e-9)),
            cx=float(_get_number(intr_section, "cx", "config.intrinsics")),
            cy=float(_get_number(intr_section, "cy", "config.intrinsics")),
            width=int(_get_number(intr_section, "width", "config.intrinsics", lo=1)),
            height=int(_get_number(intr_section, "height", "config.intrinsics", lo=1)),
        )
    except ValueError as exc:
        raise ConfigError(f"config.intrinsics invalid: {exc}") from exc

    traj_section = data.get("trajectory")
    if not isinstance(traj_section, dict):
        raise ConfigError("config.trajectory must be an object")
    _require_keys(traj_section, {"preset", "parameters"}, "config.trajectory")
    preset = traj_section.get("preset")
    if not isinstance(preset, str):
        raise ConfigError("config.trajectory.preset must be a string")
    traj_params = traj_section.get("parameters", {})
    if not isinstance(traj_params, dict):
        raise ConfigError("config.trajectory.parameters must be an object")

    steps = int(_get_number(data, "steps", "config", lo=0, hi=10000, default=10))
    extra_views = int(
        _get_number(data, "extra_views", "config", lo=0, hi=100000, default=2 * steps)
    )
    min_overlap = float(
        _get_number(data, "min_overlap", "config", lo=0.0, hi=1.0, default=0.3)
    )
    seed = int(_get_number(data, "seed", "config", default=0))
    prompt = data.get("prompt", "")
    if not isinstance(prompt, str):
        raise ConfigError("config.prompt must be a string")
    schedule_raw = data.get("prompt_schedule", [])
    if not isinstance(schedule_raw, list):
        raise ConfigError("config.prompt_schedule must be a list of [step, prompt]")
    prompt_schedule = []
    for entry in schedule_raw:
        if (not isinstance(entry, list) or len(entry) != 2
                or not isinstance(entry[0], int) or not isinstance(entry[1], str)):
            raise ConfigError(f"bad prompt_schedule entry {entry!r}; want [step, prompt]")
        prompt_schedule.append((entry[0], entry[1]))

    providers_section = data.get("providers")
    if not isinstance(providers_section, dict):
        raise ConfigError("config.providers must be an object")
    kind = providers_section.get("kind")
    if kind == "oracle":
        _require_keys(
            providers_section,
            {"kind", "world", "perturb_depth_scale", "provider_seed"},
            "config.providers",
        )
        world_section = providers_section.get("world", {})
        _require_keys(
            world_section,
            {"size", "seed", "texture", "sphere_count", "checker_size"},
            "config.providers.world",
        )
        provider_options = {
            "world": {
                "size": float(_get_number(world_section, "size", "world", lo=0.1, default=4.0)),
                "seed": int(_get_number(world_section, "seed", "world", default=0)),
                "texture": world_section.get("texture", "gradient"),
                "sphere_count": int(
                    _get_number(world_section, "sphere_count", "world", lo=0, hi=64, default=2)
                ),
                "checker_size": float(
                    _get_number(world_section, "checker_size", "world", lo=1e-3, default=0.5)
                ),
            },
            "perturb_depth_scale": bool(providers_section.get("perturb_depth_scale", True)),
            "provider_seed": int(
                _get_number(providers_section, "provider_seed", "providers", default=seed)
            ),
        }
        if provider_options["world"]["texture"] not in ("gradient", "checker"):
            raise ConfigError(
                f"unknown world texture {provider_options['world']['texture']!r}"
            )
    elif kind == "remote":
        _require_keys(
            providers_section,
            {"kind", "base_url", "timeout_s", "retries", "backoff_s"},
            "config.providers",
        )
        if "base_url" not in providers_section:
            raise ConfigError("remote provider needs providers.base_url")
        provider_options = {
            "base_url": str(providers_section["base_url"]),
            "timeout_s": float(
                _get_number(providers_section, "timeout_s", "providers", lo=1e-3, default=30.0)
            ),
            "retries": int(
                _get_number(providers_section, "retries", "providers", lo=0, hi=10, default=3)
            ),
            "backoff_s": float(
                _get_number(providers_section, "backoff_s", "providers", lo=0.0, default=0.5)
            ),
        }
    else:
        raise ConfigError(f"providers.kind must be 'oracle' or 'remote', got {kind!r}")

    fit_section = data.get("scale_fit", {})
    if not isinstance(fit_section, dict):
        raise ConfigError("config.scale_fit must be an object")
    _require_keys(fit_section, {"lr", "max_iter", "tol"}, "config.scale_fit")
    scale_fit = ScaleFitParams(
        lr=float(_get_number(fit_section, "lr", "scale_fit", lo=1e-6, hi=10.0, default=0.1)),
        max_iter=int(_get_number(fit_section, "max_iter", "scale_fit", lo=1, hi=100000,
                                 default=100)),
        tol=float(_get_number(fit_section, "tol", "scale_fit", lo=0.0, default=1e-5)),
    )

    splat_section = data.get("splats", {})
    if not isinstance(splat_section, dict):
        raise ConfigError("config.splats must be an object")
    _require_keys(
        splat_section,
        {"enabled", "iterations", "voxel_size", "learning_rates", "momentum", "background"},
        "config.splats",
    )
    lrs = splat_section.get("learning_rates", {})
    _require_keys(lrs, {"centers", "log_radius", "opacity", "color"},
                  "config.splats.learning_rates")
    splat_schedule = OptimizeSchedule(
        iterations=int(_get_number(splat_section, "iterations", "splats", lo=0,
                                   hi=10_000_000, default=300)),
        lr_centers=float(_get_number(lrs, "centers", "learning_rates", lo=0.0, default=1e-3)),
        lr_log_radius=float(_get_number(lrs, "log_radius", "learning_rates", lo=0.0,
                                        default=5e-3)),
        lr_opacity=float(_get_number(lrs, "opacity", "learning_rates", lo=0.0, default=5e-2)),
        lr_color=float(_get_number(lrs, "color", "learning_rates", lo=0.0, default=1e-2)),
        momentum=float(_get_number(splat_section, "momentum", "splats", lo=0.0, hi=0.999,
                                   default=0.9)),
    )
    background = splat_section.get("background", [0.0, 0.0, 0.0])
    if (not isinstance(background, list) or len(background) != 3
            or not all(isinstance(x, (int, float)) and 0 <= x <= 1 for x in background)):
        raise ConfigError("config.splats.background must be three numbers in [0, 1]")

    output_dir = data.get("output_dir", "out")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("config.output_dir must be a non-empty string")

    return RunConfig(
        input_kind=input_kind,
        input_value=input_value,
        intrinsics=intr,
        trajectory_preset=preset,
        trajectory_parameters=traj_params,
        steps=steps,
        extra_views=extra_views,
        min_overlap=min_overlap,
        provider_kind=kind,
        provider_options=provider_options,
        seed=seed,
        prompt=prompt,
        prompt_schedule=tuple(prompt_schedule),
        scale_fit=scale_fit,
        splats_enabled=bool(splat_section.get("enabled", True)),
        splat_schedule=splat_schedule,
        splat_voxel_size=float(
            _get_number(splat_section, "voxel_size", "splats", lo=0.0, default=0.0)
        ),
        splat_background=tuple(float(x) for x in background),
        output_dir=output_dir,
        raw=data,
    )


def make_world(config: RunConfig) -> SyntheticWorld | None:
    if config.provider_kind != "oracle":
        return None
    opts = config.provider_options["world"]
    return SyntheticWorld.make(
        size=opts["size"],
        seed=opts["seed"],
        texture=opts["texture"],
        sphere_count=opts["sphere_count"],
        checker_size=opts["checker_size"],
    )


def make_provider(config: RunConfig, world: SyntheticWorld | None = None):
    if config.provider_kind == "oracle":
        world = world if world is not None else make_world(config)
        return OracleProvider(
            world,
            seed=config.provider_options["provider_seed"],
            perturb_depth_scale=config.provider_options["perturb_depth_scale"],
        )
    opts = config.provider_options
    return RemoteProvider(
        base_url=opts["base_url"],
        timeout_s=opts["timeout_s"],
        retries=opts["retries"],
        backoff_s=opts["backoff_s"],
        auth_token=os.environ.get(REMOTE_TOKEN_ENV),
    )


def load_input(config: RunConfig, provider) -> RgbdFrame | np.ndarray | str:
    """Resolve the configured input variant into pipeline input."""
    intr = config.intrinsics
    if config.input_kind == "prompt":
        return str(config.input_value)
    if config.input_kind == "rgb":
        return load_png_rgb(str(config.input_value))
    paths = config.input_value
    rgb = load_png_rgb(str(paths["rgb"]))
    depth_path = str(paths["depth"])
    if depth_path.endswith(".npy"):
        depth = load_depth_npy(depth_path)
    else:
        depth = load_png_depth16(depth_path)
    if rgb.shape[:2] != (intr.height, intr.width) or depth.shape != (intr.height, intr.width):
        raise ConfigError(
            f"input files are {rgb.shape[:2]} / {depth.shape}, camera expects "
            f"{(intr.height, intr.width)}"
        )
    return RgbdFrame(rgb, depth)


def make_construction_trajectory(config: RunConfig) -> Trajectory:
    params = dict(config.trajectory_parameters)
    params.setdefault("steps", config.steps)
    return make_trajectory(
        config.trajectory_preset,
        params,
        config.intrinsics,
        min_overlap=config.min_overlap,
    )


def make_construction_config(config: RunConfig, provider) -> ConstructionConfig:
    return ConstructionConfig(
        input=load_input(config, provider),
        intr=config.intrinsics,
        trajectory=make_construction_trajectory(config),
        scale_fit=config.scale_fit,
        prompt=config.prompt,
        prompt_schedule=config.prompt_schedule,
        seed=config.seed,
    )
