"""Run configuration: thresholds, camera, slab geometry, seeds.

Precedence: CLI flags > environment (TILEWORLD_*) > config file > defaults.
Effective values are echoed into the build report.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields

from tileworld.framing2d import FramingConfig
from tileworld.isorender import ISO_ELEVATION_DEG, IsometricCamera

ENV_PREFIX = "TILEWORLD_"


class ConfigError(ValueError):
    """Out-of-range or inconsistent configuration."""


@dataclass(frozen=True)
class CameraConfig:
    image_size: int = 1024
    tile_span_frac: float = 0.4
    azimuth_deg: float = 45.0
    elevation_deg: float = ISO_ELEVATION_DEG

    def build(self) -> IsometricCamera:
        return IsometricCamera.default(image_size=self.image_size,
                                       tile_span_frac=self.tile_span_frac,
                                       azimuth_deg=self.azimuth_deg,
                                       elevation_deg=self.elevation_deg)


@dataclass(frozen=True)
class RunConfig:
    """Everything a build needs besides the world spec and the endpoints."""

    master_seed: int = 0
    retries: int = 8
    band_r: int = 8                   # latent blend band half-width (voxels)
    tau: float = 0.15                 # cut-detection color threshold
    delta: float = 1.0 / 64.0         # cut-detection slice half-width
    alpha: float = 1.0                # squareness threshold
    beta: float = 0.95                # base completeness threshold
    latent_res: int = 64
    latent_channels: int = 8
    schedule_steps: int = 32
    upsample_views: int = 4
    slab_margin: float = 0.1
    slab_thickness: float = 0.08
    slab_gray: float = 128 / 255.0
    h_trim: float = 0.75
    cube_height: float = 1.0
    context_radius: int | None = None
    bootstrap: bool = True
    blend: bool = True
    ground_tolerance: float = 1e-3
    camera: CameraConfig = CameraConfig()
    mock_content_res: int = 16

    def __post_init__(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not (0.0 < self.beta <= 1.0):
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if not (0 <= self.band_r < self.latent_res // 2):
            raise ConfigError(
                f"band_r must satisfy 0 <= r < R/2 = {self.latent_res // 2}, got {self.band_r}")
        if self.retries < 1:
            raise ConfigError("retry budget must be >= 1")
        if self.tau <= 0 or self.delta <= 0:
            raise ConfigError("tau and delta must be positive")

    def framing(self) -> FramingConfig:
        return FramingConfig(slab_margin=self.slab_margin,
                             slab_thickness=self.slab_thickness,
                             slab_gray=self.slab_gray,
                             cube_height=self.cube_height,
                             h_trim=self.h_trim,
                             context_radius=self.context_radius,
                             bootstrap=self.bootstrap)

    def to_json(self) -> dict:
        doc = asdict(self)
        return doc


_SIMPLE_FIELDS = {
    "master_seed": int, "retries": int, "band_r": int, "tau": float,
    "delta": float, "alpha": float, "beta": float, "latent_res": int,
    "latent_channels": int, "schedule_steps": int, "upsample_views": int,
    "slab_margin": float, "slab_thickness": float, "slab_gray": float,
    "h_trim": float, "cube_height": float,
    "ground_tolerance": float, "mock_content_res": int,
}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean from {text!r}")


def load_config(path: str | None = None, env: dict | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Layer defaults, then a JSON config file, then env vars, then overrides."""
    values: dict = {}
    camera_values: dict = {}

    if path:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        camera_values.update(doc.pop("camera", {}))
        values.update(doc)

    env = dict(os.environ if env is None else env)
    for key in list(_SIMPLE_FIELDS) + ["context_radius", "bootstrap", "blend"]:
        env_key = ENV_PREFIX + key.upper()
        if env_key in env:
            values[key] = env[env_key]
    for key in ("image_size", "tile_span_frac", "azimuth_deg", "elevation_deg"):
        env_key = ENV_PREFIX + "CAMERA_" + key.upper()
        if env_key in env:
            camera_values[key] = env[env_key]

    if overrides:
        overrides = dict(overrides)
        camera_values.update(overrides.pop("camera", {}))
        values.update({k: v for k, v in overrides.items() if v is not None})

    coerced = {}
    for key, value in values.items():
        if key in ("bootstrap", "blend"):
            coerced[key] = _parse_bool(value) if isinstance(value, str) else bool(value)
        elif key == "context_radius":
            if value in (None, "", "none", "None"):
                coerced[key] = None
            else:
                coerced[key] = int(value)
        elif key in _SIMPLE_FIELDS:
            coerced[key] = _SIMPLE_FIELDS[key](value)
        else:
            coerced[key] = value

    cam_coerced = {}
    for key, value in camera_values.items():
        cam_coerced[key] = int(value) if key == "image_size" else float(value)
    if cam_coerced:
        coerced["camera"] = CameraConfig(**cam_coerced)

    known = {f.name for f in fields(RunConfig)}
    unknown = set(coerced) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**coerced)
