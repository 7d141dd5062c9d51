"""Adapter configuration: which model backs each role, where to bind."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from genbridge import PROTOCOL_MAJOR, ROLES

DEFAULT_MODELS = {role: "stub" for role in ROLES}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    models: dict = field(default_factory=lambda: dict(DEFAULT_MODELS))
    device: str = "cpu"
    host: str = "127.0.0.1"
    port: int = 8400
    cache_dir: str | None = None
    protocol_major: int = PROTOCOL_MAJOR
    occupancy_resolution: int = 64
    latent_channels: int = 8

    def __post_init__(self):
        if self.protocol_major != PROTOCOL_MAJOR:
            raise ConfigError(
                f"adapter declares protocol major {self.protocol_major}, "
                f"but this build speaks {PROTOCOL_MAJOR}")
        unknown = set(self.models) - set(ROLES)
        if unknown:
            raise ConfigError(f"unknown roles in model map: {sorted(unknown)}")

    @classmethod
    def from_file(cls, path: str) -> "AdapterConfig":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        models = dict(DEFAULT_MODELS)
        models.update(doc.pop("models", {}))
        return cls(models=models, **doc)
