"""Typed interfaces for the six generator roles.

Every role resolves to exactly one active implementation per pipeline run:
a bundled mock, or a remote service reached over the wire protocol.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from tileworld.framing2d import BackgroundRemoval, InpaintRequest, TileImagePrompt
from tileworld.isorender import FramedImage
from tileworld.latentops import (
    DenoiserHandle,
    NoiseSchedule,
    SparseLatentVolume,
    mean_denoise_step,
)
from tileworld.occupancy import OccupancyVolume
from tileworld.splats import SplatSet
from tileworld.worldspec import WorldSpec

PROTOCOL_NAME = "tileworld-genproto"
PROTOCOL_MAJOR = 1
PROTOCOL_MINOR = 0

ROLE_PROMPT_EXPANDER = "prompt-expander"
ROLE_INPAINTER = "inpainter-2d"
ROLE_IMAGE_TO_3D = "image-to-3d"
ROLE_LATENT_DENOISER = "latent-denoiser"
ROLE_BACKGROUND_REMOVAL = "background-removal"
ROLE_IMAGE_DISTANCE = "image-distance"

ROLES = (
    ROLE_PROMPT_EXPANDER,
    ROLE_INPAINTER,
    ROLE_IMAGE_TO_3D,
    ROLE_LATENT_DENOISER,
    ROLE_BACKGROUND_REMOVAL,
    ROLE_IMAGE_DISTANCE,
)


class ProtocolViolation(RuntimeError):
    """A generator broke a contract (e.g. changed pixels outside the mask)."""


@dataclass(frozen=True)
class GeneratorEndpoint:
    """Where one role is served: the local mock or a remote URI."""

    role: str
    transport: str = "local-mock"      # "local-mock" | "remote"
    address: str = ""
    timeout: float = 60.0
    max_retries: int = 2

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.transport not in ("local-mock", "remote"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.transport == "remote" and not self.address:
            raise ValueError("remote endpoints need an address")


@dataclass
class Image3DResult:
    """Everything the 3D generator returns for one tile."""

    splats: SplatSet
    occupancy: OccupancyVolume
    latents: SparseLatentVolume
    seed: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.occupancy.resolution != self.latents.resolution:
            raise ValueError("occupancy and latent resolutions differ")
        occ = self.occupancy.voxels
        c = self.latents.coords
        if len(c) and not occ[c[:, 0], c[:, 1], c[:, 2]].all():
            raise ValueError("latent cells outside the occupancy active set")


@runtime_checkable
class PromptExpander(Protocol):
    def expand(self, seed_prompt: str, width: int, height: int) -> WorldSpec: ...


@runtime_checkable
class Inpainter2D(Protocol):
    def inpaint(self, request: InpaintRequest) -> FramedImage: ...


@runtime_checkable
class ImageTo3D(Protocol):
    def generate(self, prompt_image: TileImagePrompt, seed: int) -> Image3DResult: ...


@runtime_checkable
class LatentDenoiser(Protocol):
    """Factory for conditioned denoiser handles plus the latent decoder."""

    def make_handle(self, views: Sequence[FramedImage], volume: SparseLatentVolume,
                    reference: np.ndarray | None = None) -> DenoiserHandle: ...

    def decode(self, volume: SparseLatentVolume) -> SplatSet: ...


@runtime_checkable
class ImageDistance(Protocol):
    def distance(self, a: np.ndarray, b: np.ndarray) -> float: ...


@dataclass
class EndpointSet:
    """The one active implementation of each role for a pipeline run."""

    expander: PromptExpander
    inpainter: Inpainter2D
    image3d: ImageTo3D
    denoiser: LatentDenoiser
    background: BackgroundRemoval
    imagedist: ImageDistance

    def for_role(self, role: str):
        mapping = {
            ROLE_PROMPT_EXPANDER: self.expander,
            ROLE_INPAINTER: self.inpainter,
            ROLE_IMAGE_TO_3D: self.image3d,
            ROLE_LATENT_DENOISER: self.denoiser,
            ROLE_BACKGROUND_REMOVAL: self.background,
            ROLE_IMAGE_DISTANCE: self.imagedist,
        }
        if role not in mapping:
            raise ValueError(f"unknown role {role!r}")
        return mapping[role]


def denoise_step(handle: DenoiserHandle, features: np.ndarray, t: int,
                 schedule: NoiseSchedule) -> np.ndarray:
    """One denoising step: the mean of the handle's per-view updates."""
    return mean_denoise_step(handle, features, t, schedule)


def check_inpaint_contract(request: InpaintRequest, result: FramedImage,
                           tolerance: float = 1.0 / 255.0) -> None:
    """Raise ProtocolViolation if the result strays from the base outside
    the mask, or its dimensions do not match the request."""
    if result.pixels.shape != request.base.pixels.shape:
        raise ProtocolViolation(
            f"inpaint result shape {result.pixels.shape} != base {request.base.pixels.shape}")
    outside = ~request.mask
    diff = np.abs(result.pixels[outside] - request.base.pixels[outside])
    worst = float(diff.max()) if diff.size else 0.0
    if worst > tolerance:
        raise ProtocolViolation(
            f"inpaint changed pixels outside the mask (max deviation {worst:.4f})")
