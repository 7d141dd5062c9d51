"""Model backends, one per role.

Each backend id maps to a loader; "stub" ids resolve to procedural
implementations that honor every protocol contract without model weights.
Real model ids (diffusion inpainters, image-to-3D generators, LLM
expanders) plug in through the same registry: a loader returns an object
with the same call surface, owning whatever sampling-loop surgery its model
needs to expose occupancy, second-stage latents and per-step denoising.
"""

from __future__ import annotations

import hashlib

import numpy as np


class BackendLoadError(RuntimeError):
    """A configured model backend cannot be loaded (startup error)."""


def _hash01(*parts) -> float:
    digest = hashlib.blake2b("|".join(str(p) for p in parts).encode(),
                             digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2 ** 64


def _tint(prompt: str, seed: int) -> np.ndarray:
    return np.array([
        0.25 + 0.7 * _hash01(prompt, seed, "r"),
        0.25 + 0.7 * _hash01(prompt, seed, "g"),
        0.25 + 0.7 * _hash01(prompt, seed, "b"),
    ], dtype=np.float32)


class StubInpainter:
    """Fills the masked region with a prompt-keyed tint shaded by height.

    Stands in for a diffusion inpainter; the service re-imposes the base
    outside the mask regardless of what this produces.
    """

    def inpaint(self, base: np.ndarray, mask: np.ndarray, prompt: str,
                seed: int) -> np.ndarray:
        out = base.copy()
        ys, xs = np.nonzero(mask)
        if len(ys) == 0:
            return out
        tint = _tint(prompt, seed)
        rows = (ys - ys.min()) / max(1, ys.max() - ys.min())
        shade = (0.65 + 0.35 * rows)[:, None]
        out[ys, xs, :3] = np.clip(tint * shade, 0.0, 1.0)
        out[ys, xs, 3] = 1.0
        return out


class StubImageTo3D:
    """Extrudes the image silhouette into a voxel block world.

    The alpha silhouette becomes the footprint; per-column height follows
    luminance; colors are sampled from the image.  Output satisfies the
    artifact shape invariants (matching resolutions, latent cells on active
    voxels, unit quaternions, opacities in [0, 1]).
    """

    def __init__(self, resolution: int = 64, channels: int = 8):
        self.resolution = resolution
        self.channels = channels

    def generate(self, image: np.ndarray, seed: int) -> dict:
        r = self.resolution
        h, w = image.shape[:2]
        ui = np.minimum((np.arange(r) + 0.5) * w / r, w - 1).astype(int)
        vi = np.minimum((np.arange(r) + 0.5) * h / r, h - 1).astype(int)
        patch = image[np.ix_(vi, ui)]                   # (r, r, 4)
        silhouette = patch[:, :, 3] > 0.25
        if not silhouette.any():
            silhouette[r // 2, r // 2] = True
        lum = patch[:, :, :3].mean(axis=2)
        heights = np.where(silhouette, 2 + np.rint(lum * (r // 4)).astype(int), 0)

        occ = np.zeros((r, r, r), dtype=bool)
        colors = np.zeros((r, r, r, 3), dtype=np.float32)
        for u in range(r):
            for v in range(r):
                hh = heights[v, u]
                if hh:
                    occ[u, v, :hh] = True
                    colors[u, v, :hh] = patch[v, u, :3]

        cells = np.argwhere(occ)
        feats = np.zeros((len(cells), self.channels), dtype=np.float32)
        feats[:, :3] = colors[cells[:, 0], cells[:, 1], cells[:, 2]]

        surface = self._surface(occ, cells)
        scenters = (cells[surface] + 0.5) / r
        n = len(scenters)
        rot = np.zeros((n, 4), dtype=np.float32)
        rot[:, 0] = 1.0
        return {
            "centers": scenters.astype(np.float32),
            "scales": np.full((n, 3), 0.4 / r, dtype=np.float32),
            "rotations": rot,
            "opacities": np.ones(n, dtype=np.float32),
            "colors": feats[surface][:, :3],
            "occupancy": occ,
            "cells": cells,
            "features": feats,
        }

    @staticmethod
    def _surface(occ: np.ndarray, cells: np.ndarray) -> np.ndarray:
        padded = np.pad(occ, 1)
        enclosed = (padded[2:, 1:-1, 1:-1] & padded[:-2, 1:-1, 1:-1]
                    & padded[1:-1, 2:, 1:-1] & padded[1:-1, :-2, 1:-1]
                    & padded[1:-1, 1:-1, 2:] & padded[1:-1, 1:-1, :-2])
        return ~enclosed[cells[:, 0], cells[:, 1], cells[:, 2]]


class StubDenoiser:
    """Linear per-step pull toward the reference latents (or zero)."""

    def step(self, features: np.ndarray, t: int, levels: list[float],
             reference: np.ndarray | None) -> np.ndarray:
        steps = len(levels) - 1
        target = reference if reference is not None else np.zeros_like(features)
        rate = np.float32(1.0 / (steps - t))
        return (features + rate * (target - features)).astype(np.float32)

    def decode(self, coords: np.ndarray, features: np.ndarray, frame: dict,
               resolution: int) -> dict:
        from genbridge.formats import frame_centers, frame_voxel_size

        shape = (resolution, resolution, resolution)
        centers = frame_centers(frame, coords, shape)
        size = frame_voxel_size(frame, shape)
        n = len(coords)
        rot = np.zeros((n, 4), dtype=np.float32)
        rot[:, 0] = 1.0
        return {
            "centers": centers.astype(np.float32),
            "scales": np.tile((size * 0.4).astype(np.float32), (n, 1)),
            "rotations": rot,
            "opacities": np.ones(n, dtype=np.float32),
            "colors": np.clip(features[:, :3], 0.0, 1.0),
        }


class StubExpander:
    """Deterministic grid of themed tile prompts in the world-spec schema."""

    _SPOTS = ("terrace", "arcade", "boathouse", "mill", "cloister", "bazaar",
              "aviary", "grove", "quay", "belfry")

    def expand(self, seed_prompt: str, width: int, height: int) -> dict:
        tiles = []
        for y in range(height):
            for x in range(width):
                idx = int(_hash01(seed_prompt, x, y) * len(self._SPOTS))
                tiles.append({"prompt": f"{self._SPOTS[idx % len(self._SPOTS)]} "
                                        f"near {seed_prompt}", "x": x, "y": y})
        style = "{tile_prompt}, " + seed_prompt + ", isometric view, soft shading"
        return {"tiles": tiles, "prompt": style}


class StubMatte:
    """Keeps the ground-truth matte when supplied, otherwise chroma-keys the
    slab gray; never grows alpha beyond the input."""

    def matte(self, image: np.ndarray, mask: np.ndarray,
              gt_alpha: np.ndarray | None) -> np.ndarray:
        alpha = image[:, :, 3].copy()
        if gt_alpha is not None:
            alpha = np.minimum(alpha, gt_alpha.astype(np.float32))
        else:
            gray_dist = np.abs(image[:, :, :3] - 0.5).max(axis=2)
            alpha = np.where(gray_dist < 0.04, 0.0, alpha)
        return np.where(mask, alpha, 0.0).astype(np.float32)


class StubDistance:
    """RMSE on alpha-premultiplied RGB."""

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        pa = a[:, :, :3] * a[:, :, 3:4]
        pb = b[:, :, :3] * b[:, :, 3:4]
        if pa.shape != pb.shape:
            raise ValueError("image shapes differ")
        return float(np.sqrt(np.mean((pa - pb) ** 2)))


def load_backends(config) -> dict:
    """Resolve the configured model id of every role to a live backend."""
    loaded = {}
    for role, model_id in config.models.items():
        if model_id == "stub":
            loaded[role] = _STUB_FACTORIES[role](config)
        else:
            raise BackendLoadError(
                f"model backend {model_id!r} for role {role!r} is not available "
                f"in this build; register a loader in genbridge.backends")
    return loaded


_STUB_FACTORIES = {
    "prompt-expander": lambda cfg: StubExpander(),
    "inpainter-2d": lambda cfg: StubInpainter(),
    "image-to-3d": lambda cfg: StubImageTo3D(resolution=cfg.occupancy_resolution,
                                             channels=cfg.latent_channels),
    "latent-denoiser": lambda cfg: StubDenoiser(),
    "background-removal": lambda cfg: StubMatte(),
    "image-distance": lambda cfg: StubDistance(),
}
