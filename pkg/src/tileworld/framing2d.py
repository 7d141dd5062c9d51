"""2D framing: inpainting requests from grid context, and turning inpainted
results into image prompts for the 3D generator (foreground extraction and
rebasing onto a slightly larger gray slab).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np

from tileworld.isorender import (
    FramedImage,
    IsometricCamera,
    SlabBox,
    make_inpaint_mask,
    render_scene,
    trim_tall_geometry,
)
from tileworld.splats import SplatSet
from tileworld.worldspec import Coord, WorldSpec, build_order, compose_prompt, context_tiles


class SequencingError(RuntimeError):
    """Tile requested out of build order."""


class ExtractionError(RuntimeError):
    """Foreground extraction produced an empty image (triggers regeneration)."""


class FrameOverflowError(ValueError):
    """Foreground does not fit the rebase frame."""


class BackgroundRemoval(Protocol):
    """Refines foreground alpha inside the inpainting mask."""

    def matte(self, image: FramedImage, mask: np.ndarray) -> np.ndarray: ...


class IdentityMatte:
    """Keeps the image's own alpha channel."""

    def matte(self, image: FramedImage, mask: np.ndarray) -> np.ndarray:
        return image.pixels[:, :, 3].copy()


class ChromaKeyMatte:
    """Clears pixels whose color sits near a reference background color."""

    def __init__(self, background=(128 / 255.0,) * 3, threshold: float = 0.12):
        self.background = np.asarray(background, dtype=np.float32)
        self.threshold = float(threshold)

    def matte(self, image: FramedImage, mask: np.ndarray) -> np.ndarray:
        alpha = image.pixels[:, :, 3].copy()
        dist = np.linalg.norm(image.pixels[:, :, :3] - self.background, axis=2)
        alpha[dist < self.threshold] = 0.0
        return alpha


class ProvenanceMatte:
    """Exact matte for synthetic images that carry their true alpha in
    provenance under ``matte_alpha`` (the bundled mock inpainter does)."""

    def matte(self, image: FramedImage, mask: np.ndarray) -> np.ndarray:
        gt = image.provenance.get("matte_alpha")
        if gt is None:
            raise ValueError("image carries no ground-truth matte")
        return np.asarray(gt, dtype=np.float32).copy()


@dataclass
class InpaintRequest:
    """Everything the 2D generator needs for one tile image."""

    base: FramedImage
    mask: np.ndarray
    prompt: str
    seed: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)
        if self.mask.shape != self.base.pixels.shape[:2]:
            raise ValueError("mask dimensions must match the base image")
        if not self.mask.any():
            raise ValueError("inpainting mask has no set pixels")


@dataclass
class ForegroundCut:
    """Tightly cropped foreground raster plus its rectangle in the source frame."""

    pixels: np.ndarray            # (h, w, 4) float32
    rect: tuple[int, int, int, int]  # x0, y0, x1, y1 in source pixels
    source_size: tuple[int, int]
    provenance: dict = field(default_factory=dict)


@dataclass
class TileImagePrompt:
    """Image prompt for the 3D generator: foreground over a larger gray slab."""

    image: FramedImage
    provenance: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FramingConfig:
    slab_margin: float = 0.1        # extra slab per side, tile units
    slab_thickness: float = 0.08
    slab_gray: float = 128 / 255.0
    cube_height: float = 1.0
    h_trim: float = 0.75
    context_radius: int | None = None
    bootstrap: bool = True
    baseline_quantile: float = 0.98  # ground-contact: lowest 2% of pixels


def build_inpaint_request(spec: WorldSpec, target: Coord,
                          placed: Mapping[Coord, SplatSet],
                          camera: IsometricCamera, seed: int,
                          cfg: FramingConfig = FramingConfig()) -> InpaintRequest:
    """Base image, mask and prompt for the next tile.

    The base shows the trimmed world so far plus the target's empty slab; a
    west-edge tile with y > 0 additionally renders a temporary copy of the
    tile one row back, one slot west, which never enters persistent state.
    """
    order = build_order(spec.width, spec.height)
    expected = order[len(placed)] if len(placed) < len(order) else None
    if expected != tuple(target):
        raise SequencingError(f"tile {tuple(target)} is out of order; expected {expected}")

    cam = camera.aimed_at((target[0] + 0.5, target[1] + 0.5, 0.0))
    ctx = context_tiles(target[0], target[1], placed.keys(),
                        radius=cfg.context_radius, bootstrap=cfg.bootstrap)
    pieces = []
    for entry in ctx:
        splats = placed[entry.source]
        if entry.virtual:
            dx = entry.position[0] - entry.source[0]
            dy = entry.position[1] - entry.source[1]
            splats = splats.translated((dx, dy, 0.0))
        pieces.append(splats)
    scene = SplatSet.concat(pieces) if pieces else SplatSet.empty()
    scene = trim_tall_geometry(scene, target, cam, h_trim=cfg.h_trim,
                               cube_height=cfg.cube_height)

    slab = SlabBox.tile_base(target, thickness=cfg.slab_thickness, gray=cfg.slab_gray)
    kind = "base-only" if len(scene) == 0 else "context"
    mask = make_inpaint_mask(cam, target, placed.keys(), cube_height=cfg.cube_height)
    base = render_scene(scene, cam, slabs=[slab], kind=kind, mask=mask,
                        provenance={"target": list(target)})
    prompt = compose_prompt(spec, target[0], target[1])
    return InpaintRequest(base=base, mask=mask, prompt=prompt, seed=int(seed),
                          provenance={"target": list(target),
                                      "bootstrap": any(e.virtual for e in ctx)})


def extract_foreground(image: FramedImage, mask: np.ndarray,
                       bg_removal: BackgroundRemoval) -> ForegroundCut:
    """Mask the inpainted image, refine the silhouette, crop to content."""
    if image.kind != "inpaint-result":
        raise ValueError("extract_foreground expects an inpaint-result image")
    mask = np.ascontiguousarray(mask, dtype=bool)
    pixels = image.pixels.copy()
    pixels[~mask] = 0.0
    alpha = np.asarray(bg_removal.matte(
        FramedImage(pixels=pixels, mask=mask, camera=image.camera,
                    kind="inpaint-result", provenance=image.provenance),
        mask), dtype=np.float32)
    alpha = np.where(mask, alpha, 0.0)
    pixels[:, :, 3] = np.minimum(pixels[:, :, 3], alpha)
    pixels[pixels[:, :, 3] <= 0.0] = 0.0

    occupied = pixels[:, :, 3] > 0.0
    if not occupied.any():
        raise ExtractionError("no foreground pixels remain after matting")
    rows = np.flatnonzero(occupied.any(axis=1))
    cols = np.flatnonzero(occupied.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    x0, x1 = int(cols[0]), int(cols[-1]) + 1
    prov = dict(image.provenance)
    prov.pop("matte_alpha", None)
    prov["crop_rect"] = [x0, y0, x1, y1]
    return ForegroundCut(pixels=np.ascontiguousarray(pixels[y0:y1, x0:x1]),
                         rect=(x0, y0, x1, y1),
                         source_size=image.size, provenance=prov)


def _baseline_row(pixels: np.ndarray, quantile: float) -> float:
    ys, _ = np.nonzero(pixels[:, :, 3] > 0.0)
    return float(np.quantile(ys, quantile))


def rebase(foreground: ForegroundCut, camera: IsometricCamera,
           cfg: FramingConfig = FramingConfig()) -> TileImagePrompt:
    """Composite the foreground over a slab larger than the tile footprint.

    The slab is rendered for the canonical slot and the foreground is pasted
    back at its original in-frame position, then shifted vertically so its
    ground-contact baseline lands on the slab's top face.
    """
    if foreground.pixels.size == 0 or not (foreground.pixels[:, :, 3] > 0).any():
        raise ExtractionError("cannot rebase an empty foreground")
    cam = camera.aimed_at((0.5, 0.5, 0.0))
    slab = SlabBox.tile_base((0, 0), margin=cfg.slab_margin,
                             thickness=cfg.slab_thickness, gray=cfg.slab_gray)
    canvas = render_scene(SplatSet.empty(), cam, slabs=[slab], kind="base-only")
    size = cam.image_size

    # Top-face corner nearest the camera: the tile's ground-contact pixel row.
    corners = np.array([(x, y, 0.0) for x in (0.0, 1.0) for y in (0.0, 1.0)])
    _, pys, depths = cam.project(corners)
    target_row = float(pys[int(np.argmin(depths))])

    x0, y0, x1, y1 = foreground.rect
    src_h, src_w = foreground.source_size
    # Same relative placement as in the source frame (shapes are congruent
    # under the shared orthographic vantage), vertical from the baseline rule.
    paste_x = int(round(size / 2 + (x0 - src_w / 2)))
    fg_baseline = _baseline_row(foreground.pixels, cfg.baseline_quantile)
    paste_y = int(round(target_row - fg_baseline))

    h, w = foreground.pixels.shape[:2]
    if w > size or h > size:
        raise FrameOverflowError(f"foreground {w}x{h} exceeds frame {size}x{size}")
    paste_x = min(max(paste_x, 0), size - w)
    paste_y = min(max(paste_y, 0), size - h)

    out = canvas.pixels
    region = out[paste_y:paste_y + h, paste_x:paste_x + w]
    fa = foreground.pixels[:, :, 3:4]
    ba = region[:, :, 3:4]
    out_a = fa + ba * (1 - fa)
    blended = foreground.pixels[:, :, :3] * fa + region[:, :, :3] * ba * (1 - fa)
    region[:, :, :3] = np.where(out_a > 1e-6, blended / np.maximum(out_a, 1e-6), 0.0)
    region[:, :, 3:4] = out_a

    prov = dict(foreground.provenance)
    prov["paste"] = [paste_x, paste_y]
    prov["slab_margin"] = cfg.slab_margin
    image = FramedImage(pixels=out, mask=np.zeros((size, size), dtype=bool),
                        camera=cam, kind="context", provenance=prov)
    return TileImagePrompt(image=image, provenance=prov)
