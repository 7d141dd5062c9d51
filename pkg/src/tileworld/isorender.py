"""Software isometric renderer for splat scenes.

One fixed orthographic oblique camera is shared by every image of a world
build.  The camera looks toward +x/+y and down, so tiles generated earlier
(lower x, then lower y) sit nearer the viewer and west neighbours appear to
the left.  The renderer depth-sorts gaussians, composites them front to back,
and can mix in axis-aligned gray slabs rasterized exactly by per-pixel
ray/box intersection.  Output is deterministic for identical inputs.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from tileworld.splats import SplatSet, quat_to_matrix

ISO_ELEVATION_DEG = math.degrees(math.atan(1.0 / math.sqrt(2.0)))  # ~35.264

IMAGE_KINDS = ("base-only", "context", "inpaint-result", "seam-view")

# Variance floor (px^2) so sub-pixel gaussians still land on the raster.
_AA_VAR = 0.25
_ALPHA_EPS = 1.0 / 512.0


class CameraParameterError(ValueError):
    """Raised for non-positive scales or other unusable camera parameters."""


@dataclass(frozen=True)
class IsometricCamera:
    """Orthographic oblique camera; fixed for the lifetime of a world build.

    ``scale`` is world units per pixel; ``offset_px`` shifts the projection
    center (used to aim the fixed vantage at a tile without changing angles).
    """

    scale: float
    image_size: int = 1024
    azimuth_deg: float = 45.0
    elevation_deg: float = ISO_ELEVATION_DEG
    offset_px: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.scale <= 0.0:
            raise CameraParameterError(f"camera scale must be positive, got {self.scale}")
        if self.image_size < 1:
            raise CameraParameterError("image_size must be >= 1")

    @classmethod
    def default(cls, image_size: int = 1024, tile_span_frac: float = 0.4,
                azimuth_deg: float = 45.0, elevation_deg: float = ISO_ELEVATION_DEG
                ) -> "IsometricCamera":
        """Camera whose unit tile spans ``tile_span_frac`` of the image width."""
        span_world = math.sqrt(2.0)  # projected width of the unit square at 45 deg
        scale = span_world / (tile_span_frac * image_size)
        return cls(scale=scale, image_size=image_size,
                   azimuth_deg=azimuth_deg, elevation_deg=elevation_deg)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) unit vectors of the view frame."""
        az = math.radians(self.azimuth_deg)
        el = math.radians(self.elevation_deg)
        forward = np.array([math.cos(el) * math.cos(az),
                            math.cos(el) * math.sin(az),
                            -math.sin(el)])
        right = np.array([math.sin(az), -math.cos(az), 0.0])
        up = np.cross(right, forward)
        return right, up / np.linalg.norm(up), forward

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project world points to (px, py, depth); depth grows away from camera."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        right, up, forward = self.basis()
        half = self.image_size / 2.0
        px = half + self.offset_px[0] + (p @ right) / self.scale
        py = half + self.offset_px[1] - (p @ up) / self.scale
        depth = p @ forward
        return px, py, depth

    def aimed_at(self, point) -> "IsometricCamera":
        """Same vantage, with ``point`` moved to the image center."""
        right, up, _ = self.basis()
        p = np.asarray(point, dtype=np.float64).reshape(3)
        offx = -(p @ right) / self.scale
        offy = (p @ up) / self.scale
        return replace(self, offset_px=(float(offx), float(offy)))

    def pixel_ray_origins(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """World-space points projecting onto the given pixels with depth 0."""
        right, up, _ = self.basis()
        half = self.image_size / 2.0
        sx = (np.asarray(px, dtype=np.float64) - half - self.offset_px[0]) * self.scale
        sy = (half + self.offset_px[1] - np.asarray(py, dtype=np.float64)) * self.scale
        return sx[..., None] * right + sy[..., None] * up


@dataclass(frozen=True)
class SlabBox:
    """Axis-aligned opaque box, rasterized exactly (gray tile bases)."""

    x0: float
    y0: float
    x1: float
    y1: float
    z0: float
    z1: float
    color: tuple[float, float, float] = (128 / 255.0, 128 / 255.0, 128 / 255.0)

    @classmethod
    def tile_base(cls, slot: tuple[int, int] = (0, 0), margin: float = 0.0,
                  thickness: float = 0.08, gray: float = 128 / 255.0) -> "SlabBox":
        x, y = slot
        return cls(x - margin, y - margin, x + 1 + margin, y + 1 + margin,
                   -thickness, 0.0, (gray, gray, gray))

    def corners(self) -> np.ndarray:
        xs, ys, zs = (self.x0, self.x1), (self.y0, self.y1), (self.z0, self.z1)
        return np.array([(x, y, z) for x in xs for y in ys for z in zs])


@dataclass
class FramedImage:
    """RGBA raster plus the camera, inpaint mask and provenance that framed it."""

    pixels: np.ndarray               # (S, S, 4) float32, straight alpha in [0,1]
    mask: np.ndarray                 # (S, S) bool, True = region to inpaint
    camera: IsometricCamera
    kind: str = "context"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 4:
            raise ValueError("pixels must be (H, W, 4)")
        if self.mask.shape != self.pixels.shape[:2]:
            raise ValueError("mask dimensions must equal pixel dimensions")
        if self.kind not in IMAGE_KINDS:
            raise ValueError(f"unknown image kind {self.kind!r}")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def to_png_bytes(self) -> bytes:
        arr = np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr, mode="RGBA").save(buf, format="PNG")
        return buf.getvalue()

    @staticmethod
    def pixels_from_png(data: bytes) -> np.ndarray:
        img = Image.open(io.BytesIO(data)).convert("RGBA")
        return np.asarray(img, dtype=np.float32) / 255.0


def mask_to_png_bytes(mask: np.ndarray) -> bytes:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def mask_from_png_bytes(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data)).convert("L")
    return np.asarray(img) >= 128


def _splat_screen_cov(splats: SplatSet, camera: IsometricCamera) -> np.ndarray:
    """2x2 screen-space covariances (px^2) for every gaussian."""
    right, up, _ = camera.basis()
    j = np.stack([right / camera.scale, -up / camera.scale])  # (2, 3)
    rot = quat_to_matrix(splats.rotations)                    # (N, 3, 3)
    s2 = (splats.scales.astype(np.float64)) ** 2              # (N, 3)
    m = rot * s2[:, None, :]                                  # R * diag(s^2)
    cov3 = m @ np.swapaxes(rot, 1, 2)                         # R s^2 R^T
    cov2 = np.einsum("ij,njk,lk->nil", j, cov3, j)
    cov2[:, 0, 0] += _AA_VAR
    cov2[:, 1, 1] += _AA_VAR
    return cov2


def _rasterize_slabs(slabs: Sequence[SlabBox], camera: IsometricCamera
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact coverage of opaque boxes: (rgb, hit, depth) full-image buffers."""
    size = camera.image_size
    rgb = np.zeros((size, size, 3), dtype=np.float32)
    hit = np.zeros((size, size), dtype=bool)
    depth = np.full((size, size), np.inf, dtype=np.float64)
    _, _, forward = camera.basis()
    for slab in slabs:
        px, py, _ = camera.project(slab.corners())
        x0 = max(0, int(math.floor(px.min())) - 1)
        x1 = min(size, int(math.ceil(px.max())) + 2)
        y0 = max(0, int(math.floor(py.min())) - 1)
        y1 = min(size, int(math.ceil(py.max())) + 2)
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        origins = camera.pixel_ray_origins(xs + 0.5, ys + 0.5)
        lo = np.array([slab.x0, slab.y0, slab.z0])
        hi = np.array([slab.x1, slab.y1, slab.z1])
        tmin = np.full(xs.shape, -np.inf)
        tmax = np.full(xs.shape, np.inf)
        ok = np.ones(xs.shape, dtype=bool)
        for axis in range(3):
            f = forward[axis]
            o = origins[..., axis]
            if abs(f) < 1e-12:
                ok &= (o >= lo[axis]) & (o <= hi[axis])
                continue
            t1 = (lo[axis] - o) / f
            t2 = (hi[axis] - o) / f
            tmin = np.maximum(tmin, np.minimum(t1, t2))
            tmax = np.minimum(tmax, np.maximum(t1, t2))
        ok &= tmax >= tmin
        if not ok.any():
            continue
        d = np.where(ok, tmin, np.inf)
        sl = (slice(y0, y1), slice(x0, x1))
        closer = d < depth[sl]
        depth[sl] = np.where(closer, d, depth[sl])
        region = rgb[sl]
        region[closer] = np.asarray(slab.color, dtype=np.float32)
        hit[sl] |= ok
    return rgb, hit, depth


def box_coverage(camera: IsometricCamera, lo, hi) -> np.ndarray:
    """Boolean raster of pixels whose view ray intersects the world box."""
    slab = SlabBox(lo[0], lo[1], hi[0], hi[1], lo[2], hi[2])
    _, hit, _ = _rasterize_slabs([slab], camera)
    return hit


def render_scene(scene: SplatSet, camera: IsometricCamera,
                 slabs: Sequence[SlabBox] = (), kind: str = "context",
                 mask: np.ndarray | None = None, provenance: dict | None = None
                 ) -> FramedImage:
    """Depth-sorted, alpha-composited orthographic splatting over opaque slabs."""
    size = camera.image_size
    color_acc = np.zeros((size, size, 3), dtype=np.float32)
    alpha_acc = np.zeros((size, size), dtype=np.float32)
    trans = np.ones((size, size), dtype=np.float32)

    if slabs:
        slab_rgb, slab_hit, slab_depth = _rasterize_slabs(slabs, camera)
    else:
        slab_rgb = slab_hit = None
        slab_depth = None

    n = len(scene)
    if n:
        px, py, depth = camera.project(scene.centers)
        cov = _splat_screen_cov(scene, camera)
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
        det = np.maximum(det, 1e-12)
        inv_a = (cov[:, 1, 1] / det).astype(np.float32)
        inv_b = (-cov[:, 0, 1] / det).astype(np.float32)
        inv_c = (cov[:, 0, 0] / det).astype(np.float32)
        rx = 3.0 * np.sqrt(np.maximum(cov[:, 0, 0], 0.0))
        ry = 3.0 * np.sqrt(np.maximum(cov[:, 1, 1], 0.0))
        order = np.argsort(depth, kind="stable")  # near to far, ties by index
        xs_grid = np.arange(size, dtype=np.float32) + np.float32(0.5)
        pxf = px.astype(np.float32)
        pyf = py.astype(np.float32)

        colors = scene.colors
        opac = scene.opacities
        for i in order:
            op = opac[i]
            if op <= 0.0:
                continue
            x0 = max(0, int(px[i] - rx[i]))
            x1 = min(size, int(px[i] + rx[i]) + 1)
            y0 = max(0, int(py[i] - ry[i]))
            y1 = min(size, int(py[i] + ry[i]) + 1)
            if x0 >= x1 or y0 >= y1:
                continue
            dx = xs_grid[x0:x1] - pxf[i]
            dy = xs_grid[y0:y1] - pyf[i]
            q = (inv_a[i] * dx * dx)[None, :] + (inv_c[i] * dy * dy)[:, None]
            q += (np.float32(2.0) * inv_b[i]) * dy[:, None] * dx[None, :]
            alpha = op * np.exp(np.float32(-0.5) * q)
            live = alpha > _ALPHA_EPS
            if slab_depth is not None:
                live &= depth[i] < slab_depth[y0:y1, x0:x1]
            sl = (slice(y0, y1), slice(x0, x1))
            alpha *= live
            contrib = alpha * trans[sl]
            color_acc[sl] += contrib[:, :, None] * colors[i]
            alpha_acc[sl] += contrib
            trans[sl] *= np.float32(1.0) - alpha

    if slab_hit is not None:
        color_acc[slab_hit] += trans[slab_hit][:, None] * slab_rgb[slab_hit]
        alpha_acc[slab_hit] += trans[slab_hit]

    pixels = np.zeros((size, size, 4), dtype=np.float32)
    visible = alpha_acc > 1e-6
    pixels[visible, :3] = color_acc[visible] / alpha_acc[visible, None]
    pixels[:, :, 3] = np.clip(alpha_acc, 0.0, 1.0)
    if mask is None:
        mask = np.zeros((size, size), dtype=bool)
    return FramedImage(pixels=pixels, mask=mask, camera=camera, kind=kind,
                       provenance=provenance or {})


def render_splats(scene: SplatSet, camera: IsometricCamera,
                  kind: str = "context", provenance: dict | None = None) -> FramedImage:
    """Render a splat scene alone (no slabs)."""
    return render_scene(scene, camera, slabs=(), kind=kind, provenance=provenance)


def render_base_slab(camera: IsometricCamera, slab: SlabBox | None = None,
                     slot: tuple[int, int] = (0, 0), thickness: float = 0.08,
                     gray: float = 128 / 255.0) -> FramedImage:
    """Image of an empty tile base: the gray slab under the unit footprint."""
    if slab is None:
        slab = SlabBox.tile_base(slot, thickness=thickness, gray=gray)
    return render_scene(SplatSet.empty(), camera, slabs=[slab], kind="base-only",
                        provenance={"slot": list(slot)})


def make_inpaint_mask(camera: IsometricCamera, tile: tuple[int, int],
                      generated: Iterable[tuple[int, int]],
                      cube_height: float = 1.0) -> np.ndarray:
    """Projected unit-cube volume above the tile base, minus the projected
    cubes of already-generated west neighbours in the same row."""
    tile = (int(tile[0]), int(tile[1]))
    gen = {(int(x), int(y)) for x, y in generated}
    if tile in gen:
        raise ValueError(f"tile {tile} is already generated")
    x, y = tile
    mask = box_coverage(camera, (x, y, 0.0), (x + 1, y + 1, cube_height))
    for gx, gy in sorted(gen):
        if gy == y and gx < x:
            west = box_coverage(camera, (gx, gy, 0.0), (gx + 1, gy + 1, cube_height))
            mask &= ~west
    return mask


def splat_pixel_footprints(scene: SplatSet, camera: IsometricCamera
                           ) -> list[tuple[slice, slice, np.ndarray]]:
    """Per-splat raster coverage (3-sigma ellipse) as (row-slice, col-slice, mask)."""
    size = camera.image_size
    out: list[tuple[slice, slice, np.ndarray]] = []
    if len(scene) == 0:
        return out
    px, py, _ = camera.project(scene.centers)
    cov = _splat_screen_cov(scene, camera)
    det = np.maximum(cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2, 1e-12)
    inv_a = cov[:, 1, 1] / det
    inv_b = -cov[:, 0, 1] / det
    inv_c = cov[:, 0, 0] / det
    rx = 3.0 * np.sqrt(np.maximum(cov[:, 0, 0], 0.0))
    ry = 3.0 * np.sqrt(np.maximum(cov[:, 1, 1], 0.0))
    for i in range(len(scene)):
        x0 = max(0, int(math.floor(px[i] - rx[i])))
        x1 = min(size, int(math.ceil(px[i] + rx[i])) + 1)
        y0 = max(0, int(math.floor(py[i] - ry[i])))
        y1 = min(size, int(math.ceil(py[i] + ry[i])) + 1)
        if x0 >= x1 or y0 >= y1:
            out.append((slice(0, 0), slice(0, 0), np.zeros((0, 0), dtype=bool)))
            continue
        dx = np.arange(x0, x1, dtype=np.float64) + 0.5 - px[i]
        dy = np.arange(y0, y1, dtype=np.float64) + 0.5 - py[i]
        q = (inv_a[i] * dx[None, :] ** 2
             + 2.0 * inv_b[i] * dx[None, :] * dy[:, None]
             + inv_c[i] * dy[:, None] ** 2)
        out.append((slice(y0, y1), slice(x0, x1), q <= 9.0))
    return out


def trim_tall_geometry(scene: SplatSet, target: tuple[int, int],
                       camera: IsometricCamera, h_trim: float = 0.75,
                       cube_height: float = 1.0) -> SplatSet:
    """Drop gaussians above ``h_trim`` whose projection covers any pixel of the
    target tile's cube mask.  Ground-level splats are never removed."""
    if len(scene) == 0:
        return scene.copy()
    x, y = int(target[0]), int(target[1])
    cube = box_coverage(camera, (x, y, 0.0), (x + 1, y + 1, cube_height))
    tall = scene.centers[:, 2] > h_trim
    keep = np.ones(len(scene), dtype=bool)
    if tall.any():
        foot = splat_pixel_footprints(scene, camera)
        for i in np.flatnonzero(tall):
            rs, cs, cover = foot[i]
            if cover.size and (cover & cube[rs, cs]).any():
                keep[i] = False
    return scene.subset(keep)
