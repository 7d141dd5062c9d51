"""Post-processing of generated 3D tiles.

The 3D generator returns a tile with a synthetic extended base and arbitrary
footprint, vertical centering and quarter-turn orientation.  This module
recovers the tile proper: color-slice sweeps locate the base/content cuts,
the cut rectangle is rescaled and recentred to the unit footprint, the
ground level is estimated from the four footprint corners, and orientation
is resolved by rendering the four vertical quarter turns and minimizing an
injected image distance against the tile's 2D image prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from tileworld.imagedist import StructuralImageDistance, resize_area
from tileworld.isorender import FramedImage, IsometricCamera, render_splats
from tileworld.splats import SplatSet

DIRECTIONS = ("left", "right", "near", "far")


class CutDetectionError(RuntimeError):
    """No color transition found and no fallback allowed."""


class DegenerateTileError(RuntimeError):
    """Cropping produced an empty tile (triggers regeneration)."""


class GroundDetectionError(RuntimeError):
    """No splats in any footprint corner patch."""


@dataclass(frozen=True)
class CutSet:
    """Axis-aligned cuts separating the tile proper from the extended base."""

    x_left: float
    x_right: float
    y_near: float
    y_far: float
    tau: float
    delta: float
    fallback: frozenset[str] = frozenset()

    def __post_init__(self):
        if not (self.x_left < self.x_right and self.y_near < self.y_far):
            raise ValueError("cuts must satisfy left < right and near < far")

    @property
    def width(self) -> float:
        return self.x_right - self.x_left

    @property
    def depth(self) -> float:
        return self.y_far - self.y_near

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_left, self.x_right, self.y_near, self.y_far)


@dataclass
class TileTransform:
    """Crop + uniform rescale + ground shift + quarter-turn for one tile.

    ``apply_points`` maps generator-frame points into the canonical unit
    slot: p -> rotate_k(scale * p + translation, about (0.5, 0.5)).
    """

    crop: CutSet
    scale: float
    translation: np.ndarray          # (3,) float64
    rotation_k: int = 0
    ground_height: float = 0.0

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        q = p * self.scale + np.asarray(self.translation, dtype=np.float64)
        k = self.rotation_k % 4
        if k:
            x = q[:, 0] - 0.5
            y = q[:, 1] - 0.5
            if k == 1:
                x, y = -y, x
            elif k == 2:
                x, y = -x, -y
            else:
                x, y = y, -x
            q = np.stack([x + 0.5, y + 0.5, q[:, 2]], axis=1)
        return q

    def to_json(self) -> dict:
        return {
            "crop": {
                "x_left": self.crop.x_left, "x_right": self.crop.x_right,
                "y_near": self.crop.y_near, "y_far": self.crop.y_far,
                "tau": self.crop.tau, "delta": self.crop.delta,
                "fallback": sorted(self.crop.fallback),
            },
            "scale": self.scale,
            "translation": [float(v) for v in self.translation],
            "rotation_k": self.rotation_k,
            "ground_height": self.ground_height,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TileTransform":
        c = doc["crop"]
        crop = CutSet(x_left=c["x_left"], x_right=c["x_right"], y_near=c["y_near"],
                      y_far=c["y_far"], tau=c["tau"], delta=c["delta"],
                      fallback=frozenset(c["fallback"]))
        return cls(crop=crop, scale=doc["scale"],
                   translation=np.asarray(doc["translation"], dtype=np.float64),
                   rotation_k=int(doc["rotation_k"]),
                   ground_height=float(doc["ground_height"]))


def _sweep_cut(coords: np.ndarray, colors: np.ndarray, weights: np.ndarray,
               start: float, stop: float, delta: float, tau: float) -> float | None:
    """March half-width-delta slices from ``start`` toward ``stop`` (half a
    slice width per step); return the first slice center whose opacity-
    weighted mean color departs from the outermost nonempty slice by more
    than tau (Euclidean in unit RGB)."""
    step = (delta if stop >= start else -delta) / 2.0
    n = max(1, int(math.ceil(abs(stop - start) / abs(step))) + 1)
    centers = start + step * np.arange(n)

    order = np.argsort(coords, kind="stable")
    sorted_coords = coords[order]
    w_sorted = weights[order]
    wc_sorted = colors[order] * w_sorted[:, None]
    cum_w = np.concatenate([[0.0], np.cumsum(w_sorted)])
    cum_wc = np.concatenate([np.zeros((1, colors.shape[1])), np.cumsum(wc_sorted, axis=0)])

    lo = np.searchsorted(sorted_coords, centers - delta, side="left")
    hi = np.searchsorted(sorted_coords, centers + delta, side="left")
    totals = cum_w[hi] - cum_w[lo]
    sums = cum_wc[hi] - cum_wc[lo]
    nonempty = totals > 0.0
    if not nonempty.any():
        return None
    means = np.full((n, colors.shape[1]), np.nan)
    means[nonempty] = sums[nonempty] / totals[nonempty, None]
    reference = means[np.flatnonzero(nonempty)[0]]
    dist = np.linalg.norm(means - reference, axis=1)
    crossing = nonempty & (dist > tau)
    if not crossing.any():
        return None
    return float(centers[np.flatnonzero(crossing)[0]])


def detect_cuts(splats: SplatSet, tau: float = 0.15, delta: float = 1.0 / 64.0,
                fallback_margin: float | None = None) -> CutSet:
    """Locate the four base/content cuts by color-slice sweeps.

    A direction with no transition falls back to a fixed margin inside the
    bounding box and is flagged in the result.
    """
    if len(splats) == 0:
        raise ValueError("cannot detect cuts on an empty splat set")
    xmin, xmax, ymin, ymax = splats.footprint_bounds()
    colors = splats.colors.astype(np.float64)
    weights = splats.opacities.astype(np.float64)
    if weights.sum() <= 0.0:
        weights = np.ones_like(weights)
    xs = splats.centers[:, 0].astype(np.float64)
    ys = splats.centers[:, 1].astype(np.float64)
    if fallback_margin is None:
        fallback_margin = 0.1 / 1.2  # rebase margin in generator-frame units

    mid_x = (xmin + xmax) / 2
    mid_y = (ymin + ymax) / 2
    sweeps = {
        "left": (xs, xmin, mid_x),
        "right": (xs, xmax, mid_x),
        "near": (ys, ymin, mid_y),
        "far": (ys, ymax, mid_y),
    }
    cuts: dict[str, float] = {}
    fallback = set()
    spans = {"left": xmax - xmin, "right": xmax - xmin,
             "near": ymax - ymin, "far": ymax - ymin}
    for name, (coords, start, stop) in sweeps.items():
        found = _sweep_cut(coords, colors, weights, start, stop, delta, tau)
        if found is None:
            fallback.add(name)
            margin = fallback_margin * spans[name]
            found = start + margin if name in ("left", "near") else start - margin
        cuts[name] = found

    if not (cuts["left"] < cuts["right"] and cuts["near"] < cuts["far"]):
        raise CutDetectionError(f"inconsistent cuts {cuts}")
    return CutSet(x_left=cuts["left"], x_right=cuts["right"],
                  y_near=cuts["near"], y_far=cuts["far"],
                  tau=tau, delta=delta, fallback=frozenset(fallback))


def normalize_tile(splats: SplatSet, cuts: CutSet) -> tuple[SplatSet, TileTransform]:
    """Keep gaussians inside the cut rectangle (closed on the min side, open
    on the max side) and map the rectangle onto the unit slot with a uniform
    scale; the same factor multiplies gaussian scales."""
    c = splats.centers
    keep = ((c[:, 0] >= cuts.x_left) & (c[:, 0] < cuts.x_right)
            & (c[:, 1] >= cuts.y_near) & (c[:, 1] < cuts.y_far))
    if not keep.any():
        raise DegenerateTileError("no gaussians inside the cut rectangle")
    kept = splats.subset(keep)
    scale = 2.0 / (cuts.width + cuts.depth)
    rect_center = np.array([(cuts.x_left + cuts.x_right) / 2,
                            (cuts.y_near + cuts.y_far) / 2, 0.0])
    translation = np.array([0.5, 0.5, 0.0]) - scale * rect_center
    out = kept.scaled(scale, origin=(0.0, 0.0, 0.0)).translated(translation)
    tf = TileTransform(crop=cuts, scale=float(scale), translation=translation)
    return out, tf


def ground_height(splats: SplatSet, patch: float = 0.08) -> float:
    """Mean of the lowest splat-center heights found in the four footprint
    corner patches of a normalized tile; corners with no splats are skipped."""
    if len(splats) == 0:
        raise GroundDetectionError("empty tile")
    c = splats.centers
    heights = []
    for cx, cy in ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)):
        sel = ((np.abs(c[:, 0] - cx) <= patch) & (np.abs(c[:, 1] - cy) <= patch))
        if sel.any():
            heights.append(float(c[sel, 2].min()))
    if not heights:
        raise GroundDetectionError("no splats in any corner patch")
    return float(np.mean(heights))


def _comparison_view(image: np.ndarray, out_size: int = 96) -> np.ndarray:
    """Alpha-bbox crop + square resize, so renders with different framing
    compare on content alone."""
    alpha = image[:, :, 3]
    occ = alpha > 0.0
    if not occ.any():
        return np.zeros((out_size, out_size, 4), dtype=np.float64)
    rows = np.flatnonzero(occ.any(axis=1))
    cols = np.flatnonzero(occ.any(axis=0))
    crop = image[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    return resize_area(crop, (out_size, out_size))


def reorient(splats: SplatSet, target_image: FramedImage | np.ndarray,
             camera: IsometricCamera,
             d_img: Callable[[np.ndarray, np.ndarray], float] | None = None,
             comparison_size: int = 96) -> int:
    """Return k in {0,1,2,3} whose quarter-turn renders closest to the target
    image.  Ties break toward the smallest k, so a symmetric tile returns 0."""
    pixels = target_image.pixels if isinstance(target_image, FramedImage) else target_image
    if not (np.asarray(pixels)[:, :, 3] > 0).any():
        raise ValueError("target image is empty")
    if d_img is None:
        d_img = StructuralImageDistance().distance
    cam = camera.aimed_at((0.5, 0.5, 0.0))
    target_view = _comparison_view(np.asarray(pixels, dtype=np.float64), comparison_size)
    best_k = 0
    best_d = math.inf
    for k in range(4):
        render = render_splats(splats.rotated_quarter(k, (0.5, 0.5)), cam)
        view = _comparison_view(render.pixels.astype(np.float64), comparison_size)
        d = float(d_img(target_view, view))
        if d < best_d:
            best_k, best_d = k, d
    return best_k
