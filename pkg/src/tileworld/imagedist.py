"""Non-neural image distance used for reorientation.

Multiscale structural dissimilarity: 1 - mean SSIM over a small dyadic
pyramid, computed on alpha-premultiplied RGB so the comparison ignores
whatever sits behind transparent pixels.  Any strictly monotone transform of
the distance leads to the same argmin, so callers may substitute a neural
perceptual distance through the generator protocol without other changes.
"""

from __future__ import annotations

import numpy as np

_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _premultiply(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        return arr[:, :, None]
    if arr.shape[2] == 4:
        return arr[:, :, :3] * arr[:, :, 3:4]
    return arr[:, :, :3]


def resize_area(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Box-filter resize (bilinear on the coordinate grid); channels last."""
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[:2]
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return arr.copy()
    ys = (np.arange(oh) + 0.5) * h / oh - 0.5
    xs = (np.arange(ow) + 0.5) * w / ow - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    a = arr[np.ix_(y0, x0)]
    b = arr[np.ix_(y0, x1)]
    c = arr[np.ix_(y1, x0)]
    d = arr[np.ix_(y1, x1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def _box_filter(arr: np.ndarray, radius: int) -> np.ndarray:
    pad = np.pad(arr, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    cs = np.cumsum(np.cumsum(pad, axis=0), axis=1)
    cs = np.pad(cs, ((1, 0), (1, 0), (0, 0)))
    k = 2 * radius + 1
    h, w = arr.shape[:2]
    total = (cs[k:k + h, k:k + w] - cs[:h, k:k + w]
             - cs[k:k + h, :w] + cs[:h, :w])
    return total / (k * k)


def _ssim(a: np.ndarray, b: np.ndarray, radius: int = 3) -> float:
    mu_a = _box_filter(a, radius)
    mu_b = _box_filter(b, radius)
    var_a = _box_filter(a * a, radius) - mu_a ** 2
    var_b = _box_filter(b * b, radius) - mu_b ** 2
    cov = _box_filter(a * b, radius) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
    den = (mu_a ** 2 + mu_b ** 2 + _C1) * (var_a + var_b + _C2)
    return float(np.mean(num / den))


def _halve(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape[:2]
    h2, w2 = h - h % 2, w - w % 2
    v = arr[:h2, :w2]
    return 0.25 * (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2])


def multiscale_dissimilarity(a: np.ndarray, b: np.ndarray, scales: int = 3) -> float:
    """Distance in [0, 2]; 0 for identical images. Sizes may differ."""
    pa = _premultiply(a)
    pb = _premultiply(b)
    if pa.shape[:2] != pb.shape[:2]:
        pb = resize_area(pb, pa.shape[:2])
    values = []
    for level in range(scales):
        if min(pa.shape[0], pa.shape[1]) < 8 and level > 0:
            break
        values.append(_ssim(pa, pb))
        pa, pb = _halve(pa), _halve(pb)
    return 1.0 - float(np.mean(values))


class StructuralImageDistance:
    """Default implementation of the image-distance generator role."""

    def __init__(self, scales: int = 3):
        self.scales = scales

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return multiscale_dissimilarity(a, b, scales=self.scales)
