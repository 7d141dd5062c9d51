"""Contract conformance suite, runnable against any endpoint implementation.

Checks are implementation-agnostic: the inpainting outside-mask equality,
image-to-3D artifact shape invariants, the version handshake, and a few
sanity contracts for the auxiliary roles.  Transport failures are recorded
per check and the suite continues.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tileworld.framing2d import InpaintRequest
from tileworld.genproto.interfaces import PROTOCOL_MAJOR
from tileworld.isorender import FramedImage, IsometricCamera, SlabBox, make_inpaint_mask, render_scene
from tileworld.splats import SplatSet

OUTSIDE_MASK_TOL = 1.0 / 255.0


@dataclass
class CheckResult:
    role: str
    name: str
    passed: bool
    detail: str = ""

    def to_json(self) -> dict:
        return {"role": self.role, "name": self.name,
                "passed": self.passed, "detail": self.detail}


def _probe_request(seed: int = 7, image_size: int = 96) -> InpaintRequest:
    cam = IsometricCamera.default(image_size=image_size).aimed_at((0.5, 0.5, 0.0))
    slab = SlabBox.tile_base((0, 0))
    base = render_scene(SplatSet.empty(), cam, slabs=[slab], kind="base-only")
    mask = make_inpaint_mask(cam, (0, 0), set())
    return InpaintRequest(base=base, mask=mask, prompt="conformance probe tile",
                          seed=seed, provenance={"target": [0, 0]})


def _probe_prompt_image(image_size: int = 96):
    from tileworld.framing2d import TileImagePrompt

    cam = IsometricCamera.default(image_size=image_size).aimed_at((0.5, 0.5, 0.0))
    pixels = np.zeros((image_size, image_size, 4), dtype=np.float32)
    lo, hi = image_size // 3, 2 * image_size // 3
    pixels[lo:hi, lo:hi] = (0.2, 0.6, 0.3, 1.0)
    image = FramedImage(pixels=pixels, mask=np.zeros((image_size, image_size), bool),
                        camera=cam, kind="context",
                        provenance={"target": [0, 0], "prompt": "conformance probe tile",
                                    "scene_seed": 7})
    return TileImagePrompt(image=image, provenance=image.provenance)


def check_version_handshake(base_url: str | None) -> CheckResult:
    """A request with a bumped major version must be refused."""
    if base_url is None:
        return CheckResult("protocol", "version-handshake", True,
                           "local endpoints share the engine's version")
    from tileworld.genproto.wire import VersionMismatchError, WireClient

    client = WireClient(base_url)
    bad = {"name": "tileworld-genproto", "major": PROTOCOL_MAJOR + 1, "minor": 0}
    try:
        client.call("inpainter-2d", "inpaint", {}, protocol=bad)
    except VersionMismatchError:
        return CheckResult("protocol", "version-handshake", True,
                           "mismatched major refused")
    except Exception as exc:  # noqa: BLE001
        return CheckResult("protocol", "version-handshake", False,
                           f"expected version refusal, got {type(exc).__name__}: {exc}")
    return CheckResult("protocol", "version-handshake", False,
                       "server accepted a mismatched major version")


def check_inpaint_outside_mask(inpainter, tolerance: float = OUTSIDE_MASK_TOL) -> CheckResult:
    req = _probe_request()
    try:
        result = inpainter.inpaint(req)
    except Exception as exc:  # noqa: BLE001
        return CheckResult("inpainter-2d", "outside-mask-equality", False, str(exc))
    if result.pixels.shape != req.base.pixels.shape:
        return CheckResult("inpainter-2d", "outside-mask-equality", False,
                           "result dimensions differ from the base image")
    outside = ~req.mask
    diff = np.abs(result.pixels[outside] - req.base.pixels[outside])
    worst = float(diff.max()) if diff.size else 0.0
    ok = worst <= tolerance
    return CheckResult("inpainter-2d", "outside-mask-equality", ok,
                       f"max outside-mask deviation {worst:.5f} (tolerance {tolerance:.5f})")


def check_image3d_shapes(image3d) -> CheckResult:
    probe = _probe_prompt_image()
    try:
        result = image3d.generate(probe, seed=11)
    except Exception as exc:  # noqa: BLE001
        return CheckResult("image-to-3d", "artifact-shape-invariants", False, str(exc))
    problems = []
    if result.occupancy.resolution != result.latents.resolution:
        problems.append("occupancy/latent resolution mismatch")
    occ = result.occupancy.voxels
    c = result.latents.coords
    if len(c) and not occ[c[:, 0], c[:, 1], c[:, 2]].all():
        problems.append("latent cells outside occupancy")
    try:
        result.splats.validate()
    except ValueError as exc:
        problems.append(str(exc))
    if not np.isfinite(result.latents.features).all():
        problems.append("non-finite latent features")
    return CheckResult("image-to-3d", "artifact-shape-invariants", not problems,
                       "; ".join(problems) or
                       f"{result.latents.cell_count} cells at R={result.occupancy.resolution}")


def check_background_removal(background) -> CheckResult:
    req = _probe_request()
    image = FramedImage(pixels=req.base.pixels.copy(), mask=req.mask,
                        camera=req.base.camera, kind="inpaint-result",
                        provenance={"matte_alpha": req.base.pixels[:, :, 3].copy()})
    try:
        alpha = np.asarray(background.matte(image, req.mask), dtype=np.float32)
    except Exception as exc:  # noqa: BLE001
        return CheckResult("background-removal", "alpha-refinement", False, str(exc))
    if alpha.shape != req.mask.shape:
        return CheckResult("background-removal", "alpha-refinement", False,
                           "alpha dimensions differ from the image")
    slack = 1.0 / 255.0
    grows = alpha > image.pixels[:, :, 3] + slack
    ok = not bool(grows.any())
    return CheckResult("background-removal", "alpha-refinement", ok,
                       "alpha never exceeds the input alpha" if ok
                       else f"{int(grows.sum())} pixels gained alpha")


def check_image_distance(imagedist) -> CheckResult:
    rng = np.random.default_rng(3)
    a = rng.random((64, 64, 4)).astype(np.float32)
    a[:, :, 3] = 1.0
    b = a.copy()
    b[:32] = 1.0 - b[:32]
    try:
        d_same = float(imagedist.distance(a, a))
        d_diff = float(imagedist.distance(a, b))
    except Exception as exc:  # noqa: BLE001
        return CheckResult("image-distance", "metric-sanity", False, str(exc))
    ok = d_same <= 1e-4 and d_diff > d_same
    return CheckResult("image-distance", "metric-sanity", ok,
                       f"d(a,a)={d_same:.6f}, d(a,b)={d_diff:.6f}")


def check_prompt_expander(expander) -> CheckResult:
    try:
        spec = expander.expand("conformance harbor", 2, 2)
    except Exception as exc:  # noqa: BLE001
        return CheckResult("prompt-expander", "schema-validity", False, str(exc))
    ok = spec.width == 2 and spec.height == 2 and len(spec.tiles) == 4
    return CheckResult("prompt-expander", "schema-validity", ok,
                       f"{spec.width}x{spec.height} spec with {len(spec.tiles)} tiles")


def run_conformance(endpoints, base_url: str | None = None,
                    roles: tuple[str, ...] | None = None) -> list[CheckResult]:
    """Run every applicable check; survives per-check failures."""
    checks = []
    include = lambda role: roles is None or role in roles
    checks.append(check_version_handshake(base_url))
    if include("inpainter-2d"):
        checks.append(check_inpaint_outside_mask(endpoints.inpainter))
    if include("image-to-3d"):
        checks.append(check_image3d_shapes(endpoints.image3d))
    if include("background-removal"):
        checks.append(check_background_removal(endpoints.background))
    if include("image-distance"):
        checks.append(check_image_distance(endpoints.imagedist))
    if include("prompt-expander"):
        checks.append(check_prompt_expander(endpoints.expander))
    return checks
