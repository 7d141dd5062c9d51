"""Deterministic procedural mocks for every generator role.

The mock world model turns (prompt, tile, seed) into a small colored voxel
scene: a ground layer plus a handful of boxes with an off-center landmark,
all drawn from a fixed saturated palette.  The mock inpainter rasterizes the
scene into the masked region of the request; the mock image-to-3D endpoint
re-derives the same scene from provenance and emits exact splats, occupancy
and latents in a generator frame with an extended base, a seed-dependent
vertical offset and (optionally) a quarter-turn fault, so the engine's
post-processing has real work to do.  Fault flags produce tiles that fail
validation, for exercising the retry loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tileworld.framing2d import InpaintRequest, ProvenanceMatte, TileImagePrompt
from tileworld.genproto.interfaces import EndpointSet, Image3DResult
from tileworld.imagedist import StructuralImageDistance
from tileworld.isorender import FramedImage, render_splats
from tileworld.latentops import NoiseSchedule, SparseLatentVolume, VolumeFrame
from tileworld.occupancy import OccupancyVolume
from tileworld.seeding import derive_seed, rng_for
from tileworld.splats import SplatSet
from tileworld.worldspec import PLACEHOLDER, TilePrompt, WorldSpec

# Saturated palette; every entry sits far (>= 0.55) from mid-gray in RGB.
PALETTE = np.array([
    (0.90, 0.10, 0.10),   # red
    (0.10, 0.75, 0.15),   # green
    (0.15, 0.25, 0.95),   # blue
    (0.95, 0.85, 0.05),   # yellow
    (0.90, 0.15, 0.85),   # magenta
    (0.05, 0.85, 0.90),   # cyan
    (0.98, 0.55, 0.02),   # orange
    (0.45, 0.05, 0.90),   # violet
], dtype=np.float32)

_THEME_NOUNS = ("plaza", "workshop", "garden", "tower", "canal", "market",
                "orchard", "forge", "library", "stable", "fountain", "granary")
_THEME_DETAILS = ("with cobbled paths", "under paper lanterns", "beside a low wall",
                  "with climbing ivy", "wrapped in morning mist", "with banners flying")
_STYLE_WORDS = ("warm light", "cool dusk", "bright noon", "amber sunset")


@dataclass(frozen=True)
class MockFaults:
    """Seeds for which the mock 3D generator emits a defective tile."""

    broken_border_seeds: frozenset = frozenset()
    off_square_seeds: frozenset = frozenset()
    margin_overflow_seeds: frozenset = frozenset()


@dataclass(frozen=True)
class MockConfig:
    content_res: int = 16
    latent_res: int = 64
    channels: int = 8
    slab_margin: float = 0.1         # rebase margin per side, tile units
    slab_thickness: float = 0.08     # tile units
    slab_gray: float = 128 / 255.0
    slab_splat_pitch: int = 28       # slab sheet resolution in the generator frame
    rotation_faults: bool = True
    faults: MockFaults = MockFaults()

    @property
    def margin_frac(self) -> float:
        # Rebase margin re-expressed in the generator frame, where the
        # extended slab spans the full unit footprint.
        return self.slab_margin / (1.0 + 2.0 * self.slab_margin)

    @property
    def thickness_frac(self) -> float:
        return self.slab_thickness / (1.0 + 2.0 * self.slab_margin)


@dataclass
class MockTileScene:
    """Colored voxel content of one tile, in tile-local units (ground at z=0)."""

    content_res: int
    occupied: np.ndarray    # (c, c, c) bool
    colors: np.ndarray      # (c, c, c, 3) float32
    ground_color: np.ndarray

    def splats(self, slot=(0, 0)) -> SplatSet:
        """One gaussian per occupied voxel, placed at the given grid slot."""
        c = self.content_res
        pitch = 1.0 / c
        idx = np.argwhere(self.occupied)
        centers = (idx + 0.5) * pitch
        centers[:, 0] += slot[0]
        centers[:, 1] += slot[1]
        n = len(idx)
        scales = np.full((n, 3), pitch * 0.35, dtype=np.float32)
        rot = np.zeros((n, 4), dtype=np.float32)
        rot[:, 0] = 1.0
        colors = self.colors[idx[:, 0], idx[:, 1], idx[:, 2]]
        return SplatSet(centers.astype(np.float32), scales, rot,
                        np.ones(n, dtype=np.float32), colors)


class MockWorldModel:
    """Seeded procedural scenes; identical inputs always yield identical scenes."""

    def __init__(self, master_seed: int = 0, config: MockConfig = MockConfig()):
        self.master_seed = int(master_seed)
        self.config = config

    def scene(self, prompt: str, tile, scene_seed: int) -> MockTileScene:
        c = self.config.content_res
        rng = rng_for(self.master_seed, "scene", prompt, (int(tile[0]), int(tile[1])),
                      int(scene_seed))
        occupied = np.zeros((c, c, c), dtype=bool)
        colors = np.zeros((c, c, c, 3), dtype=np.float32)

        ground = PALETTE[int(rng.integers(len(PALETTE)))]
        occupied[:, :, 0] = True
        colors[:, :, 0] = ground

        # Boxes stay one voxel inside the content edge so the outermost
        # content column is always pure ground color (crisp cut transitions),
        # and the first box is an off-center landmark to break symmetry.
        max_h = max(2, int(c * 0.55))
        n_boxes = 3 + int(rng.integers(3))
        for b in range(n_boxes):
            w = int(rng.integers(2, max(3, c // 3)))
            d = int(rng.integers(2, max(3, c // 3)))
            h = int(rng.integers(2, max_h))
            if b == 0:
                x0, y0 = 1, 1  # landmark pinned to a corner quadrant
            else:
                x0 = int(rng.integers(1, c - 1 - w))
                y0 = int(rng.integers(1, c - 1 - d))
            color = PALETTE[int(rng.integers(len(PALETTE)))]
            occupied[x0:x0 + w, y0:y0 + d, 1:1 + h] = True
            colors[x0:x0 + w, y0:y0 + d, 1:1 + h] = color
        return MockTileScene(content_res=c, occupied=occupied, colors=colors,
                             ground_color=np.asarray(ground, dtype=np.float32))


def _ring_coords(sl: np.ndarray) -> np.ndarray:
    """Perimeter ring of the bounding box of a 2D slice, lexicographic order."""
    us = np.flatnonzero(sl.any(axis=1))
    vs = np.flatnonzero(sl.any(axis=0))
    u0, u1, v0, v1 = us[0], us[-1], vs[0], vs[-1]
    cells = [(u, v) for u in range(u0, u1 + 1) for v in range(v0, v1 + 1)
             if u in (u0, u1) or v in (v0, v1)]
    return np.array(cells, dtype=np.int64)


class MockEndpoints:
    """All six generator roles backed by one procedural world model."""

    def __init__(self, model: MockWorldModel | None = None,
                 config: MockConfig | None = None, master_seed: int = 0):
        self.config = config or (model.config if model else MockConfig())
        self.model = model or MockWorldModel(master_seed, self.config)
        self.background = ProvenanceMatte()
        self.imagedist = StructuralImageDistance()

    def as_endpoint_set(self) -> EndpointSet:
        return EndpointSet(expander=self, inpainter=self, image3d=self,
                           denoiser=MockLatentDenoiser(),
                           background=self.background, imagedist=self.imagedist)

    # -- prompt expander ----------------------------------------------------

    def expand(self, seed_prompt: str, width: int, height: int) -> WorldSpec:
        if width < 1 or height < 1:
            raise ValueError("grid dimensions must be >= 1")
        rng = rng_for(self.model.master_seed, "expand", seed_prompt)
        style = _STYLE_WORDS[int(rng.integers(len(_STYLE_WORDS)))]
        tiles = []
        for y in range(height):
            for x in range(width):
                noun = _THEME_NOUNS[int(rng.integers(len(_THEME_NOUNS)))]
                detail = _THEME_DETAILS[int(rng.integers(len(_THEME_DETAILS)))]
                tiles.append(TilePrompt(x=x, y=y, prompt=f"{noun} {detail}"))
        global_style = f"{PLACEHOLDER}, {seed_prompt}, {style}, isometric view"
        return WorldSpec(width=width, height=height, tiles=tuple(tiles),
                         global_style=global_style)

    # -- 2D inpainter --------------------------------------------------------

    def inpaint(self, request: InpaintRequest) -> FramedImage:
        if request.provenance.get("seam"):
            content = self._seam_content(request)
        else:
            target = tuple(request.provenance["target"])
            scene = self.model.scene(request.prompt, target, request.seed)
            content = render_splats(scene.splats(slot=target), request.base.camera)

        out = request.base.pixels.copy()
        m = request.mask
        fg = content.pixels[m]
        fa = fg[:, 3:4]
        ba = out[m][:, 3:4]
        out_a = fa + ba * (1 - fa)
        blended = fg[:, :3] * fa + out[m][:, :3] * ba * (1 - fa)
        region = out[m]
        region[:, :3] = np.where(out_a > 1e-6, blended / np.maximum(out_a, 1e-6), 0.0)
        region[:, 3:4] = out_a
        out[m] = region

        gt_alpha = np.where(m, content.pixels[:, :, 3], 0.0).astype(np.float32)
        prov = dict(request.provenance)
        prov.update({"prompt": request.prompt, "scene_seed": request.seed,
                     "matte_alpha": gt_alpha})
        return FramedImage(pixels=out, mask=m, camera=request.base.camera,
                           kind="inpaint-result", provenance=prov)

    def _seam_content(self, request: InpaintRequest) -> FramedImage:
        """Pair render with colors cross-faded toward the shared mean near the
        seam, which is what a well-blended boundary looks like for the mock."""
        prov = request.provenance
        (ax, ay), (bx, by) = (tuple(prov["pair"][0]), tuple(prov["pair"][1]))
        prompts = prov["prompts"]
        seeds = prov["scene_seeds"]
        band = float(prov.get("band_width", 0.25))
        axis = 0 if ay == by else 1
        seam = (max(ax, bx)) if axis == 0 else (max(ay, by))

        pieces = []
        scenes = [self.model.scene(prompts[0], (ax, ay), seeds[0]),
                  self.model.scene(prompts[1], (bx, by), seeds[1])]
        edge_mean = np.mean([s.ground_color for s in scenes], axis=0)
        for scene, slot in zip(scenes, [(ax, ay), (bx, by)]):
            splats = scene.splats(slot=slot)
            dist = np.abs(splats.centers[:, axis] - seam)
            lam = 0.5 * np.clip(1.0 - dist / band, 0.0, 1.0)[:, None]
            splats.colors = ((1 - lam) * splats.colors + lam * edge_mean).astype(np.float32)
            pieces.append(splats)
        return render_splats(SplatSet.concat(pieces), request.base.camera)

    # -- image-to-3D ----------------------------------------------------------

    def generate(self, prompt_image: TileImagePrompt, seed: int) -> Image3DResult:
        prov = prompt_image.provenance
        target = tuple(prov["target"])
        scene = self.model.scene(prov["prompt"], target, prov["scene_seed"])
        cfg = self.config
        r = cfg.latent_res
        c = cfg.content_res
        m_hat = cfg.margin_frac
        sigma = 1.0 - 2.0 * m_hat
        t_frac = cfg.thickness_frac
        slab_rows = max(1, round(t_frac * r))

        # Vertical centering jitter, quantized to the voxel grid.
        w_top = slab_rows + 1 + int(derive_seed(seed, "voff") % 10)
        v_off = w_top / r

        overflow = 2.0 / r if seed in cfg.faults.margin_overflow_seeds else 0.0

        # Occupancy + per-cell colors in the generator frame.
        occ = np.zeros((r, r, r), dtype=bool)
        colors = np.zeros((r, r, r, 3), dtype=np.float32)
        occ[:, :, w_top - slab_rows:w_top] = True
        colors[:, :, w_top - slab_rows:w_top] = cfg.slab_gray
        centers = (np.arange(r) + 0.5) / r
        iu = np.floor((centers - m_hat - overflow) * c / sigma).astype(int)
        iv = np.floor((centers - m_hat) * c / sigma).astype(int)
        iw = np.floor((centers - v_off) * c / sigma).astype(int)
        valid_u = (iu >= 0) & (iu < c)
        valid_v = (iv >= 0) & (iv < c)
        valid_w = (iw >= 0) & (iw < c)
        uu, vv, ww = np.meshgrid(np.arange(r), np.arange(r), np.arange(r), indexing="ij")
        vmask = valid_u[uu] & valid_v[vv] & valid_w[ww]
        su = np.clip(iu, 0, c - 1)[uu]
        sv = np.clip(iv, 0, c - 1)[vv]
        sw = np.clip(iw, 0, c - 1)[ww]
        content = vmask & scene.occupied[su, sv, sw]
        occ[content] = True
        colors[content] = scene.colors[su[content], sv[content], sw[content]]

        # Splats: slab sheet across the full frame plus scaled scene content.
        slab = self._slab_sheet(v_off)
        content_splats = scene.splats(slot=(0, 0)).scaled(sigma, origin=(0, 0, 0))
        content_splats = content_splats.translated((m_hat + overflow, m_hat, v_off))
        splats = SplatSet.concat([slab, content_splats])

        k_fault = int(derive_seed(seed, "rot") % 4) if cfg.rotation_faults else 0
        if seed in cfg.faults.off_square_seeds:
            occ[r - 4:, :, :] = False
        if seed in cfg.faults.broken_border_seeds:
            w_star = int(np.argmax([
                _slice_area(occ[:, :, w]) for w in range(r)]))
            ring = _ring_coords(occ[:, :, w_star])
            drop = ring[::4]
            occ[drop[:, 0], drop[:, 1], w_star] = False

        if k_fault:
            for _ in range(k_fault):
                occ = occ[::-1, :, :].transpose(1, 0, 2)
                colors = colors[::-1, :, :].transpose(1, 0, 2, 3)
            occ = np.ascontiguousarray(occ)
            colors = np.ascontiguousarray(colors)
            splats = splats.rotated_quarter(k_fault, center_xy=(0.5, 0.5))

        cells = np.argwhere(occ).astype(np.int32)
        feats = np.zeros((len(cells), cfg.channels), dtype=np.float32)
        feats[:, :3] = colors[cells[:, 0], cells[:, 1], cells[:, 2]]
        latents = SparseLatentVolume(shape=(r, r, r), coords=cells, features=feats,
                                     occupancy=occ, frame=VolumeFrame())
        return Image3DResult(
            splats=splats, occupancy=OccupancyVolume(occ), latents=latents,
            seed=int(seed),
            provenance={"target": list(target), "k_fault": k_fault,
                        "m_hat": m_hat, "sigma": sigma, "v_off": v_off,
                        "slab_rows": slab_rows})

    def _slab_sheet(self, top_z: float) -> SplatSet:
        cfg = self.config
        p = cfg.slab_splat_pitch
        pitch = 1.0 / p
        xs = (np.arange(p) + 0.5) * pitch
        gx, gy = np.meshgrid(xs, xs, indexing="ij")
        n = p * p
        centers = np.stack([gx.ravel(), gy.ravel(),
                            np.full(n, top_z - cfg.thickness_frac / 2.0)], axis=1)
        scales = np.full((n, 3), pitch * 0.35, dtype=np.float32)
        scales[:, 2] = cfg.thickness_frac * 0.3
        rot = np.zeros((n, 4), dtype=np.float32)
        rot[:, 0] = 1.0
        colors = np.full((n, 3), cfg.slab_gray, dtype=np.float32)
        return SplatSet(centers.astype(np.float32), scales, rot,
                        np.ones(n, dtype=np.float32), colors)


def _surface_cells(volume: SparseLatentVolume) -> np.ndarray:
    """Mask of cells with at least one empty 6-neighbour (interior cells are
    invisible and skipped when decoding to splats)."""
    padded = np.pad(volume.occupancy, 1)
    enclosed = (padded[2:, 1:-1, 1:-1] & padded[:-2, 1:-1, 1:-1]
                & padded[1:-1, 2:, 1:-1] & padded[1:-1, :-2, 1:-1]
                & padded[1:-1, 1:-1, 2:] & padded[1:-1, 1:-1, :-2])
    c = volume.coords
    return ~enclosed[c[:, 0], c[:, 1], c[:, 2]]


def _slice_area(sl: np.ndarray) -> int:
    us = np.flatnonzero(sl.any(axis=1))
    vs = np.flatnonzero(sl.any(axis=0))
    if us.size == 0:
        return 0
    return int((us[-1] - us[0] + 1) * (vs[-1] - vs[0] + 1))


class MockLatentDenoiser:
    """Linear denoiser: each step pulls features toward per-voxel targets
    sampled from the conditioning views (z-buffer visibility, rates balanced
    so the mean across views converges exactly to the visibility-weighted
    sample mean; voxels seen by no view converge to the reference features,
    or zero when none are given)."""

    def make_handle(self, views, volume: SparseLatentVolume,
                    reference: np.ndarray | None = None) -> "_MockDenoiserHandle":
        return _MockDenoiserHandle(list(views), volume, reference)

    def decode(self, volume: SparseLatentVolume) -> SplatSet:
        surface = _surface_cells(volume)
        centers = volume.frame.voxel_centers(volume.coords[surface], volume.shape)
        size = volume.frame.voxel_size(volume.shape)
        n = len(centers)
        scales = np.tile((size * 0.4).astype(np.float32), (n, 1))
        rot = np.zeros((n, 4), dtype=np.float32)
        rot[:, 0] = 1.0
        colors = np.clip(volume.features[surface, :3], 0.0, 1.0)
        return SplatSet(centers.astype(np.float32), scales, rot,
                        np.ones(n, dtype=np.float32), colors)


class _MockDenoiserHandle:
    def __init__(self, views, volume: SparseLatentVolume,
                 reference: np.ndarray | None):
        if not views:
            raise ValueError("denoiser handle needs at least one conditioning view")
        self.views = views
        d = volume.channels
        n = volume.cell_count
        centers = volume.frame.voxel_centers(volume.coords, volume.shape)
        self.visible: list[np.ndarray] = []
        self.targets: list[np.ndarray] = []
        counts = np.zeros(n, dtype=np.int64)
        for view in views:
            cam = view.camera
            px, py, depth = cam.project(centers)
            ix = np.floor(px).astype(int)
            iy = np.floor(py).astype(int)
            h, w = view.pixels.shape[:2]
            in_frame = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
            visible = np.zeros(n, dtype=bool)
            if in_frame.any():
                pid = iy[in_frame] * w + ix[in_frame]
                order = np.argsort(depth[in_frame], kind="stable")
                pid_sorted = pid[order]
                _, first = np.unique(pid_sorted, return_index=True)
                nearest = np.flatnonzero(in_frame)[order[first]]
                visible[nearest] = True
                alpha = np.zeros(n, dtype=np.float32)
                alpha[in_frame] = view.pixels[iy[in_frame], ix[in_frame], 3]
                visible &= alpha > 0.5
            target = np.zeros((n, d), dtype=np.float32)
            if visible.any():
                nc = min(3, d)
                target[visible, :nc] = view.pixels[iy[visible], ix[visible], :nc]
            self.visible.append(visible)
            self.targets.append(target)
            counts += visible
        self.counts = counts
        if reference is None:
            self.fallback = np.zeros((n, d), dtype=np.float32)
        else:
            self.fallback = np.asarray(reference, dtype=np.float32).reshape(n, d)

    @property
    def num_views(self) -> int:
        return len(self.views)

    def step(self, features: np.ndarray, t: int, schedule: NoiseSchedule,
             view: int) -> np.ndarray:
        rate = np.float32(1.0 / (schedule.steps - t))
        vis = self.visible[view]
        weight = np.where(vis, self.num_views / np.maximum(self.counts, 1), 0.0)
        out = features + rate * weight[:, None].astype(np.float32) * (
            self.targets[view] - features)
        never = self.counts == 0
        if never.any():
            out[never] = features[never] + rate * (self.fallback[never] - features[never])
        return out.astype(np.float32)


class TamperingInpainter:
    """Conformance test double: proxies a real inpainter, then corrupts one
    pixel outside the mask (a protocol violation detectors must catch)."""

    def __init__(self, inner):
        self.inner = inner

    def inpaint(self, request: InpaintRequest) -> FramedImage:
        result = self.inner.inpaint(request)
        outside = np.argwhere(~request.mask)
        if len(outside):
            y, x = outside[0]
            pixels = result.pixels.copy()
            pixels[y, x] = np.float32([1.0, 0.0, 0.0, 1.0])
            result = FramedImage(pixels=pixels, mask=result.mask, camera=result.camera,
                                 kind=result.kind, provenance=result.provenance)
        return result


def mock_endpoint_set(master_seed: int = 0, config: MockConfig | None = None) -> EndpointSet:
    """EndpointSet with every role served by the bundled mocks."""
    cfg = config or MockConfig()
    return MockEndpoints(MockWorldModel(master_seed, cfg), cfg).as_endpoint_set()
