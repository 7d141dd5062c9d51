"""Build orchestration: the per-tile generate/validate/retry loop, placement,
pairwise latent blending, assembly, metrics, and checkpoint/resume.

Tiles are generated strictly in build order.  Each tile runs through:
inpaint request -> 2D inpaint -> foreground extraction -> rebase -> 3D
generation (retrying with seed+1 while validation rejects) -> cut detection
-> unit-footprint normalization -> ground alignment -> reorientation ->
placement.  A newly placed tile is then blended with its west neighbour and
its north neighbour in latent space.  Checkpoints make interrupted builds
resume bit-identically.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from tileworld.config import RunConfig
from tileworld.framing2d import build_inpaint_request, extract_foreground, rebase, InpaintRequest
from tileworld.genproto.interfaces import EndpointSet, Image3DResult, check_inpaint_contract
from tileworld.isorender import IsometricCamera, box_coverage, render_scene, render_splats
from tileworld.latentops import (
    NoiseSchedule,
    SparseLatentVolume,
    VolumeFrame,
    band_mask,
    blend_band,
    crop_latents,
    load_slat,
    rotate_quarter_z,
    save_slat,
    stitch,
    upsample_latents,
)
from tileworld.occupancy import OccupancyVolume, ValidationReport, load_occv, save_occv, validate_tile
from tileworld.seeding import derive_seed
from tileworld.splatpost import TileTransform, detect_cuts, ground_height, normalize_tile, reorient
from tileworld.splats import SplatSet, load_ply, save_ply
from tileworld.worldspec import Coord, WorldSpec, build_order, serialize_world_spec, parse_world_spec

CHECKPOINT_DIR = "checkpoint"
SEED_SPACE = 2 ** 32


class BuildError(RuntimeError):
    """A tile exhausted its retry budget; carries its validation reports."""

    def __init__(self, tile: Coord, reports: list[ValidationReport]):
        reasons = [r.reject_reasons for r in reports]
        super().__init__(f"tile {tile} failed validation after {len(reports)} attempts: {reasons}")
        self.tile = tile
        self.reports = reports


@dataclass
class PlacedTile:
    coord: Coord
    splats: SplatSet                  # world frame, post placement and blending
    occupancy: OccupancyVolume
    latents: SparseLatentVolume       # generator-frame cells, world-mapped frame
    transform: TileTransform
    prompt: str
    seed: int                         # accepted 3D generation seed
    scene_seed: int                   # 2D inpainting seed
    attempts: int
    validation: ValidationReport
    all_reports: list[ValidationReport] = field(default_factory=list)


@dataclass
class WorldGrid:
    spec: WorldSpec
    tiles: dict[Coord, PlacedTile] = field(default_factory=dict)
    cursor: int = 0
    blend_log: list[dict] = field(default_factory=list)

    def placed_splats(self) -> dict[Coord, SplatSet]:
        return {coord: tile.splats for coord, tile in self.tiles.items()}

    def complete(self) -> bool:
        return self.cursor >= self.spec.width * self.spec.height


@dataclass
class MetricsSummary:
    base_area: float
    squareness: float
    completeness: float
    tiles: int

    def to_json(self) -> dict:
        return {"base_area": self.base_area, "squareness": self.squareness,
                "completeness": self.completeness, "tiles": self.tiles}


@dataclass
class BuildReport:
    tiles: list[dict] = field(default_factory=list)
    blend_pairs: list[dict] = field(default_factory=list)
    metrics: MetricsSummary | None = None
    timings: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    master_seed: int = 0
    interrupted: bool = False

    def to_json(self) -> dict:
        return {
            "tiles": self.tiles,
            "blend_pairs": self.blend_pairs,
            "metrics": self.metrics.to_json() if self.metrics else None,
            "timings": self.timings,
            "config": self.config,
            "master_seed": self.master_seed,
            "interrupted": self.interrupted,
        }


def tile_base_seed(master_seed: int, ordinal: int) -> int:
    return derive_seed(master_seed, "tile", ordinal) % SEED_SPACE


def world_frame_for(transform: TileTransform, slot: Coord) -> VolumeFrame:
    """World-space frame of a tile's generator-frame latent grid."""
    k = transform.rotation_k % 4
    c = np.array([0.5, 0.5, 0.0])
    cos_s = [1.0, 0.0, -1.0, 0.0][k]
    sin_s = [0.0, 1.0, 0.0, -1.0][k]
    rot = np.array([[cos_s, -sin_s, 0.0], [sin_s, cos_s, 0.0], [0.0, 0.0, 1.0]])
    a = rot * transform.scale
    t = rot @ (np.asarray(transform.translation) - c) + c + np.array([slot[0], slot[1], 0.0])
    return VolumeFrame().transformed(a, t)


def compute_metrics(reports: list[ValidationReport]) -> MetricsSummary:
    """Arithmetic means of the per-tile geometry metrics."""
    if not reports:
        raise ValueError("no validation reports to summarize")
    return MetricsSummary(
        base_area=float(np.mean([r.base_area for r in reports])),
        squareness=float(np.mean([r.squareness for r in reports])),
        completeness=float(np.mean([r.completeness for r in reports])),
        tiles=len(reports),
    )


def _generate_tile(grid: WorldGrid, target: Coord, ordinal: int,
                   endpoints: EndpointSet, cfg: RunConfig,
                   camera: IsometricCamera) -> PlacedTile:
    framing = cfg.framing()
    base_seed = tile_base_seed(cfg.master_seed, ordinal)
    request = build_inpaint_request(grid.spec, target, grid.placed_splats(),
                                    camera, base_seed, framing)
    painted = endpoints.inpainter.inpaint(request)
    check_inpaint_contract(request, painted)
    foreground = extract_foreground(painted, request.mask, endpoints.background)
    prompt_image = rebase(foreground, camera, framing)

    reports: list[ValidationReport] = []
    result: Image3DResult | None = None
    for attempt in range(cfg.retries):
        seed = (base_seed + attempt) % SEED_SPACE
        candidate = endpoints.image3d.generate(prompt_image, seed)
        report = validate_tile(candidate.occupancy, cfg.alpha, cfg.beta)
        reports.append(report)
        if report.accepted:
            result = candidate
            break
    if result is None:
        raise BuildError(target, reports)

    cuts = detect_cuts(result.splats, tau=cfg.tau, delta=cfg.delta,
                       fallback_margin=cfg.slab_margin / (1 + 2 * cfg.slab_margin))
    normalized, transform = normalize_tile(result.splats, cuts)
    ground = ground_height(normalized)
    normalized = normalized.translated((0.0, 0.0, -ground))
    transform = replace(transform, ground_height=float(ground),
                        translation=transform.translation - np.array([0.0, 0.0, ground]))
    k = reorient(normalized, foreground.pixels, camera,
                 endpoints.imagedist.distance)
    normalized = normalized.rotated_quarter(k, (0.5, 0.5))
    transform = replace(transform, rotation_k=k)

    world_splats = normalized.translated((target[0], target[1], 0.0)).with_quantized_colors()
    latents = result.latents
    latents.frame = world_frame_for(transform, target)
    return PlacedTile(coord=target, splats=world_splats, occupancy=result.occupancy,
                      latents=latents, transform=transform, prompt=request.prompt,
                      seed=result.seed, scene_seed=base_seed,
                      attempts=len(reports), validation=reports[-1],
                      all_reports=reports)


def _tile_views(tile: PlacedTile, camera: IsometricCamera, n_views: int) -> list:
    center = (tile.coord[0] + 0.5, tile.coord[1] + 0.5, 0.25)
    views = []
    for i in range(n_views):
        cam = replace(camera, azimuth_deg=camera.azimuth_deg + 90.0 * i).aimed_at(center)
        views.append(render_splats(tile.splats, cam))
    return views


def _world_aligned(volume: SparseLatentVolume) -> SparseLatentVolume:
    """Rotate a volume in index space until its index axes point along the
    world +x/+y axes (undoing the tile's quarter-turn in latent space)."""
    for k in range(4):
        candidate = rotate_quarter_z(volume, k) if k else volume
        m = candidate.frame.matrix()
        if m[0, 0] > 1e-9 and m[1, 1] > 1e-9:
            return candidate
    raise ValueError("volume frame is not axis-aligned")


def _align_vertical(volume: SparseLatentVolume, reference: SparseLatentVolume
                    ) -> SparseLatentVolume:
    """Re-index cells along w so the volume shares the reference's vertical
    placement (rounded to whole voxels; exact when grounds differ by a voxel
    multiple).  Cells shifted outside the grid are dropped."""
    r = volume.shape[2]
    az_ref = reference.frame.matrix()[2, 2]
    dz = volume.frame.origin[2] - reference.frame.origin[2]
    dw = round(r * dz / az_ref) if az_ref else 0
    if dw == 0:
        return volume
    coords = volume.coords.copy()
    coords[:, 2] += dw
    keep = (coords[:, 2] >= 0) & (coords[:, 2] < r)
    coords = coords[keep]
    occ = np.zeros(volume.shape, dtype=bool)
    occ[coords[:, 0], coords[:, 1], coords[:, 2]] = True
    m = volume.frame.matrix()
    origin = np.asarray(volume.frame.origin, dtype=np.float64) - m[:, 2] * (dw / r)
    frame = VolumeFrame(origin=tuple(origin.tolist()),
                        axes=volume.frame.axes)
    return SparseLatentVolume(shape=volume.shape, coords=coords,
                              features=volume.features[keep], occupancy=occ,
                              frame=frame)


def blend_pair(grid: WorldGrid, a: Coord, b: Coord, endpoints: EndpointSet,
               cfg: RunConfig, camera: IsometricCamera | None = None) -> dict:
    """Blend the seam between two placed, 4-adjacent tiles.

    Renders the abutting pair, inpaints the seam strip, re-denoises the
    stitched latent band conditioned on that view, decodes the band back to
    splats and swaps them into both tiles.  A decode failure logs a skipped
    blend and leaves the tiles unchanged.
    """
    a, b = tuple(a), tuple(b)
    if a not in grid.tiles or b not in grid.tiles:
        raise ValueError(f"both tiles of pair {a}/{b} must be placed")
    if (a[1], a[0]) > (b[1], b[0]):
        a, b = b, a
    dx, dy = b[0] - a[0], b[1] - a[1]
    if (dx, dy) == (1, 0):
        orientation = "ew"
    elif (dx, dy) == (0, 1):
        orientation = "ns"
    else:
        raise ValueError(f"tiles {a} and {b} are not 4-adjacent")
    camera = camera or cfg.camera.build()
    tile_a, tile_b = grid.tiles[a], grid.tiles[b]

    band_frac = cfg.band_r / cfg.latent_res
    if orientation == "ew":
        seam_center = (float(b[0]), a[1] + 0.5, 0.25)
        lo = (b[0] - band_frac, a[1], 0.0)
        hi = (b[0] + band_frac, a[1] + 1.0, cfg.cube_height)
    else:
        seam_center = (a[0] + 0.5, float(b[1]), 0.25)
        lo = (a[0], b[1] - band_frac, 0.0)
        hi = (a[0] + 1.0, b[1] + band_frac, cfg.cube_height)
    cam = camera.aimed_at(seam_center)
    strip = box_coverage(cam, lo, hi)
    pair_view = render_scene(SplatSet.concat([tile_a.splats, tile_b.splats]), cam,
                             kind="seam-view", mask=strip)
    seam_seed = derive_seed(cfg.master_seed, "seam", a, b) % SEED_SPACE
    seam_request = InpaintRequest(
        base=pair_view, mask=strip,
        prompt=f"seamless transition between {tile_a.prompt} and {tile_b.prompt}",
        seed=seam_seed,
        provenance={"seam": True, "pair": [list(a), list(b)],
                    "prompts": [tile_a.prompt, tile_b.prompt],
                    "scene_seeds": [tile_a.scene_seed, tile_b.scene_seed],
                    "band_width": band_frac})
    seam_view = endpoints.inpainter.inpaint(seam_request)
    check_inpaint_contract(seam_request, seam_view)

    entry = {"pair": [list(a), list(b)], "orientation": orientation, "skipped": False}
    try:
        upsampled = []
        for tile in (tile_a, tile_b):
            cropped = crop_latents(tile.latents, tile.transform.crop)
            views = _tile_views(tile, camera, cfg.upsample_views)
            schedule = NoiseSchedule.linear(
                cfg.schedule_steps,
                seed=derive_seed(cfg.master_seed, "upsample", tile.coord) % SEED_SPACE)
            upsampled.append(upsample_latents(cropped, views, endpoints.denoiser,
                                              schedule, out_resolution=cfg.latent_res))
        ua, ub = (_world_aligned(v) for v in upsampled)
        ub = _align_vertical(ub, ua)
        stitched = stitch(ua, ub, orientation)
        handle = endpoints.denoiser.make_handle(
            [seam_view], stitched, reference=stitched.features.copy())
        blend_schedule = NoiseSchedule.linear(
            cfg.schedule_steps, seed=derive_seed(cfg.master_seed, "blend", a, b) % SEED_SPACE)
        blended = blend_band(stitched, cfg.band_r, handle, blend_schedule)
        decoded = endpoints.denoiser.decode(
            blended.select(band_mask(blended, cfg.band_r))).with_quantized_colors()
    except Exception as exc:  # noqa: BLE001 - blend failures leave the world unblended
        entry.update({"skipped": True, "reason": f"{type(exc).__name__}: {exc}"})
        grid.blend_log.append(entry)
        return entry

    # Swap the band region: remove original splats inside the band box and
    # hand each decoded splat to the tile on its side of the seam.
    frame = blended.frame
    r = cfg.latent_res
    fx_lo = (r // 2 - cfg.band_r) / r
    fx_hi = (r // 2 + cfg.band_r + 1) / r

    def in_band(splats: SplatSet) -> np.ndarray:
        if len(splats) == 0:
            return np.zeros(0, dtype=bool)
        frac = frame.world_to_fraction(splats.centers)
        return ((frac[:, 0] >= fx_lo) & (frac[:, 0] < fx_hi)
                & (frac[:, 1] >= 0.0) & (frac[:, 1] < 1.0)
                & (frac[:, 2] >= -0.25) & (frac[:, 2] < 1.25))

    decoded_frac = frame.world_to_fraction(decoded.centers)
    side_b = decoded_frac[:, 0] >= 0.5
    new_a = decoded.subset(~side_b)
    new_b = decoded.subset(side_b)
    tile_a.splats = SplatSet.concat([tile_a.splats.subset(~in_band(tile_a.splats)), new_a])
    tile_b.splats = SplatSet.concat([tile_b.splats.subset(~in_band(tile_b.splats)), new_b])
    entry["decoded_splats"] = int(len(decoded))
    grid.blend_log.append(entry)
    return entry


def assemble(grid: WorldGrid, cfg: RunConfig | None = None) -> SplatSet:
    """Union of all placed tiles, with the deep synthetic base culled
    (gaussians below ground minus one slab thickness are dropped)."""
    if not grid.complete():
        raise ValueError("cannot assemble an incomplete world")
    cfg = cfg or RunConfig()
    cull_z = -cfg.slab_thickness
    pieces = []
    for coord in build_order(grid.spec.width, grid.spec.height):
        splats = grid.tiles[coord].splats
        pieces.append(splats.subset(splats.centers[:, 2] >= cull_z))
    return SplatSet.concat(pieces)


# -- checkpointing -------------------------------------------------------------

def _tile_stem(coord: Coord) -> str:
    return f"tile_{coord[0]}_{coord[1]}"


def save_checkpoint(out_dir: str | Path, grid: WorldGrid, cfg: RunConfig,
                    dirty: set[Coord] | None = None) -> None:
    root = Path(out_dir) / CHECKPOINT_DIR
    tiles_dir = root / "tiles"
    tiles_dir.mkdir(parents=True, exist_ok=True)
    coords = dirty if dirty is not None else set(grid.tiles)
    for coord in coords:
        tile = grid.tiles[coord]
        save_ply(tile.splats, tiles_dir / f"{_tile_stem(coord)}.ply")
        save_occv(tile.occupancy, tiles_dir / f"{_tile_stem(coord)}.occv")
        save_slat(tile.latents, tiles_dir / f"{_tile_stem(coord)}.slat")
    state = {
        "version": 1,
        "cursor": grid.cursor,
        "master_seed": cfg.master_seed,
        "spec": json.loads(serialize_world_spec(grid.spec).decode("utf-8")),
        "blend_log": grid.blend_log,
        "tiles": [
            {
                "coord": list(coord),
                "prompt": t.prompt,
                "seed": t.seed,
                "scene_seed": t.scene_seed,
                "attempts": t.attempts,
                "transform": t.transform.to_json(),
                "validation": t.validation.to_json(),
                "all_reports": [r.to_json() for r in t.all_reports],
            }
            for coord, t in sorted(grid.tiles.items(), key=lambda kv: (kv[0][1], kv[0][0]))
        ],
    }
    tmp = root / "state.json.tmp"
    tmp.write_text(json.dumps(state, sort_keys=True, indent=1), encoding="utf-8")
    tmp.replace(root / "state.json")


def _report_from_json(doc: dict) -> ValidationReport:
    return ValidationReport(base_area=doc["base_area"], squareness=doc["squareness"],
                            completeness=doc["completeness"],
                            accepted=doc["verdict"] == "accept",
                            reject_reasons=list(doc["reject_reasons"]))


def load_checkpoint(out_dir: str | Path) -> tuple[WorldGrid, int] | None:
    root = Path(out_dir) / CHECKPOINT_DIR
    state_path = root / "state.json"
    if not state_path.exists():
        return None
    state = json.loads(state_path.read_text(encoding="utf-8"))
    spec = parse_world_spec(json.dumps(state["spec"]).encode("utf-8"))
    grid = WorldGrid(spec=spec, cursor=state["cursor"], blend_log=state["blend_log"])
    tiles_dir = root / "tiles"
    for doc in state["tiles"]:
        coord = tuple(doc["coord"])
        transform = TileTransform.from_json(doc["transform"])
        splats = load_ply(tiles_dir / f"{_tile_stem(coord)}.ply")
        occ = load_occv(tiles_dir / f"{_tile_stem(coord)}.occv")
        latents = load_slat(tiles_dir / f"{_tile_stem(coord)}.slat",
                            frame=world_frame_for(transform, coord))
        grid.tiles[coord] = PlacedTile(
            coord=coord, splats=splats, occupancy=occ, latents=latents,
            transform=transform, prompt=doc["prompt"], seed=doc["seed"],
            scene_seed=doc["scene_seed"], attempts=doc["attempts"],
            validation=_report_from_json(doc["validation"]),
            all_reports=[_report_from_json(r) for r in doc["all_reports"]])
    return grid, state["master_seed"]


# -- top-level build ------------------------------------------------------------

def build_world(spec: WorldSpec, endpoints: EndpointSet, cfg: RunConfig,
                out_dir: str | Path | None = None, resume: bool = False,
                stop_after: int | None = None) -> tuple[WorldGrid, BuildReport]:
    """Run the full build; optionally checkpoint to ``out_dir`` after every
    tile, resume from an existing checkpoint, or stop early (``stop_after``
    places that many tiles and marks the report interrupted)."""
    t_start = time.monotonic()
    camera = cfg.camera.build()
    order = build_order(spec.width, spec.height)

    grid: WorldGrid | None = None
    if resume:
        if out_dir is None:
            raise ValueError("resume requires an output directory")
        loaded = load_checkpoint(out_dir)
        if loaded is not None:
            grid, saved_seed = loaded
            if saved_seed != cfg.master_seed:
                raise ValueError(
                    f"checkpoint was built with master seed {saved_seed}, not {cfg.master_seed}")
            if grid.spec != spec:
                raise ValueError("checkpoint spec differs from the requested spec")
    if grid is None:
        grid = WorldGrid(spec=spec)

    report = BuildReport(config=cfg.to_json(), master_seed=cfg.master_seed)
    t_tiles = 0.0
    t_blend = 0.0
    for ordinal in range(grid.cursor, len(order)):
        if stop_after is not None and ordinal >= stop_after:
            report.interrupted = True
            break
        target = order[ordinal]
        t0 = time.monotonic()
        tile = _generate_tile(grid, target, ordinal, endpoints, cfg, camera)
        grid.tiles[target] = tile
        grid.cursor = ordinal + 1
        t_tiles += time.monotonic() - t0

        dirty = {target}
        if cfg.blend:
            t1 = time.monotonic()
            for neighbor in ((target[0] - 1, target[1]), (target[0], target[1] - 1)):
                if neighbor in grid.tiles:
                    blend_pair(grid, neighbor, target, endpoints, cfg, camera)
                    dirty.add(neighbor)
            t_blend += time.monotonic() - t1
        if out_dir is not None:
            save_checkpoint(out_dir, grid, cfg, dirty=dirty)

    for coord in order:
        if coord not in grid.tiles:
            continue
        tile = grid.tiles[coord]
        report.tiles.append({
            "x": coord[0], "y": coord[1],
            "prompt": tile.prompt,
            "seed": tile.seed,
            "scene_seed": tile.scene_seed,
            "attempts": tile.attempts,
            "transform": tile.transform.to_json(),
            "validation": tile.validation.to_json(),
        })
    report.blend_pairs = list(grid.blend_log)
    if report.tiles:
        report.metrics = compute_metrics([grid.tiles[tuple((d["x"], d["y"]))].validation
                                          for d in report.tiles])
    report.timings = {"total_s": time.monotonic() - t_start,
                      "tiles_s": t_tiles, "blend_s": t_blend}

    if out_dir is not None and grid.complete():
        export_world(out_dir, grid, report, cfg)
    return grid, report


def manifest_json(grid: WorldGrid, report: BuildReport) -> bytes:
    """Deterministic export manifest (no timings)."""
    doc = {
        "grid": {"width": grid.spec.width, "height": grid.spec.height},
        "global_prompt": grid.spec.global_style,
        "master_seed": report.master_seed,
        "config": report.config,
        "tiles": report.tiles,
        "blend_pairs": report.blend_pairs,
        "metrics": report.metrics.to_json() if report.metrics else None,
    }
    return json.dumps(doc, sort_keys=True, indent=1).encode("utf-8")


def export_world(out_dir: str | Path, grid: WorldGrid, report: BuildReport,
                 cfg: RunConfig) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = assemble(grid, cfg)
    ply_path = out / "world.ply"
    save_ply(world, ply_path)
    manifest_path = out / "manifest.json"
    manifest_path.write_bytes(manifest_json(grid, report))
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report.to_json(), sort_keys=True, indent=1),
                           encoding="utf-8")
    return {"world": ply_path, "manifest": manifest_path, "report": report_path}
