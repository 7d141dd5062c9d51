"""Tile-based 3D world assembly engine.

Builds explorable 3D worlds as a lattice of unit tiles: per-tile prompts are
expanded from a world description, each tile is generated as an isometric 2D
inpainting conditioned on the world built so far, lifted to 3D splats by an
image-to-3D generator, validated geometrically, post-processed to a unit
footprint, and fused with its neighbours in a sparse latent space.  All
neural generators live behind a wire protocol; bundled deterministic mocks
make the full pipeline runnable and verifiable offline.
"""

__version__ = "0.1.0"

from tileworld.worldspec import WorldSpec, TilePrompt, parse_world_spec, compose_prompt, build_order
from tileworld.splats import SplatSet
from tileworld.isorender import IsometricCamera, FramedImage
from tileworld.occupancy import OccupancyVolume, ValidationReport, validate_tile
from tileworld.latentops import SparseLatentVolume, NoiseSchedule

__all__ = [
    "WorldSpec",
    "TilePrompt",
    "parse_world_spec",
    "compose_prompt",
    "build_order",
    "SplatSet",
    "IsometricCamera",
    "FramedImage",
    "OccupancyVolume",
    "ValidationReport",
    "validate_tile",
    "SparseLatentVolume",
    "NoiseSchedule",
    "__version__",
]
