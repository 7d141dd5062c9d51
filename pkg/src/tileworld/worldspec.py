"""World specifications: per-tile prompts, the global style prompt, build order.

A world is a W x H lattice of unit tiles.  The JSON schema is a top-level
object with a "tiles" array of {"prompt", "x", "y"} records and a top-level
"prompt" holding the global style string, which must contain the literal
placeholder token ``{tile_prompt}`` exactly once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator

PLACEHOLDER = "{tile_prompt}"

Coord = tuple[int, int]


class SpecParseError(ValueError):
    """Malformed JSON; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class SpecSchemaError(ValueError):
    """Structurally valid JSON that violates the world-spec schema."""


@dataclass(frozen=True)
class TilePrompt:
    x: int
    y: int
    prompt: str

    def __post_init__(self):
        if not self.prompt.strip():
            raise SpecSchemaError(f"tile ({self.x}, {self.y}) has an empty prompt")


@dataclass(frozen=True)
class WorldSpec:
    width: int
    height: int
    tiles: tuple[TilePrompt, ...]
    global_style: str

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise SpecSchemaError("world dimensions must be positive")
        seen: dict[Coord, TilePrompt] = {}
        for t in self.tiles:
            if not (0 <= t.x < self.width and 0 <= t.y < self.height):
                raise SpecSchemaError(
                    f"tile ({t.x}, {t.y}) lies outside the {self.width}x{self.height} grid")
            if (t.x, t.y) in seen:
                raise SpecSchemaError(f"duplicate tile coordinate ({t.x}, {t.y})")
            seen[(t.x, t.y)] = t
        for yy in range(self.height):
            for xx in range(self.width):
                if (xx, yy) not in seen:
                    raise SpecSchemaError(f"missing tile ({xx}, {yy})")
        if self.global_style.count(PLACEHOLDER) != 1:
            raise SpecSchemaError(
                f"global prompt must contain {PLACEHOLDER!r} exactly once")

    def prompt_at(self, x: int, y: int) -> str:
        for t in self.tiles:
            if t.x == x and t.y == y:
                return t.prompt
        raise KeyError(f"no tile at ({x}, {y})")


@dataclass(frozen=True)
class GridOrder:
    """Row-major build order: all tiles of earlier rows, then earlier columns."""

    sequence: tuple[Coord, ...]

    def __post_init__(self):
        for a, b in zip(self.sequence, self.sequence[1:]):
            if not (a[1] < b[1] or (a[1] == b[1] and a[0] < b[0])):
                raise ValueError("sequence is not row-major")

    def __iter__(self) -> Iterator[Coord]:
        return iter(self.sequence)

    def __len__(self) -> int:
        return len(self.sequence)

    def __getitem__(self, i: int) -> Coord:
        return self.sequence[i]


@dataclass(frozen=True)
class ContextTile:
    """An already-generated tile to render as context, possibly relocated.

    ``position`` differs from ``source`` only for the boundary bootstrap,
    where the tile one row back is temporarily duplicated one slot west."""

    source: Coord
    position: Coord

    @property
    def virtual(self) -> bool:
        return self.source != self.position


def parse_world_spec(raw: bytes | str) -> WorldSpec:
    """Parse world-spec JSON (UTF-8, no BOM). Grid size is inferred from tiles."""
    if isinstance(raw, bytes):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SpecParseError(f"invalid UTF-8: {exc.reason}", exc.start) from exc
    else:
        text = raw
    if text.startswith("﻿"):
        raise SpecParseError("unexpected byte-order mark", 0)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise SpecParseError(f"malformed JSON: {exc.msg}", offset) from exc

    if not isinstance(doc, dict):
        raise SpecSchemaError("top level must be a JSON object")
    if "tiles" not in doc or "prompt" not in doc:
        raise SpecSchemaError('expected top-level "tiles" and "prompt" keys')
    if not isinstance(doc["tiles"], list) or not doc["tiles"]:
        raise SpecSchemaError('"tiles" must be a nonempty array')
    if not isinstance(doc["prompt"], str):
        raise SpecSchemaError('"prompt" must be a string')

    tiles = []
    for i, entry in enumerate(doc["tiles"]):
        if not isinstance(entry, dict):
            raise SpecSchemaError(f"tiles[{i}] is not an object")
        try:
            x, y, prompt = entry["x"], entry["y"], entry["prompt"]
        except KeyError as exc:
            raise SpecSchemaError(f"tiles[{i}] missing key {exc}") from exc
        if not isinstance(x, int) or not isinstance(y, int) or isinstance(x, bool) or isinstance(y, bool):
            raise SpecSchemaError(f"tiles[{i}] coordinates must be integers")
        if not isinstance(prompt, str):
            raise SpecSchemaError(f"tiles[{i}] prompt must be a string")
        tiles.append(TilePrompt(x=x, y=y, prompt=prompt))

    if any(t.x < 0 or t.y < 0 for t in tiles):
        bad = next(t for t in tiles if t.x < 0 or t.y < 0)
        raise SpecSchemaError(f"tile ({bad.x}, {bad.y}) has negative coordinates")
    width = max(t.x for t in tiles) + 1
    height = max(t.y for t in tiles) + 1
    return WorldSpec(width=width, height=height, tiles=tuple(tiles),
                     global_style=doc["prompt"])


def serialize_world_spec(spec: WorldSpec) -> bytes:
    """Inverse of :func:`parse_world_spec`; tiles serialized in row-major order."""
    tiles = sorted(spec.tiles, key=lambda t: (t.y, t.x))
    doc = {
        "tiles": [{"prompt": t.prompt, "x": t.x, "y": t.y} for t in tiles],
        "prompt": spec.global_style,
    }
    return json.dumps(doc, ensure_ascii=False, indent=1).encode("utf-8")


def compose_prompt(spec: WorldSpec, x: int, y: int, mode: str = "substitute") -> str:
    """Combine the tile prompt with the global style.

    ``substitute`` replaces the placeholder token inside the style string;
    ``concat`` appends the style string with the placeholder stripped.
    """
    tile_prompt = spec.prompt_at(x, y)
    if mode == "substitute":
        return spec.global_style.replace(PLACEHOLDER, tile_prompt, 1)
    if mode == "concat":
        return tile_prompt + spec.global_style.replace(PLACEHOLDER, "", 1)
    raise ValueError(f"unknown prompt composition mode {mode!r}")


def build_order(width: int, height: int) -> GridOrder:
    """Row-major order; every tile's predecessors precede it."""
    if width < 1 or height < 1:
        raise ValueError("grid dimensions must be >= 1")
    return GridOrder(tuple((x, y) for y in range(height) for x in range(width)))


def predecessors(x: int, y: int, width: int, height: int) -> set[Coord]:
    """Tiles guaranteed generated before (x, y) under the build order."""
    return {(x2, y2) for y2 in range(height) for x2 in range(width)
            if y2 < y or (y2 == y and x2 < x)}


def context_tiles(x: int, y: int, generated: Iterable[Coord],
                  radius: int | None = None, bootstrap: bool = True
                  ) -> list[ContextTile]:
    """Already-generated tiles to render as context for tile (x, y).

    ``radius`` limits context to a Chebyshev neighbourhood of the target
    (None renders the full generated region).  With ``bootstrap``, a tile at
    the west edge with y > 0 additionally gets a temporary copy of
    (0, y-1) placed at (-1, y) for scale cues.
    """
    gen = sorted({(int(a), int(b)) for a, b in generated})
    out = []
    for src in gen:
        if radius is not None and max(abs(src[0] - x), abs(src[1] - y)) > radius:
            continue
        out.append(ContextTile(source=src, position=src))
    if bootstrap and x == 0 and y > 0 and (0, y - 1) in set(gen):
        out.append(ContextTile(source=(0, y - 1), position=(-1, y)))
    return out
