#!/usr/bin/env python3
"""Build a mock world end to end and print its geometry metrics.

Example:
    python scripts/run_mock_build.py --size 3 --seed 7 --out /tmp/world3
"""

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from tileworld.config import CameraConfig, RunConfig
from tileworld.genproto.mock import MockConfig, mock_endpoint_set
from tileworld.pipeline import assemble, build_world


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", type=int, default=2, help="grid side length")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--prompt", default="lantern-lit canal district")
    parser.add_argument("--out", default=None, help="export directory (optional)")
    parser.add_argument("--image-size", type=int, default=512)
    parser.add_argument("--latent-res", type=int, default=64)
    args = parser.parse_args()

    cfg = RunConfig(master_seed=args.seed, latent_res=args.latent_res,
                    band_r=args.latent_res // 8,
                    camera=CameraConfig(image_size=args.image_size))
    endpoints = mock_endpoint_set(args.seed, MockConfig(latent_res=args.latent_res))
    spec = endpoints.expander.expand(args.prompt, args.size, args.size)
    print(f"tile prompts: {[t.prompt for t in spec.tiles]}")

    t0 = time.monotonic()
    grid, report = build_world(spec, endpoints, cfg, out_dir=args.out)
    elapsed = time.monotonic() - t0

    world = assemble(grid, cfg)
    print(json.dumps({
        "tiles": len(report.tiles),
        "blend_pairs": len(report.blend_pairs),
        "splats": len(world),
        "metrics": report.metrics.to_json(),
        "seconds": round(elapsed, 2),
        "out": args.out,
    }, indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
