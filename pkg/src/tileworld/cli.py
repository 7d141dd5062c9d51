"""Command-line front end.

Subcommands:
    build        run a world build from a spec file
    validate     run the geometric validation tests on an occupancy file
    conformance  run the protocol contract checks against an endpoint
    serve-mock   expose the bundled mock endpoints over the wire protocol

Every command is non-interactive and deterministic given its config and
seeds, prints human-readable text, and emits machine-readable JSON (reports
on stdout, errors on stderr).

Exit codes: 0 success; 2 config/usage error; 3 I/O error; 4 build failure;
5 conformance failures; 6 malformed input file.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from tileworld.config import ConfigError, load_config
from tileworld.genproto.conformance import run_conformance
from tileworld.genproto.wire import RemoteEndpoints, resolve_endpoints
from tileworld.occupancy import OccupancyFormatError, load_occv, validate_tile
from tileworld.pipeline import BuildError, build_world
from tileworld.worldspec import SpecParseError, SpecSchemaError, parse_world_spec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_BUILD = 4
EXIT_CONFORMANCE = 5
EXIT_FORMAT = 6


def _fail(code: int, kind: str, message: str) -> int:
    print(json.dumps({"error": {"kind": kind, "message": message}}), file=sys.stderr)
    return code


def _parse_endpoints(arg: str):
    if arg == "mock":
        return "mock"
    mapping = {}
    for pair in arg.split(","):
        if "=" not in pair:
            raise ConfigError(
                f"--endpoints must be 'mock' or role=uri pairs, got {pair!r}")
        role, uri = pair.split("=", 1)
        mapping[role.strip()] = uri.strip()
    return mapping


def _config_overrides(args: argparse.Namespace) -> dict:
    keys = ("master_seed", "retries", "band_r", "tau", "delta", "alpha", "beta")
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k) is not None}
    camera = {}
    if args.image_size is not None:
        camera["image_size"] = args.image_size
    if camera:
        overrides["camera"] = camera
    return overrides


def cmd_build(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config, overrides=_config_overrides(args))
    except (ConfigError, OSError, ValueError) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    spec_path = Path(args.spec)
    try:
        raw = spec_path.read_bytes()
    except OSError as exc:
        return _fail(EXIT_IO, "io", f"cannot read spec {spec_path}: {exc}")
    try:
        spec = parse_world_spec(raw)
    except (SpecParseError, SpecSchemaError) as exc:
        return _fail(EXIT_FORMAT, "spec", str(exc))
    try:
        endpoints = resolve_endpoints(_parse_endpoints(args.endpoints),
                                      master_seed=cfg.master_seed)
    except (ConfigError, ValueError) as exc:
        return _fail(EXIT_CONFIG, "endpoints", str(exc))

    try:
        grid, report = build_world(spec, endpoints, cfg, out_dir=args.out,
                                   resume=args.resume)
    except BuildError as exc:
        return _fail(EXIT_BUILD, "build",
                     f"tile {exc.tile} exhausted its retry budget: "
                     + json.dumps([r.to_json() for r in exc.reports]))
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))

    summary = {
        "tiles": len(report.tiles),
        "blend_pairs": len(report.blend_pairs),
        "metrics": report.metrics.to_json() if report.metrics else None,
        "out": str(args.out),
        "interrupted": report.interrupted,
    }
    print(json.dumps(summary, indent=1))
    print(f"built {len(report.tiles)} tiles "
          f"({grid.spec.width}x{grid.spec.height}) -> {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        volume = load_occv(args.occupancy)
    except OSError as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except OccupancyFormatError as exc:
        return _fail(EXIT_FORMAT, "format", str(exc))
    report = validate_tile(volume, alpha=args.alpha, beta=args.beta)
    print(json.dumps(report.to_json(), indent=1))
    return EXIT_OK


def cmd_conformance(args: argparse.Namespace) -> int:
    roles = None if args.role in (None, "all") else (args.role,)
    if args.endpoint == "mock":
        endpoints = resolve_endpoints("mock")
        base_url = None
    else:
        endpoints = RemoteEndpoints.from_addresses({"*": args.endpoint}).as_endpoint_set()
        base_url = args.endpoint
    results = run_conformance(endpoints, base_url=base_url, roles=roles)
    print(json.dumps([r.to_json() for r in results], indent=1))
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.role}/{r.name}: {r.detail}", file=sys.stderr)
    return EXIT_OK if not failed else EXIT_CONFORMANCE


def cmd_serve_mock(args: argparse.Namespace) -> int:
    from tileworld.genproto.wire import EndpointServer

    endpoints = resolve_endpoints("mock", master_seed=args.master_seed or 0)
    server = EndpointServer(endpoints, host=args.host, port=args.port)
    server.start()
    print(json.dumps({"serving": server.address}))
    print(f"mock endpoints at {server.address} (Ctrl-C to stop)", file=sys.stderr)
    try:
        server._thread.join()
    except KeyboardInterrupt:
        server.stop()
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tileworld",
                                     description="tile-based 3D world assembly engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p_build = sub.add_parser("build", help="build a world from a spec file")
    p_build.add_argument("--spec", required=True, help="world-spec JSON path")
    p_build.add_argument("--endpoints", default="mock",
                         help="'mock' or comma-separated role=uri pairs")
    p_build.add_argument("--out", required=True, help="output directory")
    p_build.add_argument("--config", default=None, help="JSON config file")
    p_build.add_argument("--seed", dest="master_seed", type=int, default=None)
    p_build.add_argument("--retries", type=int, default=None)
    p_build.add_argument("--band-r", dest="band_r", type=int, default=None)
    p_build.add_argument("--tau", type=float, default=None)
    p_build.add_argument("--delta", type=float, default=None)
    p_build.add_argument("--alpha", type=float, default=None)
    p_build.add_argument("--beta", type=float, default=None)
    p_build.add_argument("--image-size", dest="image_size", type=int, default=None)
    p_build.add_argument("--resume", action="store_true")
    p_build.set_defaults(func=cmd_build)

    p_val = sub.add_parser("validate", help="validate an occupancy volume file")
    p_val.add_argument("--occupancy", required=True, help="OCCV file path")
    p_val.add_argument("--alpha", type=float, default=1.0)
    p_val.add_argument("--beta", type=float, default=0.95)
    p_val.set_defaults(func=cmd_validate)

    p_conf = sub.add_parser("conformance", help="run contract checks")
    p_conf.add_argument("--endpoint", required=True,
                        help="base URL of the service, or 'mock'")
    p_conf.add_argument("--role", default="all")
    p_conf.set_defaults(func=cmd_conformance)

    p_serve = sub.add_parser("serve-mock", help="serve mock endpoints over HTTP")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8341)
    p_serve.add_argument("--master-seed", dest="master_seed", type=int, default=0)
    p_serve.set_defaults(func=cmd_serve_mock)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
