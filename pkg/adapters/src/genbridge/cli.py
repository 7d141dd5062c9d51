"""Serve the adapter over HTTP.

    genbridge serve [--config adapter.json] [--host H] [--port P]
"""

from __future__ import annotations

import argparse
import sys

import uvicorn

from genbridge.backends import BackendLoadError
from genbridge.config import AdapterConfig, ConfigError
from genbridge.service import create_app


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="genbridge")
    sub = parser.add_subparsers(dest="command", required=True)
    p_serve = sub.add_parser("serve", help="run the adapter service")
    p_serve.add_argument("--config", default=None, help="adapter config JSON")
    p_serve.add_argument("--host", default=None)
    p_serve.add_argument("--port", type=int, default=None)
    args = parser.parse_args(argv)

    try:
        config = AdapterConfig.from_file(args.config) if args.config else AdapterConfig()
        if args.host or args.port:
            import dataclasses

            config = dataclasses.replace(config, host=args.host or config.host,
                                         port=args.port or config.port)
        app = create_app(config)
    except (ConfigError, BackendLoadError, OSError) as exc:
        print(f"startup error: {exc}", file=sys.stderr)
        return 2

    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
