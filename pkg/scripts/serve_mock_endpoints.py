#!/usr/bin/env python3
"""Serve the bundled mock generators over the wire protocol.

Useful for exercising remote-endpoint code paths and the conformance suite
against a real HTTP server:

    python scripts/serve_mock_endpoints.py --port 8341 &
    tileworld conformance --endpoint http://127.0.0.1:8341
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from tileworld.genproto.mock import mock_endpoint_set
from tileworld.genproto.wire import EndpointServer


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8341)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    server = EndpointServer(mock_endpoint_set(args.seed), host=args.host,
                            port=args.port).start()
    print(f"mock endpoints at {server.address} (Ctrl-C to stop)")
    try:
        server._thread.join()
    except KeyboardInterrupt:
        server.stop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
