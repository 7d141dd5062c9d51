"""genbridge: serves generator models over the tile-engine wire protocol.

The service speaks the JSON-over-HTTP protocol documented in the engine's
docs/protocol.md: one POST per operation, binary artifacts as
content-addressed blob attachments, and a strict version handshake.  Model
backends are pluggable per role; the bundled stubs are procedural stand-ins
that satisfy every protocol contract, so the service can be developed and
conformance-tested without any model weights.
"""

__version__ = "0.1.0"

PROTOCOL_NAME = "tileworld-genproto"
PROTOCOL_MAJOR = 1
PROTOCOL_MINOR = 0

ROLES = (
    "prompt-expander",
    "inpainter-2d",
    "image-to-3d",
    "latent-denoiser",
    "background-removal",
    "image-distance",
)
