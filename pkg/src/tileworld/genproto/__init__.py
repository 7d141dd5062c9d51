"""Generator protocol: abstract roles for the language, 2D, and 3D models,
a JSON-over-HTTP wire format with content-addressed blob attachments, and
deterministic procedural mocks that make the whole pipeline testable offline.
"""

from tileworld.genproto.interfaces import (
    EndpointSet,
    GeneratorEndpoint,
    Image3DResult,
    PROTOCOL_MAJOR,
    PROTOCOL_MINOR,
    PROTOCOL_NAME,
    ROLES,
    denoise_step,
)
from tileworld.genproto.mock import MockEndpoints, MockFaults, MockWorldModel

__all__ = [
    "EndpointSet",
    "GeneratorEndpoint",
    "Image3DResult",
    "PROTOCOL_MAJOR",
    "PROTOCOL_MINOR",
    "PROTOCOL_NAME",
    "ROLES",
    "denoise_step",
    "MockEndpoints",
    "MockFaults",
    "MockWorldModel",
]
