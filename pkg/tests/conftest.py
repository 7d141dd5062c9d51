import numpy as np
import pytest

from tileworld.config import CameraConfig, RunConfig
from tileworld.genproto.mock import MockConfig, MockEndpoints, MockWorldModel, mock_endpoint_set
from tileworld.isorender import IsometricCamera
from tileworld.splats import SplatSet

# The 2x2 example world used across parser and CLI tests.
EXAMPLE_WORLD_JSON = b"""{"tiles": [
{ "prompt": "ancient stone bridge over a stream", "x": 0, "y": 0 },
{ "prompt": "lively stream past mossy banks", "x": 1, "y": 0 },
{ "prompt": "serene pond reflecting moonlight", "x": 0, "y": 1 },
{ "prompt": "bustling medieval market street", "x": 1, "y": 1 } ],
"prompt": "{tile_prompt}, medieval setting, isometric view, glowing lanterns, soft shading, vibrant colors, detailed textures"}
"""


@pytest.fixture
def small_camera() -> IsometricCamera:
    return IsometricCamera.default(image_size=160)


@pytest.fixture
def mid_camera() -> IsometricCamera:
    return IsometricCamera.default(image_size=256)


@pytest.fixture
def fast_config() -> RunConfig:
    """Small-but-complete pipeline config for tests."""
    return RunConfig(camera=CameraConfig(image_size=224), latent_res=32, band_r=4,
                     schedule_steps=8, upsample_views=2)


@pytest.fixture
def fast_mock_config() -> MockConfig:
    return MockConfig(content_res=8, latent_res=32, slab_splat_pitch=16)


@pytest.fixture
def fast_endpoints(fast_mock_config):
    return mock_endpoint_set(0, fast_mock_config)


@pytest.fixture
def mock_endpoints(fast_mock_config) -> MockEndpoints:
    return MockEndpoints(MockWorldModel(0, fast_mock_config), fast_mock_config)


def grid_splats(nx: int, ny: int, color=(0.3, 0.6, 0.2), pitch: float | None = None,
                z: float = 0.0, origin=(0.0, 0.0), opacity: float = 1.0) -> SplatSet:
    """A flat sheet of identical splats covering [0,1]^2 shifted to origin."""
    if pitch is None:
        pitch = 1.0 / nx
    xs = origin[0] + (np.arange(nx) + 0.5) * pitch
    ys = origin[1] + (np.arange(ny) + 0.5) * pitch
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    n = nx * ny
    centers = np.stack([gx.ravel(), gy.ravel(), np.full(n, z)], axis=1)
    scales = np.full((n, 3), pitch * 0.35)
    rot = np.zeros((n, 4), dtype=np.float32)
    rot[:, 0] = 1.0
    colors = np.tile(np.asarray(color, dtype=np.float32), (n, 1))
    return SplatSet(centers, scales, rot, np.full(n, opacity), colors)


def single_splat(center, color=(1.0, 0.0, 0.0), scale=0.05, opacity=1.0) -> SplatSet:
    return SplatSet(centers=[center], scales=[[scale] * 3], rotations=[[1, 0, 0, 0]],
                    opacities=[opacity], colors=[color])
