import sys
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

sys.path.insert(0, str(Path(__file__).parent))

from strokeseg.volume import BinaryMask, VoxelGrid


@pytest.fixture
def unit_grid():
    return VoxelGrid.las((12, 12, 12), (1.0, 1.0, 1.0))


def make_grid(shape=(12, 12, 12), spacing=(1.0, 1.0, 1.0)):
    return VoxelGrid.las(shape, spacing)


def random_blob_mask(rng: np.random.Generator, grid: VoxelGrid, density: float = 0.5) -> BinaryMask:
    """Smoothed-noise threshold masks: realistically blobby, sometimes empty."""
    noise = ndimage.gaussian_filter(rng.standard_normal(grid.shape), sigma=1.2)
    cut = np.quantile(noise, 1.0 - density) if density < 1.0 else noise.min() - 1.0
    return BinaryMask(grid, (noise > cut).astype(np.uint8))
