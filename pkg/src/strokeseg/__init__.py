"""strokeseg: 3D U-Net stroke lesion segmentation toolkit."""

__version__ = "0.1.0"
