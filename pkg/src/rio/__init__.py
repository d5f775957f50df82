"""Rigid object re-localization between 3D scans of changing indoor scenes."""

from .geometry import DegenerateInputError, RigidPose
from .volume import PatchPairSpec, TsdfVolume, load_volume, save_volume

__version__ = "0.1.0"

__all__ = ["DegenerateInputError", "RigidPose", "PatchPairSpec", "TsdfVolume", "load_volume",
           "save_volume"]
