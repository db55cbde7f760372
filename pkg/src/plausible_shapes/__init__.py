"""Diverse plausible shape completion from single depth views."""
from .boxflow import BoxFlow
from .errors import ConfigError, EmptyShape, NonFiniteLoss, PlausibleShapesError
from .observe import ObsConfig, PartialObservation, make_observation, obs_plausible, render_depth
from .pssnet import PSSNet
from .registration import IcpConfig, icp
from .voxelcore import OrientedBox, RigidTransform, VoxelGrid, chamfer

__version__ = "0.1.0"

__all__ = [
    "BoxFlow",
    "ConfigError",
    "EmptyShape",
    "IcpConfig",
    "NonFiniteLoss",
    "ObsConfig",
    "OrientedBox",
    "PSSNet",
    "PartialObservation",
    "PlausibleShapesError",
    "RigidTransform",
    "VoxelGrid",
    "chamfer",
    "icp",
    "make_observation",
    "obs_plausible",
    "render_depth",
]
