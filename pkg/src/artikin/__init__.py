"""Part-level reconstruction and screw-joint estimation for articulated
objects observed at two states."""

from .estimator import ArticulationEstimator
from .initialization import TwoStateInput
from .losses import LossWeights
from .optimizer import FitConfig, fit
from .scene import (
    ArticulatedScene,
    Camera,
    GaussianSet,
    JointParams,
    PartModel,
    PlanarGaussian,
    StateObservation,
)
from .synthetic import make_scene

__version__ = "0.1.0"

__all__ = [
    "ArticulationEstimator",
    "ArticulatedScene",
    "Camera",
    "FitConfig",
    "GaussianSet",
    "JointParams",
    "LossWeights",
    "PartModel",
    "PlanarGaussian",
    "StateObservation",
    "TwoStateInput",
    "fit",
    "make_scene",
]
