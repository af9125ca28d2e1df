"""probpnp: probabilistic Perspective-n-Point at desk scale.

The package treats ``exp(-cost)`` of a weighted reprojection least-squares
problem as an unnormalized density over 6DoF poses.  It ships a deterministic
solver (EPnP initialization + Levenberg-Marquardt refinement), adaptive
importance sampling of the pose density, a differentiable toy training loop
over correspondence parameters, a BOP-style metric suite with a software
depth renderer, and a CLI that ties everything together on synthetic scenes.
"""

__version__ = "0.1.0"

from . import errors
from .geometry import (
    CameraIntrinsics,
    Correspondence,
    CorrespondenceSet,
    EPS_Z,
    Pose,
    SymmetrySet,
    geodesic_angle,
    project,
    project_points,
    residual_jacobian,
    residuals,
    se3_local,
    se3_retract,
    so3_exp,
    so3_log,
    total_cost,
    weighted_residual,
)

__all__ = [
    "CameraIntrinsics",
    "Correspondence",
    "CorrespondenceSet",
    "EPS_Z",
    "Pose",
    "SymmetrySet",
    "errors",
    "geodesic_angle",
    "project",
    "project_points",
    "residual_jacobian",
    "residuals",
    "se3_local",
    "se3_retract",
    "so3_exp",
    "so3_log",
    "total_cost",
    "weighted_residual",
    "__version__",
]
