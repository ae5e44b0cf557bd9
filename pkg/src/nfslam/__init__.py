"""Region-partitioned neural-field RGB-D SLAM in numpy.

Space is divided into fixed-size overlapping cubes, each mapped by its own
small MLP, so the stored map grows with the explored volume and not with
the length of the sequence.
"""

from .atlas import Atlas, Region, map_size_report
from .core import Intrinsics, PointCloud, Pose, RgbdFrame, se3_exp, se3_log
from .evaluate import Trajectory, ate_rmse
from .reconstruct import BlendConfig, blended_query, export_cloud
from .slam import NeuralSlam, SlamConfig

__all__ = [
    "Atlas", "Region", "map_size_report", "Intrinsics", "PointCloud", "Pose", "RgbdFrame", "se3_exp",
    "se3_log", "Trajectory", "ate_rmse", "BlendConfig", "blended_query", "export_cloud", "NeuralSlam",
    "SlamConfig",
]

__version__ = "0.1.0"
