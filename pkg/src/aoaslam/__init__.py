"""Simulated backscatter-tag localization.

Pipeline: frequency-shift channel planning -> synthetic CSI -> joint
AoA-ToF estimation on a 3-antenna circular array -> IMU preintegration ->
sliding-window graph SLAM that jointly localizes the robot and the tags.
"""

from .core import RobotState, Rot, TagState, TagStatus, Vec3, cross, rotate
from .channel import ChannelPlan, plan_channels, rx_channel_at, sideband_spectrum
from .csi import (AoAEstimate, ArrayGeometry, CsiMatrix, SearchGrid, VirtualPath,
                  direct_path_aoa, estimate_aoa_tof, synthesize_csi)
from .inertial import ImuSample, OdometryEdge, preintegrate, propagate, simulate_imu
from .slam import AoAConstraint, Solution, Window, WindowConfig, residual_aoa
from .harness import RunReport, Scenario, compute_metrics, paper_scenario, run_scenario

__all__ = [
    "AoAConstraint", "AoAEstimate", "ArrayGeometry", "ChannelPlan", "CsiMatrix",
    "ImuSample", "OdometryEdge", "RobotState", "Rot", "RunReport", "Scenario",
    "SearchGrid", "Solution", "TagState", "TagStatus", "Vec3", "VirtualPath",
    "Window", "WindowConfig", "compute_metrics", "cross", "direct_path_aoa",
    "estimate_aoa_tof", "paper_scenario", "plan_channels", "preintegrate",
    "propagate", "residual_aoa", "rotate", "run_scenario", "rx_channel_at",
    "sideband_spectrum", "synthesize_csi",
]

__version__ = "0.1.0"
