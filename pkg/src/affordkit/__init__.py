"""Metric-scale hand trajectories from monocular video artifacts, 3D affordance
labels, and cost-guided trajectory diffusion over a TSDF scene."""

__version__ = "0.1.0"
