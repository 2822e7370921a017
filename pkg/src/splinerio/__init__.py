"""Radar-inertial odometry with online spatio-temporal calibration.

Continuous-time modeling of raw IMU signals with uniform cubic B-splines,
a temporally compensated radar ego-velocity factor, and a fixed-lag
factor-graph smoother, plus a synthetic sensor simulator and an APE/RPE
trajectory evaluator.
"""

__version__ = "0.1.0"

from .accel import NUMBA_ENABLED

__all__ = ["NUMBA_ENABLED", "__version__"]
