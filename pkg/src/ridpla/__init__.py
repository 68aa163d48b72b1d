"""Physical-layer authentication of drone Remote-ID broadcasts.

Simulates OFDM Remote-ID frames over an air-to-ground Rician channel,
recovers sensing parameters at a planar receive array, tracks the drone with
a yaw-augmented constant-acceleration EKF fused with a learned sequence
predictor, and authenticates each frame by cross-checking antenna count,
no-fly-zone compliance, and location consistency.
"""

__version__ = "0.1.0"

from . import auth, codec, ekf, harness, neural, phy, scenario, sensing  # noqa: F401
