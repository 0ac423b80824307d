"""Camera calibration for pinhole to fisheye and catadioptric lenses."""

from __future__ import annotations

__version__ = "0.1.0"
