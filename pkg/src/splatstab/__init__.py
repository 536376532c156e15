"""splatstab: full-frame video stabilization via per-frame Gaussian-splat
scenes refined by test-time optimization and rendered at smoothed poses."""

__version__ = "0.1.0"
