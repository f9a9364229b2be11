"""Moving horizon estimation with an outlier-robust beta-divergence stage cost."""

__version__ = "0.1.0"
