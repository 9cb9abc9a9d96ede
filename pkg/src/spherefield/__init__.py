"""spherefield: dual-sphere tri-plane neural fields with Cartesian baselines."""

__version__ = "0.1.0"
