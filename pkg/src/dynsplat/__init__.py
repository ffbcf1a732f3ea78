"""Dynamic Gaussian scene fitting with shared SE(3) motion bases."""

__version__ = "0.1.0"
