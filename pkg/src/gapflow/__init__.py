"""Timestamp-conditioned masked flow matching for two-sensor image time series."""

__version__ = "0.1.0"

from .autodiff import GradTape, Tensor

__all__ = ["GradTape", "Tensor", "__version__"]
