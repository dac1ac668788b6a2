"""PMU-based power-system state estimation with a mixture-aware graph neural network."""

__version__ = "0.1.0"
