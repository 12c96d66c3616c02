"""Double-horizon model-based RL lab."""

__version__ = "0.1.0"
