"""Actor-Simulator: joint digital-twin calibration and policy optimization."""

__version__ = "0.1.0"
