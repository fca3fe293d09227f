"""capslab: capsule-network vs. convolutional-network ablation lab."""

__version__ = "0.1.0"
