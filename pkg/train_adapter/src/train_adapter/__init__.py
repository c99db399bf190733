"""Training-side consumer of the exported SFT conversation dataset."""

__version__ = "0.1.0"
