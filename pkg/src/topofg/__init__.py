"""Fine-grained lane topology reasoning on synthetic BEV scenes."""

__version__ = "0.1.0"
