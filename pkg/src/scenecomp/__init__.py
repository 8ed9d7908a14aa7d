"""Two-object image composition with composition/decomposition GANs."""

__version__ = "0.1.0"
