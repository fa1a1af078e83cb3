"""flowlab: rectified-flow and diffusion formulations, a toy MM-DiT and the tooling to compare them."""

__version__ = "0.1.0"
