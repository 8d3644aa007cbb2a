"""Style-invariant selective state-space classifier with latent flow and HJ transport losses."""

__version__ = "0.1.0"
