"""Anatomical pattern analysis: GLM betas, condition masking, atlas features and imbalance-aware decoding."""

__version__ = "0.1.0"
