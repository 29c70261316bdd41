"""Small sequence models, entropy-controlled decoding and quality-diversity sweeps."""

__version__ = "0.1.0"
