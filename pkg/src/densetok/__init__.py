"""densetok - density-gated token ViT detector for dense small targets in SAR-like imagery."""
__all__ = ["cli", "config", "data", "density", "detect", "model", "tensor", "train"]
__version__ = "0.1.0"
