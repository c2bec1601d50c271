"""Expert placement for mixture-of-experts inference on a 2D-mesh near-memory accelerator."""

__version__ = "0.1.0"
