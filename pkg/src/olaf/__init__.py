"""Object-cue input channels, low-level dense feature guidance and input-layer weight
adaptation for multi-object multi-part segmentation, with a desk-scale benchmark."""

__version__ = "0.1.0"
