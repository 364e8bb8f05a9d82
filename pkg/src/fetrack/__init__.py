"""RGB-Event single-object tracking with prompt-fused selective state-space backbones."""

__version__ = "0.1.0"
