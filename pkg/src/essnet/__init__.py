"""End-to-end unpaired cross-modality synthesis and segmentation."""

__version__ = "0.1.0"
