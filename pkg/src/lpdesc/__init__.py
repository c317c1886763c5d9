"""Rotation- and scale-aware patch descriptors from log-polar sampling."""

from .geometry import GridSpec, Keypoint, make_grid
from .imagecore import Image, Patch, extract_patch, read_image, write_image
from .network import DescriptorNet, build_network, describe

__all__ = [
    "DescriptorNet", "GridSpec", "Image", "Keypoint", "Patch", "build_network",
    "describe", "extract_patch", "make_grid", "read_image", "write_image",
]
