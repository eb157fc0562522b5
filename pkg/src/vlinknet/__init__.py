"""Dual-encoder GAN image inpainting with a standardized mask/image evaluation protocol."""

from vlinknet.imagecore import (
    DimensionError,
    apply_mask,
    compose,
    hole_ratio,
    load_image,
    load_mask,
    reverse_mask,
    save_image,
    save_mask,
)

__version__ = "0.1.0"

__all__ = [
    "DimensionError",
    "apply_mask",
    "compose",
    "hole_ratio",
    "load_image",
    "load_mask",
    "reverse_mask",
    "save_image",
    "save_mask",
]
