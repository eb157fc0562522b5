"""Image and mask representations, masking algebra and PNG I/O.

Images are channel-first tensors ``(..., C, H, W)`` with values in ``[-1, 1]``.
Masks are ``(..., 1, H, W)`` or ``(H, W)`` tensors over ``{0, 1}`` where
1 marks a known pixel and 0 marks a hole.  The masking helpers accept torch
tensors and numpy arrays alike.
"""

from __future__ import annotations

import os
import warnings

import numpy as np
import torch
from PIL import Image as PILImage, PngImagePlugin, UnidentifiedImageError

HOLE_FILL = 0.0
MASK_THRESHOLD = 0.5
# fraction of grey (non 0/255) pixels tolerated before load_mask warns
GREY_TOLERANCE = 0.01


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible."""


def _check_spatial(a, b, what: str) -> None:
    if tuple(a.shape[-2:]) != tuple(b.shape[-2:]):
        raise DimensionError(
            f"{what}: spatial shape {tuple(a.shape[-2:])} does not match {tuple(b.shape[-2:])}"
        )


def _as_channel_mask(mask, image):
    # (H, W) masks broadcast over the channel axis of a (..., C, H, W) image
    if mask.ndim == 2 and image.ndim >= 3:
        return mask[None]
    return mask


def apply_mask(image, mask, fill: float = HOLE_FILL):
    """Return ``image`` with hole pixels (mask == 0) replaced by ``fill``."""
    _check_spatial(image, mask, "apply_mask")
    m = _as_channel_mask(mask, image)
    out = image * m
    if fill != 0.0:
        out = out + fill * (1 - m)
    return out


def reverse_mask(mask):
    """Complement of a binary mask: holes become known and vice versa."""
    return 1 - mask


def hole_ratio(mask) -> float:
    """Fraction of pixels that are holes."""
    if mask.shape[-1] == 0 or mask.shape[-2] == 0 or mask.ndim < 2:
        raise DimensionError(f"hole_ratio: empty mask of shape {tuple(mask.shape)}")
    arr = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    return float(np.count_nonzero(arr == 0)) / float(arr.size)


def compose(gt, pred, mask):
    """Paste ``pred`` into the holes of ``gt``: ``M * gt + (1 - M) * pred``."""
    _check_spatial(gt, pred, "compose")
    _check_spatial(gt, mask, "compose")
    if tuple(gt.shape) != tuple(pred.shape):
        raise DimensionError(f"compose: gt {tuple(gt.shape)} vs pred {tuple(pred.shape)}")
    m = _as_channel_mask(mask, gt)
    return m * gt + (1 - m) * pred


def to_uint8(image) -> np.ndarray:
    """Map a ``(C, H, W)`` image in [-1, 1] to an ``(H, W, C)`` uint8 array."""
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    arr = np.clip((arr.astype(np.float64) + 1.0) * 127.5, 0, 255)
    return np.rint(arr).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> torch.Tensor:
    """Map an ``(H, W, C)`` uint8 array to a float32 ``(C, H, W)`` tensor in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(torch.float32)
    return x / 255.0 * 2.0 - 1.0


def _open(path):
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such image file: {path}")
    try:
        img = PILImage.open(path)
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return img


def load_image(path, size: int | None = None) -> torch.Tensor:
    """Read an RGB image as a ``(3, H, W)`` float32 tensor in [-1, 1].

    If ``size`` is given the image is resized (bilinear) to ``size x size``.
    """
    img = _open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), PILImage.BILINEAR)
    return from_uint8(np.asarray(img))


def save_image(image, path, metadata: dict | None = None) -> None:
    """Write a ``(3, H, W)`` image in [-1, 1] as an 8-bit PNG, with optional text chunks."""
    path = os.fspath(path)
    info = None
    if metadata:
        info = PngImagePlugin.PngInfo()
        for key, value in metadata.items():
            info.add_text(str(key), str(value))
    try:
        PILImage.fromarray(to_uint8(image)).save(path, format="PNG", pnginfo=info)
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def load_mask(path, size: int | None = None, white_is_hole: bool = True) -> torch.Tensor:
    """Read a mask file into a ``(1, H, W)`` float32 tensor with 1 = known.

    Luminance is thresholded at 0.5.  ``white_is_hole`` states the polarity of
    the source files; it is inverted to the internal convention when set.
    """
    img = _open(path).convert("L")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), PILImage.NEAREST)
    lum = np.asarray(img, dtype=np.float64) / 255.0
    grey = np.count_nonzero((lum > 0.1) & (lum < 0.9)) / lum.size
    if grey > GREY_TOLERANCE:
        warnings.warn(
            f"mask {os.fspath(path)} is not binary: {grey:.1%} grey pixels thresholded",
            stacklevel=2,
        )
    white = lum >= MASK_THRESHOLD
    known = ~white if white_is_hole else white
    return torch.from_numpy(known.astype(np.float32))[None]


def save_mask(mask, path, white_is_hole: bool = True) -> None:
    """Write an internal mask as a single-channel PNG using the given polarity."""
    path = os.fspath(path)
    arr = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    arr = arr.reshape(arr.shape[-2:]) > 0.5
    white = ~arr if white_is_hole else arr
    try:
        PILImage.fromarray(white.astype(np.uint8) * 255).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write mask {path}: {exc}") from exc
