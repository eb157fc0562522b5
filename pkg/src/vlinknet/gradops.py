"""Sobel gradients and gradient magnitude, differentiable through torch."""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F

from vlinknet.imagecore import DimensionError

MAGNITUDE_EPS = 1e-12


class GradientPair(NamedTuple):
    gx: torch.Tensor
    gy: torch.Tensor


def sobel_xy(t: torch.Tensor) -> GradientPair:
    """Per-channel Sobel responses of a ``(C, H, W)`` or ``(N, C, H, W)`` tensor.

    Borders are handled by edge replication, so a constant input yields
    exactly zero everywhere.
    """
    if t.ndim not in (3, 4):
        raise DimensionError(f"sobel_xy expects (C,H,W) or (N,C,H,W), got {tuple(t.shape)}")
    if t.shape[-1] < 3 or t.shape[-2] < 3:
        raise DimensionError(f"sobel_xy needs spatial dims >= 3x3, got {tuple(t.shape[-2:])}")
    p = F.pad(t if t.ndim == 4 else t.unsqueeze(0), (1, 1, 1, 1), mode="replicate")
    if t.ndim == 3:
        p = p[0]
    # separable form: central difference first, so constant inputs cancel exactly
    dx = p[..., :, 2:] - p[..., :, :-2]
    gx = dx[..., :-2, :] + 2 * dx[..., 1:-1, :] + dx[..., 2:, :]
    dy = p[..., 2:, :] - p[..., :-2, :]
    gy = dy[..., :, :-2] + 2 * dy[..., :, 1:-1] + dy[..., :, 2:]
    return GradientPair(gx, gy)


def grad_magnitude(g: GradientPair) -> torch.Tensor:
    """Element-wise ``sqrt(gx^2 + gy^2 + eps)``."""
    if g.gx.shape != g.gy.shape:
        raise DimensionError(f"gx {tuple(g.gx.shape)} and gy {tuple(g.gy.shape)} differ")
    return torch.sqrt(g.gx * g.gx + g.gy * g.gy + MAGNITUDE_EPS)
