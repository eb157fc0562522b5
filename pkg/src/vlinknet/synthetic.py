"""Procedural textured images and irregular masks for smoke tests and demos."""

from __future__ import annotations

import numpy as np
import torch


def textured_images(n: int, size: int, seed: int = 0) -> torch.Tensor:
    """``(n, 3, size, size)`` images in [-1, 1]: sums of oriented sinusoids plus a colour ramp."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((n, 3, size, size))
    for i in range(n):
        for c in range(3):
            img = np.zeros((size, size))
            for _ in range(3):
                fx, fy = rng.uniform(0.5, 4.0, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                img += rng.uniform(0.2, 0.5) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
            img += rng.uniform(-0.3, 0.3) * (xx - 0.5) + rng.uniform(-0.3, 0.3)
            out[i, c] = img
    return torch.from_numpy(np.clip(out, -1, 1)).to(torch.float32)


def blob_masks(n: int, size: int, seed: int = 0, ratio=(0.1, 0.3)) -> torch.Tensor:
    """``(n, 1, size, size)`` masks (1 = known) made of random rectangles.

    Rectangles are added until the hole ratio reaches a target drawn from
    ``ratio``; the result may overshoot the target by one rectangle.
    """
    rng = np.random.default_rng(seed)
    masks = np.ones((n, 1, size, size), dtype=np.float32)
    for i in range(n):
        target = rng.uniform(*ratio)
        while (masks[i] == 0).mean() < target:
            h, w = rng.integers(max(2, size // 10), max(3, size // 4), size=2)
            r, c = rng.integers(0, size - h), rng.integers(0, size - w)
            masks[i, 0, r:r + h, c:c + w] = 0
    return torch.from_numpy(masks)
