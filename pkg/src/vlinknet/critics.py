"""Global and local Wasserstein critics, adversarial losses and Lipschitz control."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from vlinknet.generator import init_parameters
from vlinknet.imagecore import DimensionError


class NoHoleError(ValueError):
    pass


@dataclass
class CriticConfig:
    input_resolution: int = 64
    local_patch_resolution: int | None = None
    in_channels: int = 3
    channels: tuple[int, ...] = (8, 16, 32, 64, 64)
    lipschitz: str = "clip"  # "clip" or "gp"
    clip_value: float = 0.01
    gp_weight: float = 10.0
    seed: int = 1

    def __post_init__(self):
        self.channels = tuple(self.channels)
        if self.lipschitz not in ("clip", "gp"):
            raise ValueError(f"lipschitz must be 'clip' or 'gp', got {self.lipschitz!r}")

    def resolution(self, scope: str) -> int:
        if scope == "global":
            return self.input_resolution
        if scope == "local":
            return self.local_patch_resolution or self.input_resolution // 2
        raise ValueError(f"unknown critic scope {scope!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class Critic(nn.Module):
    """Strided 3x3 conv blocks with LeakyReLU(0.2) and a linear score head.

    No batch norm and no terminal sigmoid: the score is unbounded.
    """

    def __init__(self, resolution: int, channels=(8, 16, 32, 64, 64), in_channels: int = 3,
                 seed: int = 1):
        super().__init__()
        self.resolution = resolution
        convs, ch, size = [], in_channels, resolution
        for out in channels:
            convs.append(nn.Conv2d(ch, out, 3, stride=2, padding=1))
            ch, size = out, (size - 1) // 2 + 1
        self.convs = nn.ModuleList(convs)
        self.head = nn.Linear(ch * size * size, 1)
        init_parameters(self, seed)

    def forward(self, x):
        if tuple(x.shape[-2:]) != (self.resolution, self.resolution):
            raise DimensionError(
                f"critic expects {self.resolution}x{self.resolution}, got {tuple(x.shape[-2:])}"
            )
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
        return self.head(x.flatten(1)).squeeze(1)


def build_critics(cfg: CriticConfig) -> dict[str, Critic]:
    return {
        scope: Critic(cfg.resolution(scope), cfg.channels, cfg.in_channels, cfg.seed + i)
        for i, scope in enumerate(("global", "local"))
    }


def critic_forward(critics: dict[str, Critic], scope: str, batch):
    return critics[scope](batch)


def wgan_critic_loss(real_scores, fake_scores):
    """Mean real score minus mean fake score (the critic maximizes this)."""
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("wgan_critic_loss needs non-empty score vectors")
    return real_scores.mean() - fake_scores.mean()


def generator_adv_term(fake_scores):
    return -fake_scores.mean()


def adv_loss(global_term, local_term):
    return global_term + local_term


def hole_box(mask) -> tuple[int, int, int, int]:
    """Square box ``(top, left, side_h, side_w)`` around every hole pixel, clamped to the frame."""
    m = mask.reshape(mask.shape[-2:])
    rows, cols = torch.nonzero(m < 0.5, as_tuple=True)
    if rows.numel() == 0:
        raise NoHoleError("mask has no hole pixels")
    h, w = m.shape
    r0, r1 = int(rows.min()), int(rows.max())
    c0, c1 = int(cols.min()), int(cols.max())
    side = max(r1 - r0 + 1, c1 - c0 + 1)

    def expand(lo, hi, limit):
        s = min(side, limit)
        start = lo - (s - (hi - lo + 1)) // 2
        start = min(max(start, 0), limit - s)
        return start, s

    top, sh = expand(r0, r1, h)
    left, sw = expand(c0, c1, w)
    return top, left, sh, sw


def extract_local_patch(image, mask, resolution: int):
    """Crop the square hole box of each image and resize it to ``resolution``.

    ``image`` is ``(C, H, W)`` with a ``(1, H, W)`` mask, or a batch of both.
    """
    if image.ndim == 3:
        return extract_local_patch(image[None], mask[None], resolution)[0]
    patches = []
    for img, m in zip(image, mask):
        top, left, sh, sw = hole_box(m)
        crop = img[None, :, top:top + sh, left:left + sw]
        patches.append(
            F.interpolate(crop, size=(resolution, resolution), mode="bilinear", align_corners=False)
        )
    return torch.cat(patches)


def clip_weights(critic: nn.Module, c: float) -> None:
    with torch.no_grad():
        for p in critic.parameters():
            p.clamp_(-c, c)


def gradient_penalty(critic: nn.Module, real, fake, weight: float, generator=None):
    """``weight * mean((||grad D(x_hat)||_2 - 1)^2)`` on random interpolates."""
    eps = torch.rand((real.shape[0], 1, 1, 1), generator=generator, dtype=real.dtype)
    x_hat = (eps * real + (1 - eps) * fake).detach().requires_grad_(True)
    scores = critic(x_hat)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grad.flatten(1).norm(dim=1)
    return penalty_from_norms(norms, weight)


def penalty_from_norms(norms, weight: float):
    return weight * torch.mean((norms - 1.0) ** 2)


def lipschitz_control(critic: nn.Module, cfg: CriticConfig, real=None, fake=None, generator=None):
    """Clamp critic weights (clip mode) or return the gradient penalty (gp mode).

    Clip mode is called after each critic step and returns zero; gp mode is
    added to the critic loss before the step.
    """
    if cfg.lipschitz == "clip":
        clip_weights(critic, cfg.clip_value)
        return torch.zeros(())
    return gradient_penalty(critic, real, fake, cfg.gp_weight, generator)
