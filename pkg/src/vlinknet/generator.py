"""Dual-encoder generator with recursive residual fusion and a bilinear decoder.

Two encoder branches see complementary views of the ground truth (known
pixels and hole pixels).  Their deepest features are fused either by the
residual pooling/convolution transition layer (``"rstl"``) or by the
softmax-attention ablation (``"vn1"``) before a decoder of bilinear
upsampling stages maps them back to an image.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from vlinknet.imagecore import DimensionError, apply_mask, reverse_mask

N_ENCODER_BLOCKS = 8
ALLOWED_DILATIONS = {1, 2, 4, 8, 16}


class NumericInstabilityError(FloatingPointError):
    """Raised when an activation becomes NaN or infinite."""


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    dilation: int = 1
    batchnorm: bool = True
    maxpool: bool = True
    dropout: float = 0.0


@dataclass
class GeneratorConfig:
    base_channels: int = 8
    input_resolution: int = 64
    in_channels: int = 3
    channel_mults: tuple[int, ...] = (1, 2, 4, 8, 8, 8, 8, 8)
    dilations: tuple[int, ...] = (1, 1, 2, 4, 8, 16, 16, 16)
    n_pooled: int = 5
    dropout_a: float = 0.2
    dropout_b: float = 0.0
    decoder_mults: tuple[int, ...] = (8, 4, 2, 1, 1)
    rstl_dilation: int = 16
    refine_dilation: int = 2
    fusion: str = "rstl"
    seed: int = 0
    check_finite: bool = True

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        self.dilations = tuple(self.dilations)
        self.decoder_mults = tuple(self.decoder_mults)
        if len(self.channel_mults) != N_ENCODER_BLOCKS or len(self.dilations) != N_ENCODER_BLOCKS:
            raise ConfigurationError(f"encoder needs exactly {N_ENCODER_BLOCKS} blocks")
        if not set(self.dilations) <= ALLOWED_DILATIONS:
            raise ConfigurationError(f"dilations must be drawn from {sorted(ALLOWED_DILATIONS)}")
        if self.fusion not in ("rstl", "vn1"):
            raise ConfigurationError(f"unknown fusion variant {self.fusion!r}")
        if len(self.decoder_mults) != self.n_pooled:
            raise ConfigurationError("one decoder stage per pooled encoder block is required")
        if self.input_resolution % (2**self.n_pooled):
            raise ConfigurationError(
                f"input_resolution {self.input_resolution} not divisible by 2**{self.n_pooled}"
            )

    def encoder_blocks(self, branch: str) -> list[BlockSpec]:
        drop = self.dropout_a if branch == "A" else self.dropout_b
        blocks = []
        for i, (mult, dil) in enumerate(zip(self.channel_mults, self.dilations)):
            pooled = i < self.n_pooled
            blocks.append(
                BlockSpec(
                    out_channels=self.base_channels * mult,
                    dilation=dil,
                    batchnorm=pooled,
                    maxpool=pooled,
                    dropout=0.0 if pooled else drop,
                )
            )
        return blocks

    @property
    def feature_channels(self) -> int:
        return self.base_channels * self.channel_mults[-1]

    @property
    def decoder_in_channels(self) -> int:
        return self.base_channels * self.decoder_mults[0]

    def to_dict(self) -> dict:
        return asdict(self)


class SeededDropout(nn.Module):
    """Dropout drawing its masks from an attached ``torch.Generator``."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p
        self.generator: torch.Generator | None = None

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = torch.rand(x.shape, generator=self.generator, dtype=x.dtype, device=x.device)
        return x * (keep >= self.p).to(x.dtype) / (1.0 - self.p)


class EncoderBlock(nn.Module):
    def __init__(self, in_ch: int, spec: BlockSpec):
        super().__init__()
        d = spec.dilation
        self.spec = spec
        self.conv = nn.Conv2d(in_ch, spec.out_channels, 3, padding=d, dilation=d)
        self.bn = nn.BatchNorm2d(spec.out_channels) if spec.batchnorm else None
        self.pool = nn.MaxPool2d(2, 2) if spec.maxpool else None
        self.drop = SeededDropout(spec.dropout) if spec.dropout > 0 else None

    def forward(self, x):
        x = self.conv(x)
        if self.bn is not None:
            x = self.bn(x)
        x = F.elu(x)
        if self.pool is not None:
            x = self.pool(x)
        if self.drop is not None:
            x = self.drop(x)
        return x


class EncoderTaps(NamedTuple):
    final: torch.Tensor
    tap3: torch.Tensor


class Encoder(nn.Module):
    """Stack of dilated convolution blocks; returns the last and third block outputs."""

    def __init__(self, in_channels: int, blocks: list[BlockSpec], check_finite: bool = True):
        super().__init__()
        layers, ch = [], in_channels
        for spec in blocks:
            layers.append(EncoderBlock(ch, spec))
            ch = spec.out_channels
        self.blocks = nn.ModuleList(layers)
        self.out_channels = ch
        self.check_finite = check_finite

    def forward(self, x) -> EncoderTaps:
        tap3 = None
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if self.check_finite and not torch.isfinite(x).all():
                raise NumericInstabilityError(f"non-finite activation after encoder block {i}")
            if i == 3:
                tap3 = x
        return EncoderTaps(x, x if tap3 is None else tap3)


def maxpool_same(x: torch.Tensor) -> torch.Tensor:
    """2x2 max pooling with stride 1; right/bottom edge replicated to keep the size."""
    return F.max_pool2d(F.pad(x, (0, 1, 0, 1), mode="replicate"), 2, stride=1)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"fusion inputs differ: {tuple(a.shape)} vs {tuple(b.shape)}")


class RSTL(nn.Module):
    """Residual transition: ``X + ELU(conv_d16(maxpool(ELU(X))))`` then a dilated projection."""

    def __init__(self, in_channels: int, out_channels: int, dilation: int = 16, refine_dilation: int = 2):
        super().__init__()
        c = 2 * in_channels
        self.gate = nn.Conv2d(c, c, 3, padding=dilation, dilation=dilation)
        self.refine = nn.Conv2d(c, out_channels, 3, padding=refine_dilation, dilation=refine_dilation)

    def residual(self, feat_a, feat_b):
        """The fused map before the refinement projection."""
        _check_pair(feat_a, feat_b)
        x = torch.cat([feat_a, feat_b], dim=1)
        gated = F.elu(self.gate(maxpool_same(F.elu(x))))
        return gated + x

    def forward(self, feat_a, feat_b):
        return self.refine(self.residual(feat_a, feat_b))


class VN1Fusion(nn.Module):
    """Ablation fusion: per-branch 1x1 projections, channel softmax as attention, no pooling."""

    def __init__(self, in_channels: int, out_channels: int, refine_dilation: int = 2):
        super().__init__()
        self.proj_a = nn.Conv2d(in_channels, in_channels, 1)
        self.proj_b = nn.Conv2d(in_channels, in_channels, 1)
        c = 2 * in_channels
        self.refine = nn.Conv2d(c, out_channels, 3, padding=refine_dilation, dilation=refine_dilation)

    def weights(self, feat_a, feat_b):
        _check_pair(feat_a, feat_b)
        logits = torch.cat([self.proj_a(feat_a), self.proj_b(feat_b)], dim=1)
        return torch.softmax(logits, dim=1)

    def residual(self, feat_a, feat_b):
        _check_pair(feat_a, feat_b)
        x = torch.cat([feat_a, feat_b], dim=1)
        return self.weights(feat_a, feat_b) * x + x

    def forward(self, feat_a, feat_b):
        return self.refine(self.residual(feat_a, feat_b))


class Decoder(nn.Module):
    """Bilinear x2 upsampling stages (conv, BN, ELU) and a final Tanh convolution."""

    def __init__(self, in_channels: int, stage_channels: list[int], out_channels: int = 3):
        super().__init__()
        stages, ch = [], in_channels
        for out in stage_channels:
            stages.append(
                nn.Sequential(nn.Conv2d(ch, out, 3, padding=1), nn.BatchNorm2d(out), nn.ELU())
            )
            ch = out
        self.stages = nn.ModuleList(stages)
        self.final = nn.Conv2d(ch, out_channels, 3, padding=1)

    def forward(self, x, return_stages: bool = False):
        sizes = []
        for stage in self.stages:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = stage(x)
            sizes.append(tuple(x.shape[-2:]))
        out = torch.tanh(self.final(x))
        return (out, sizes) if return_stages else out


def init_parameters(module: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform init drawn from a generator seeded with ``seed``."""
    g = torch.Generator().manual_seed(seed)
    for name, p in module.named_parameters():
        if p.ndim > 1:
            fan_in = p[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                p.uniform_(-bound, bound, generator=g)
        elif name.endswith("bias"):
            with torch.no_grad():
                p.zero_()


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = cfg = config or GeneratorConfig()
        self.encoder_a = Encoder(cfg.in_channels, cfg.encoder_blocks("A"), cfg.check_finite)
        self.encoder_b = Encoder(cfg.in_channels, cfg.encoder_blocks("B"), cfg.check_finite)
        feat = cfg.feature_channels
        if cfg.fusion == "rstl":
            self.fusion = RSTL(feat, cfg.decoder_in_channels, cfg.rstl_dilation, cfg.refine_dilation)
        else:
            self.fusion = VN1Fusion(feat, cfg.decoder_in_channels, cfg.refine_dilation)
        stages = [cfg.base_channels * m for m in cfg.decoder_mults]
        self.decoder = Decoder(cfg.decoder_in_channels, stages, cfg.in_channels)
        init_parameters(self, cfg.seed)
        self.rng = torch.Generator().manual_seed(cfg.seed)
        for m in self.modules():
            if isinstance(m, SeededDropout):
                m.generator = self.rng

    def encode(self, gt, mask):
        taps_a = self.encoder_a(apply_mask(gt, mask))
        taps_b = self.encoder_b(apply_mask(gt, reverse_mask(mask)))
        return taps_a, taps_b

    def forward(self, gt, mask):
        """Return ``(pred, taps_a, taps_b)`` for a ``(N, C, H, W)`` batch."""
        res = self.config.input_resolution
        if tuple(gt.shape[-2:]) != (res, res):
            raise DimensionError(f"generator expects {res}x{res} input, got {tuple(gt.shape[-2:])}")
        taps_a, taps_b = self.encode(gt, mask)
        pred = self.decoder(self.fusion(taps_a.final, taps_b.final))
        if tuple(pred.shape[-2:]) != (res, res):
            raise ConfigurationError(f"decoder produced {tuple(pred.shape[-2:])}, expected {res}x{res}")
        return pred, taps_a, taps_b

    @torch.no_grad()
    def inpaint(self, masked, mask):
        """Inference on already-masked inputs; hole content is never observed."""
        was_training = self.training
        self.eval()
        try:
            pred, _, _ = self(apply_mask(masked, mask), mask)
        finally:
            self.train(was_training)
        return pred
