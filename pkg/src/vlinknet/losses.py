"""Generator-side losses and their weighted aggregations.

All norms are reduced by the mean over elements so magnitudes do not depend
on resolution.  Feature-space losses take a frozen ``FeatureExtractor``
returning a list of feature maps; per-layer values are summed.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from vlinknet.gradops import grad_magnitude, sobel_xy
from vlinknet.imagecore import DimensionError, apply_mask, reverse_mask

EXTRACTOR_SEED = 20220318


class ExtractorError(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda_edge: float = 0.5
    alpha_vgg: float = 0.5
    alpha_rm: float = 0.3
    alpha_pix: float = 0.1
    tt_contextual: float = 0.4
    tt_perceptual: float = 0.6
    k_pix: float = 1.0
    # optional pretraining term for the third-block feature edge loss
    feature_edge: float = 0.0
    feature_edge_symmetric: bool = True

    def __post_init__(self):
        for name, value in asdict(self).items():
            if isinstance(value, float) and value < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {value}")


class FeatureExtractor(nn.Module):
    """Frozen, deterministic image -> list of feature maps."""

    def __init__(self):
        super().__init__()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # frozen extractors never switch to training behaviour
        return super().train(False)

    def identity_hash(self) -> str:
        h = hashlib.sha256(type(self).__name__.encode())
        for name, t in self.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """Spatially averaged deepest feature map, one row per batch element."""
        return self(x)[-1].mean(dim=(-2, -1))


class IdentityExtractor(FeatureExtractor):
    def forward(self, x):
        return [x]


class RandomPyramidExtractor(FeatureExtractor):
    """Three conv blocks with fixed random weights, features at strides 1, 2 and 4.

    Stands in for a pretrained VGG; ``weights_path`` loads an external state
    dict for the same topology.
    """

    def __init__(self, in_channels: int = 3, widths=(16, 32, 64), seed: int = EXTRACTOR_SEED,
                 weights_path=None):
        super().__init__()
        convs, ch = [], in_channels
        for i, w in enumerate(widths):
            convs.append(nn.Conv2d(ch, w, 3, stride=1 if i == 0 else 2, padding=1))
            ch = w
        self.convs = nn.ModuleList(convs)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.weight[0].numel()
                conv.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=g)
                conv.bias.zero_()
        if weights_path is not None:
            self.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
        self.freeze()

    def forward(self, x):
        feats = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            feats.append(x)
        return feats


def _features(phi, x):
    try:
        feats = phi(x)
    except DimensionError:
        raise
    except Exception as exc:
        raise ExtractorError(f"feature extractor failed on input {tuple(x.shape)}: {exc}") from exc
    return list(feats)


def _same(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def latent_loss(feat_a, feat_b):
    """MSE between the deepest features of the two encoder branches."""
    _same(feat_a, feat_b, "latent_loss")
    return torch.mean((feat_a - feat_b) ** 2)


def edge_loss(gt, pred):
    """MSE between Sobel gradient magnitudes of ground truth and prediction."""
    _same(gt, pred, "edge_loss")
    return torch.mean((grad_magnitude(sobel_xy(gt)) - grad_magnitude(sobel_xy(pred))) ** 2)


def feature_edge_loss(tap3_a, tap3_b, symmetric: bool = True):
    """Gradient-magnitude MSE between third-block features of both branches.

    With ``symmetric=False`` only the first branch is differentiated, which
    compares a gradient map against raw features.
    """
    _same(tap3_a, tap3_b, "feature_edge_loss")
    grad_a = grad_magnitude(sobel_xy(tap3_a))
    other = grad_magnitude(sobel_xy(tap3_b)) if symmetric else tap3_b
    return torch.mean((grad_a - other) ** 2)


def edge_combined(l_phi, l_edge, w: LossWeights):
    lam = w.lambda_edge
    return lam * l_phi + (1.0 - lam) * l_edge


def pixel_loss(gt, pred, w: LossWeights):
    _same(gt, pred, "pixel_loss")
    return w.k_pix * torch.mean(torch.abs(gt - pred))


def perceptual_loss(gt, pred, phi):
    _same(gt, pred, "perceptual_loss")
    return sum(torch.mean((a - b) ** 2) for a, b in zip(_features(phi, gt), _features(phi, pred)))


def reverse_mask_loss(gt, composed, mask, phi):
    """L1 feature distance between the reverse-masked truth and the composition."""
    _same(gt, composed, "reverse_mask_loss")
    target = _features(phi, apply_mask(gt, reverse_mask(mask)))
    return sum(torch.mean(torch.abs(a - b)) for a, b in zip(target, _features(phi, composed)))


def contextual_loss(gt, pred, mask, phi):
    """MSE in feature space between the reverse-masked truth and the masked prediction."""
    _same(gt, pred, "contextual_loss")
    target = _features(phi, apply_mask(gt, reverse_mask(mask)))
    return sum(
        torch.mean((a - b) ** 2) for a, b in zip(target, _features(phi, apply_mask(pred, mask)))
    )


def total_loss(l_vgg, l_rm, l_pix, w: LossWeights):
    return w.alpha_vgg * l_vgg + w.alpha_rm * l_rm + w.alpha_pix * l_pix


def final_loss(l_t, l_adv):
    return l_t + l_adv
