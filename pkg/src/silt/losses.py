"""Loss terms for two-branch lighting transfer and the frozen feature extractors.

All terms are size-normalised (means rather than sums), so weights do not
depend on image resolution. Images passed here are [0, 1] NCHW tensors unless
stated otherwise; discriminator scores are raw patch maps.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import torch
import torch.nn as nn

from .imaging import hadamard, spatial_gradient_t

STAGE_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
# slice boundaries in torchvision's vgg19().features: relu1_1 ... relu5_1
VGG19_TAPS = (2, 7, 12, 21, 30)
VGG19_WIDTHS = (64, 128, 256, 512, 512)
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)

TERMS = ("l_g", "l_os", "l_cp", "l_r", "l_dcp")


@dataclass
class LossWeights:
    w_gan: float = 1.0
    w_os: float = 10.0
    w_cp: float = 10.0
    w_r: float = 1.0
    w_dcp: float = 10.0
    os_includes_l1: bool = True
    os_includes_gradient: bool = True

    def validate(self) -> None:
        for f in ("w_gan", "w_os", "w_cp", "w_r", "w_dcp"):
            v = getattr(self, f)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"loss weight {f} must be a finite non-negative number, got {v}")

    def weight_for(self, term: str) -> float:
        w = {"l_g": self.w_gan, "l_os": self.w_os, "l_cp": self.w_cp, "l_r": self.w_r, "l_dcp": self.w_dcp}[term]
        if term == "l_os" and not (self.os_includes_l1 or self.os_includes_gradient):
            return 0.0
        return w

    def enabled(self, term: str) -> bool:
        return self.weight_for(term) > 0


@dataclass
class LossReport:
    l_g: float = 0.0
    l_d: float = 0.0
    l_os: float = 0.0
    l_cp: float = 0.0
    l_r: float = 0.0
    l_dcp: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def as_dict(self):
        return asdict(self)


# -- adversarial ------------------------------------------------------------

def _check_scores(scores, name):
    if not scores:
        raise ValueError(f"{name} must be a non-empty list of score maps")


def loss_gan_generator(fake_scores: Sequence[torch.Tensor]) -> torch.Tensor:
    _check_scores(fake_scores, "fake_scores")
    return torch.stack([((s - 1) ** 2).mean() for s in fake_scores]).mean()


def loss_gan_discriminator(real_scores, fake_scores) -> torch.Tensor:
    _check_scores(real_scores, "real_scores")
    _check_scores(fake_scores, "fake_scores")
    real = torch.stack([((s - 1) ** 2).mean() for s in real_scores]).mean()
    fake = torch.stack([(s ** 2).mean() for s in fake_scores]).mean()
    return real + fake


# -- pixel-space terms ------------------------------------------------------

def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_output_similarity(a, b, l1: bool = True, gradient: bool = True) -> torch.Tensor:
    """L1 between the two branch outputs plus L1 between their spatial gradients.

    Each sub-term can be switched off to reproduce the L1-only and
    gradient-augmented variants.
    """
    _same_shape(a, b, "output similarity")
    loss = a.new_zeros(())
    if l1:
        loss = loss + (a - b).abs().mean()
    if gradient:
        ga = spatial_gradient_t(a)
        gb = spatial_gradient_t(b)
        loss = loss + (ga.dx - gb.dx).abs().mean() + (ga.dy - gb.dy).abs().mean()
    return loss


def loss_decomposition(i, r, s) -> torch.Tensor:
    """Mean absolute residual of ``i`` against ``r * s``."""
    recon = hadamard(r, s, channel_axis=1 if r.ndim == 4 else -1)
    _same_shape(i, recon, "decomposition")
    return (i - recon).abs().mean()


def loss_reflectance(r_a, r_b) -> torch.Tensor:
    _same_shape(r_a, r_b, "reflectance")
    return ((r_a - r_b) ** 2).mean()


# -- perceptual -------------------------------------------------------------

class FeatureExtractor(nn.Module):
    """Five-stage frozen feature pyramid with per-stage L1 weights."""

    def __init__(self, stages: nn.ModuleList, kind: str, mean, std, weights=STAGE_WEIGHTS):
        super().__init__()
        if len(stages) != len(weights):
            raise ValueError("one weight per stage required")
        self.kind = kind
        self.stages = stages
        self.weights = tuple(float(w) for w in weights)
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, -1, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        h = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats


def _vgg_layout(widths, ceil_mode=False):
    """torchvision's vgg19().features layout, truncated after relu5_1."""
    convs_per_block = (2, 2, 4, 4, 4)
    layers = []
    c_in = 3
    for block, (width, n) in enumerate(zip(widths, convs_per_block)):
        if block:
            layers.append(nn.MaxPool2d(2, 2, ceil_mode=ceil_mode))
        for _ in range(n if block < 4 else 1):
            layers += [nn.Conv2d(c_in, width, 3, padding=1), nn.ReLU(inplace=False)]
            c_in = width
    return layers


def _slice(layers):
    stages, start = [], 0
    for end in VGG19_TAPS:
        stages.append(nn.Sequential(*layers[start:end]))
        start = end
    return nn.ModuleList(stages)


def random_pyramid_extractor(widths=(8, 16, 32, 64, 64), seed: int = 0, weights=STAGE_WEIGHTS) -> FeatureExtractor:
    """VGG19-topology pyramid with fixed He-initialised random weights.

    The weights depend only on ``seed`` and ``widths``; the global RNG is
    left untouched. Pools round up, so inputs as small as 1x1 still reach
    the last stage.
    """
    layers = _vgg_layout(widths, ceil_mode=True)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in layers:
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                m.bias.zero_()
    # centre [0, 1] inputs on zero, matching the generator's domain
    return FeatureExtractor(_slice(layers), "random", (0.5, 0.5, 0.5), (0.5, 0.5, 0.5), weights)


def vgg19_extractor(pretrained: bool = True, weights_path=None, weights=STAGE_WEIGHTS) -> FeatureExtractor:
    """ImageNet VGG19 features tapped at relu1_1 ... relu5_1.

    ``weights_path`` may point at a local torchvision state dict; otherwise
    torchvision's download cache is used. ``pretrained=False`` is only
    useful for inspecting the architecture.
    """
    from torchvision.models import VGG19_Weights, vgg19

    if weights_path is not None:
        net = vgg19(weights=None)
        net.load_state_dict(torch.load(weights_path, map_location="cpu"))
    elif pretrained:
        try:
            net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
        except Exception as exc:
            raise RuntimeError(
                "pretrained VGG19 weights unavailable; pass a local weights_path "
                "or use the 'random' extractor"
            ) from exc
    else:
        net = vgg19(weights=None)
    layers = list(net.features.children())[: VGG19_TAPS[-1]]
    for i, m in enumerate(layers):
        if isinstance(m, nn.ReLU):
            layers[i] = nn.ReLU(inplace=False)
    return FeatureExtractor(_slice(layers), "vgg19", _IMAGENET_MEAN, _IMAGENET_STD, weights)


def build_extractor(kind: str = "random", seed: int = 0, widths=(8, 16, 32, 64, 64),
                    pretrained: bool = True, weights_path=None) -> FeatureExtractor:
    if kind == "random":
        return random_pyramid_extractor(tuple(widths), seed=seed)
    if kind == "vgg19":
        return vgg19_extractor(pretrained=pretrained, weights_path=weights_path)
    raise ValueError(f"unknown extractor kind {kind!r} (expected 'random' or 'vgg19')")


def loss_content(extractor: FeatureExtractor, input_img, output_img) -> torch.Tensor:
    """Weighted per-stage L1 between the features of two images."""
    _same_shape(input_img, output_img, "content")
    fa = extractor(input_img)
    fb = extractor(output_img)
    loss = input_img.new_zeros(())
    for w, a, b in zip(extractor.weights, fa, fb):
        loss = loss + w * (a - b).abs().mean()
    return loss


# -- totals -----------------------------------------------------------------

def _scalar(v) -> float:
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def total_generator_loss(terms: Mapping[str, torch.Tensor | float | None], weights: LossWeights):
    """Weighted sum of the enabled generator-side terms.

    Terms whose weight is zero are left out of the sum entirely (not
    multiplied by zero) and reported as 0. Returns ``(total, report)``;
    the report's discriminator fields are left for the caller.
    """
    weights.validate()
    total = None
    values = {}
    for name in TERMS:
        w = weights.weight_for(name)
        value = terms.get(name)
        if w == 0:
            values[name] = 0.0
            continue
        if value is None:
            raise ValueError(f"term {name} is enabled (weight {w}) but was not provided")
        contrib = w * value
        total = contrib if total is None else total + contrib
        values[name] = _scalar(value)
    if total is None:
        total = torch.zeros(())
    report = LossReport(**values, total_g=_scalar(total))
    return total, report
