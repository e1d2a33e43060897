"""Generator, decomposition network and multi-scale patch discriminator.

The generator follows the pix2pixHD global generator layout (7x7 stem,
strided downsampling, residual trunk, transposed-conv upsampling, tanh head).
The decomposition net is a shared U-Net encoder feeding two decoder heads,
one for reflectance and one for shading, each ending in a sigmoid.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import check_network_size

CHECKPOINT_FORMAT = "silt-checkpoint/1"


class CheckpointError(RuntimeError):
    pass


UPSAMPLE_MODES = ("transpose", "resize")
NORM_MODES = ("instance", "none")


def _check_upsample(mode):
    if mode not in UPSAMPLE_MODES:
        raise ValueError(f"upsample must be one of {UPSAMPLE_MODES}, got {mode!r}")


@dataclass
class GeneratorConfig:
    base_channels: int = 64
    n_downsample: int = 3
    n_resblocks: int = 9
    n_upsample: int = 3
    input_channels: int = 3
    output_channels: int = 3
    upsample: str = "transpose"

    def validate(self) -> None:
        if min(self.base_channels, self.input_channels, self.output_channels) < 1:
            raise ValueError(f"generator channel counts must be >= 1: {self}")
        _check_upsample(self.upsample)
        if self.n_downsample != self.n_upsample:
            raise ValueError("generator n_downsample must equal n_upsample")
        if self.n_downsample < 1 or self.n_resblocks < 0:
            raise ValueError(f"invalid generator topology: {self}")


@dataclass
class DecompositionConfig:
    base_channels: int = 64
    depth: int = 4
    input_channels: int = 3
    shading_channels: int = 3
    upsample: str = "transpose"
    # instance norm discards the absolute intensity that R * S = I must reproduce
    norm: str = "none"

    def validate(self) -> None:
        _check_upsample(self.upsample)
        if self.norm not in NORM_MODES:
            raise ValueError(f"decomposition norm must be one of {NORM_MODES}, got {self.norm!r}")
        if min(self.base_channels, self.input_channels) < 1:
            raise ValueError(f"decomposition channel counts must be >= 1: {self}")
        if self.shading_channels not in (1, 3):
            raise ValueError(f"shading_channels must be 1 or 3, got {self.shading_channels}")
        if self.depth < 1:
            raise ValueError(f"decomposition depth must be >= 1, got {self.depth}")


@dataclass
class DiscriminatorConfig:
    n_scales: int = 2
    layers_per_scale: int = 4
    base_channels: int = 64
    input_channels: int = 3
    max_channels: int = 512

    def validate(self) -> None:
        if min(self.n_scales, self.layers_per_scale, self.base_channels, self.input_channels) < 1:
            raise ValueError(f"invalid discriminator config: {self}")

    @property
    def n_strided(self) -> int:
        # pix2pixHD: every feature layer but the last halves the resolution
        return max(self.layers_per_scale - 1, 0)


class InstanceNorm(nn.InstanceNorm2d):
    """Affine-free instance norm that tolerates 1x1 maps (normalises them to 0)."""

    def forward(self, x):
        if x.shape[-1] * x.shape[-2] == 1:
            return x - x
        return super().forward(x)


class Pad(nn.Module):
    """Reflection padding, degrading to replicate when the map is too small."""

    def __init__(self, p: int):
        super().__init__()
        self.p = p

    def forward(self, x):
        mode = "reflect" if min(x.shape[-2:]) > self.p else "replicate"
        return F.pad(x, (self.p,) * 4, mode=mode)

    def extra_repr(self):
        return str(self.p)


def upsample_conv(c_in: int, c_out: int, mode: str = "transpose") -> list:
    """Stride-2 upsampling by a 3x3 kernel.

    ``transpose`` is the pix2pixHD transposed convolution; ``resize`` is
    bilinear x2 followed by a 3x3 convolution, which has the same parameter
    count but no checkerboard pattern at initialisation.
    """
    if mode == "transpose":
        return [nn.ConvTranspose2d(c_in, c_out, 3, stride=2, padding=1, output_padding=1)]
    return [nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False), Pad(1), nn.Conv2d(c_in, c_out, 3)]


class ResnetBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.block = nn.Sequential(
            Pad(1), nn.Conv2d(dim, dim, 3), InstanceNorm(dim), nn.ReLU(True),
            Pad(1), nn.Conv2d(dim, dim, 3), InstanceNorm(dim),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ngf = cfg.base_channels
        layers = [Pad(3), nn.Conv2d(cfg.input_channels, ngf, 7), InstanceNorm(ngf), nn.ReLU(True)]
        for i in range(cfg.n_downsample):
            c = ngf * 2 ** i
            layers += [nn.Conv2d(c, c * 2, 3, stride=2, padding=1), InstanceNorm(c * 2), nn.ReLU(True)]
        c = ngf * 2 ** cfg.n_downsample
        layers += [ResnetBlock(c) for _ in range(cfg.n_resblocks)]
        for i in range(cfg.n_upsample):
            c = ngf * 2 ** (cfg.n_upsample - i)
            layers += [
                *upsample_conv(c, c // 2, cfg.upsample),
                InstanceNorm(c // 2),
                nn.ReLU(True),
            ]
        layers += [Pad(3), nn.Conv2d(ngf, cfg.output_channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        check_network_size(*x.shape[-2:], multiple=2 ** self.cfg.n_downsample)
        return self.model(x)


def _norm(c, kind="instance"):
    return InstanceNorm(c) if kind == "instance" else nn.Identity()


def _conv_block(c_in, c_out, stride=1, norm="instance"):
    return [nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1), _norm(c_out, norm), nn.ReLU(True)]


class _DecoderHead(nn.Module):
    def __init__(self, widths, out_channels, upsample="transpose", norm="instance"):
        super().__init__()
        self.ups = nn.ModuleList()
        self.fuse = nn.ModuleList()
        for c_deep, c_skip in zip(widths[:0:-1], widths[-2::-1]):
            self.ups.append(nn.Sequential(
                *upsample_conv(c_deep, c_skip, upsample),
                _norm(c_skip, norm), nn.ReLU(True),
            ))
            self.fuse.append(nn.Sequential(*_conv_block(2 * c_skip, c_skip, norm=norm)))
        self.out = nn.Conv2d(widths[0], out_channels, 3, padding=1)

    def forward(self, feats):
        x = feats[-1]
        for up, fuse, skip in zip(self.ups, self.fuse, feats[-2::-1]):
            x = fuse(torch.cat([up(x), skip], dim=1))
        return torch.sigmoid(self.out(x))


class DecompositionNet(nn.Module):
    """``{R, S} = net(I)``; takes a network-domain image, returns [0, 1] maps."""

    def __init__(self, cfg: DecompositionConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = [cfg.base_channels * 2 ** i for i in range(cfg.depth)]
        self.widths = widths
        n = cfg.norm
        enc = [nn.Sequential(*_conv_block(cfg.input_channels, widths[0], norm=n), *_conv_block(widths[0], widths[0], norm=n))]
        for c_prev, c in zip(widths, widths[1:]):
            enc.append(nn.Sequential(*_conv_block(c_prev, c, stride=2, norm=n), *_conv_block(c, c, norm=n)))
        self.encoder = nn.ModuleList(enc)
        self.reflectance_head = _DecoderHead(widths, 3, cfg.upsample, n)
        self.shading_head = _DecoderHead(widths, cfg.shading_channels, cfg.upsample, n)

    def forward(self, x):
        check_network_size(*x.shape[-2:], multiple=2 ** (self.cfg.depth - 1))
        feats = []
        for stage in self.encoder:
            x = stage(x)
            feats.append(x)
        return self.reflectance_head(feats), self.shading_head(feats)


class PatchDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        ndf = cfg.base_channels
        layers = [nn.Conv2d(cfg.input_channels, ndf, 4, stride=2, padding=2), nn.LeakyReLU(0.2, True)]
        c = ndf
        for i in range(1, cfg.layers_per_scale):
            c_next = min(c * 2, cfg.max_channels)
            stride = 2 if i < cfg.n_strided else 1
            layers += [nn.Conv2d(c, c_next, 4, stride=stride, padding=2), InstanceNorm(c_next), nn.LeakyReLU(0.2, True)]
            c = c_next
        layers.append(nn.Conv2d(c, 1, 4, stride=1, padding=2))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class MultiscaleDiscriminator(nn.Module):
    """Raw (sigmoid-free) patch scores at successively halved resolutions."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.scales = nn.ModuleList(PatchDiscriminator(cfg) for _ in range(cfg.n_scales))
        self.downsample = nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False)

    def min_input_size(self) -> int:
        return 4 * 2 ** (self.cfg.n_scales - 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if min(h, w) < self.min_input_size():
            raise ValueError(
                f"input {h}x{w} too small for a {self.cfg.n_scales}-scale discriminator "
                f"(need >= {self.min_input_size()})"
            )
        out = []
        for i, d in enumerate(self.scales):
            if i:
                x = self.downsample(x)
            out.append(d(x))
        return out


def init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.normal_(module.weight, 0.0, 0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def build_generator(cfg: GeneratorConfig) -> Generator:
    g = Generator(cfg)
    g.apply(init_weights)
    return g


def init_weights_he(module: nn.Module) -> None:
    # without normalisation the 0.02 init would shrink activations layer by layer
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
        nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def build_decomposition(cfg: DecompositionConfig) -> DecompositionNet:
    net = DecompositionNet(cfg)
    net.apply(init_weights if cfg.norm == "instance" else init_weights_he)
    return net


def build_discriminator(cfg: DiscriminatorConfig) -> MultiscaleDiscriminator:
    d = MultiscaleDiscriminator(cfg)
    d.apply(init_weights)
    return d


def decompose(net: DecompositionNet, x: torch.Tensor):
    """Split a network-domain NCHW batch into reflectance and shading in [0, 1]."""
    return net(x)


def discriminate(d: MultiscaleDiscriminator, x: torch.Tensor):
    return d(x)


@dataclass
class ModelConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    decomposition: DecompositionConfig = field(default_factory=DecompositionConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    decomposition_mode: str = "learnt"

    def resolved(self) -> "ModelConfig":
        """Copy with the generator's channel counts tied to the shading maps."""
        if self.decomposition_mode not in ("none", "learnt"):
            raise ValueError(f"decomposition_mode must be 'none' or 'learnt', got {self.decomposition_mode!r}")
        g = GeneratorConfig(**asdict(self.generator))
        if self.decomposition_mode == "learnt":
            g.input_channels = g.output_channels = self.decomposition.shading_channels
        else:
            g.input_channels = g.output_channels = 3
        return ModelConfig(
            generator=g,
            decomposition=DecompositionConfig(**asdict(self.decomposition)),
            discriminator=DiscriminatorConfig(**asdict(self.discriminator)),
            decomposition_mode=self.decomposition_mode,
        )


class ModelBundle(nn.Module):
    """The trainable networks plus the frozen perceptual extractor."""

    def __init__(self, cfg: ModelConfig, extractor: nn.Module | None = None):
        super().__init__()
        cfg = cfg.resolved()
        self.cfg = cfg
        self.generator = build_generator(cfg.generator)
        self.decomposition_net = build_decomposition(cfg.decomposition) if cfg.decomposition_mode == "learnt" else None
        self.discriminator = build_discriminator(cfg.discriminator)
        self.extractor = extractor

    @property
    def learnt(self) -> bool:
        return self.decomposition_net is not None

    def relight(self, x: torch.Tensor, return_maps: bool = False):
        """Network-domain image batch -> [0, 1] relit batch (and optionally R, S, S_hat)."""
        if self.learnt:
            r, s = self.decomposition_net(x)
            s_hat = (self.generator(s * 2 - 1) + 1) / 2
            out = r * s_hat
        else:
            r = s = None
            s_hat = out = (self.generator(x) + 1) / 2
        if return_maps:
            return out, r, s, s_hat
        return out

    @property
    def total_params(self) -> int:
        return count_params(self)[0]

    @property
    def trainable_params(self) -> int:
        return count_params(self)[1]

    def inference_modules(self):
        mods = [self.generator]
        if self.learnt:
            mods.insert(0, self.decomposition_net)
        return mods


def count_params(bundle: nn.Module):
    """``(total, trainable)`` parameter counts, summed tensor by tensor."""
    total = trainable = 0
    for p in bundle.parameters():
        total += p.numel()
        if p.requires_grad:
            trainable += p.numel()
    return total, trainable


def _conv_cost(mod, inp, out) -> int:
    k = mod.kernel_size[0] * mod.kernel_size[1]
    per_pixel = 2 * k * (mod.in_channels // mod.groups) * mod.out_channels
    # transposed convolutions scatter from each input pixel rather than gather
    x = inp[0] if isinstance(mod, nn.ConvTranspose2d) else out
    return per_pixel * x.shape[0] * x.shape[-2] * x.shape[-1]


def count_flops(fn, x: torch.Tensor, modules=None) -> int:
    """Multiply-add FLOPs (counted as 2) of every conv run while evaluating ``fn(x)``."""
    flops = 0

    def hook(mod, inp, out):
        nonlocal flops
        flops += _conv_cost(mod, inp, out)

    roots = modules if modules is not None else [fn]
    handles = [
        sub.register_forward_hook(hook)
        for m in roots
        for sub in m.modules()
        if isinstance(sub, (nn.Conv2d, nn.ConvTranspose2d))
    ]
    try:
        with torch.no_grad():
            fn(x)
    finally:
        for hnd in handles:
            hnd.remove()
    return flops


def estimate_gflops(bundle: ModelBundle, h: int, w: int) -> float:
    """Inference cost of decompose + generate + recompose, in GFLOPs.

    Convolutions cost ``2 * k * k * c_in * c_out`` per output pixel (per
    input pixel for transposed convolutions); recomposition adds one
    multiply per output element. Shapes are traced on the meta device so no
    arithmetic is executed.
    """
    check_network_size(h, w)
    with torch.device("meta"):
        shadow = ModelBundle(bundle.cfg)
    flops = count_flops(shadow.relight, torch.empty(1, 3, h, w, device="meta"), shadow.inference_modules())
    if bundle.learnt:
        flops += 3 * h * w
    return flops / 1e9


def save_checkpoint(path, payload: dict) -> Path:
    """Atomically write ``payload`` (plus the format tag) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        torch.save({"format": CHECKPOINT_FORMAT, **payload}, tmp)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    return ckpt
