import math

import pytest
import torch
import torch.nn as nn

from silt.losses import VGG19_WIDTHS, vgg19_extractor
from silt.networks import (
    DecompositionConfig, DiscriminatorConfig, GeneratorConfig, ModelBundle, ModelConfig,
    build_decomposition, build_discriminator, build_generator, count_flops, count_params,
    decompose, discriminate, estimate_gflops,
)

from helpers import fd_check_params


def conv(k, cin, cout):
    return k * k * cin * cout + cout


def generator_oracle(c=64, cin=3, cout=3, nd=3, nr=9):
    n = conv(7, cin, c)
    n += sum(conv(3, c * 2 ** i, c * 2 ** (i + 1)) for i in range(nd))
    top = c * 2 ** nd
    n += nr * 2 * conv(3, top, top)
    n += sum(conv(3, c * 2 ** (nd - i), c * 2 ** (nd - i - 1)) for i in range(nd))
    return n + conv(7, c, cout)


def decomposition_oracle(b=64, depth=4, cin=3, shading=3):
    w = [b * 2 ** i for i in range(depth)]
    n = conv(3, cin, w[0]) + conv(3, w[0], w[0])
    n += sum(conv(3, w[i - 1], w[i]) + conv(3, w[i], w[i]) for i in range(1, depth))
    decoder = sum(conv(3, w[i], w[i - 1]) + conv(3, 2 * w[i - 1], w[i - 1]) for i in range(1, depth))
    return n + 2 * decoder + conv(3, w[0], 3) + conv(3, w[0], shading)


def discriminator_oracle(scales=2, ndf=64, cin=3):
    per = conv(4, cin, ndf) + conv(4, ndf, 2 * ndf) + conv(4, 2 * ndf, 4 * ndf) + conv(4, 4 * ndf, 8 * ndf)
    return scales * (per + conv(4, 8 * ndf, 1))


def vgg_trunk_oracle():
    a, b, c, d, e = VGG19_WIDTHS
    chain = [(3, a), (a, a), (a, b), (b, b), (b, c), (c, c), (c, c), (c, c), (c, d), (d, d), (d, d), (d, d), (d, e)]
    return sum(conv(3, i, o) for i, o in chain)


def test_single_conv_count():
    assert count_params(nn.Conv2d(3, 64, 3)) == (1792, 1792)


def test_param_counts_match_layer_arithmetic():
    assert count_params(build_generator(GeneratorConfig()))[0] == generator_oracle()
    assert count_params(build_decomposition(DecompositionConfig()))[0] == decomposition_oracle()
    assert count_params(build_discriminator(DiscriminatorConfig()))[0] == discriminator_oracle()
    assert count_params(build_decomposition(DecompositionConfig(base_channels=8, shading_channels=1)))[0] == \
        decomposition_oracle(8, shading=1)


def test_default_bundle_counts():
    bundle = ModelBundle(ModelConfig(), extractor=vgg19_extractor(pretrained=False))
    total, trainable = count_params(bundle)
    g, dl, d, v = generator_oracle(), decomposition_oracle(), discriminator_oracle(), vgg_trunk_oracle()
    assert trainable == g + dl + d
    assert total == g + dl + d + v
    assert bundle.total_params == total and bundle.trainable_params == trainable
    assert trainable <= total


@pytest.mark.parametrize("h,w", [(64, 64), (768, 512), (24, 40)])
def test_generator_shape(h, w):
    g = build_generator(GeneratorConfig(base_channels=4, n_resblocks=1))
    with torch.no_grad():
        assert g(torch.zeros(1, 3, h, w)).shape == (1, 3, h, w)


def test_generator_rejects_bad_config_and_size():
    with pytest.raises(ValueError):
        build_generator(GeneratorConfig(base_channels=0))
    with pytest.raises(ValueError):
        build_generator(GeneratorConfig(n_upsample=2))
    g = build_generator(GeneratorConfig(base_channels=4, n_resblocks=1))
    with pytest.raises(ValueError):
        g(torch.zeros(1, 3, 20, 20))


def test_decompose_shapes_range_determinism():
    torch.manual_seed(0)
    net = build_decomposition(DecompositionConfig(base_channels=4, shading_channels=1))
    x = torch.rand(2, 3, 32, 24) * 2 - 1
    with torch.no_grad():
        r1, s1 = decompose(net, x)
        r2, s2 = decompose(net, x)
    assert r1.shape == (2, 3, 32, 24) and s1.shape == (2, 1, 32, 24)
    assert torch.equal(r1, r2) and torch.equal(s1, s2)
    assert r1.min() >= 0 and r1.max() <= 1 and s1.min() >= 0 and s1.max() <= 1
    with pytest.raises(ValueError):
        decompose(net, torch.zeros(1, 3, 12, 12))


def test_decomposition_norm_option():
    plain = build_decomposition(DecompositionConfig(base_channels=8, norm="none"))
    assert count_params(plain)[0] == decomposition_oracle(8)
    assert not any(isinstance(m, nn.InstanceNorm2d) for m in plain.modules())
    with torch.no_grad():
        r, s = decompose(plain, torch.rand(1, 3, 16, 16) * 2 - 1)
    # He init keeps the un-normalised maps from collapsing to sigmoid(0)
    assert r.std() > 1e-3 and s.std() > 1e-3
    normed = build_decomposition(DecompositionConfig(base_channels=8, norm="instance"))
    assert count_params(normed)[0] == decomposition_oracle(8)
    assert any(isinstance(m, nn.InstanceNorm2d) for m in normed.modules())
    with pytest.raises(ValueError, match="norm"):
        build_decomposition(DecompositionConfig(norm="batch"))


def d_map_oracle(n):
    # k4 p2 convs: strides 2, 2, 2, 1 then the 1-channel stride-1 head
    for s in (2, 2, 2, 1, 1):
        n = (n + 2 * 2 - 4) // s + 1
    return n


def test_discriminator_maps():
    d = build_discriminator(DiscriminatorConfig(base_channels=4))
    with torch.no_grad():
        maps = discriminate(d, torch.rand(1, 3, 256, 256))
    assert len(maps) == 2
    assert maps[0].shape == (1, 1, d_map_oracle(256), d_map_oracle(256))
    assert maps[1].shape == (1, 1, d_map_oracle(128), d_map_oracle(128))
    with torch.no_grad():
        m = discriminate(d, torch.rand(1, 3, 96, 64))
    assert [t.shape[-2:] for t in m] == [(d_map_oracle(96), d_map_oracle(64)), (d_map_oracle(48), d_map_oracle(32))]
    with pytest.raises(ValueError):
        discriminate(d, torch.rand(1, 3, 4, 64))


def test_zero_discriminator():
    d = build_discriminator(DiscriminatorConfig(base_channels=4))
    for p in d.parameters():
        nn.init.zeros_(p)
    with torch.no_grad():
        assert all(not m.any() for m in d(torch.rand(1, 3, 64, 64)))


def test_seeded_construction_is_deterministic():
    outs = []
    for _ in range(2):
        torch.manual_seed(3)
        g = build_generator(GeneratorConfig(base_channels=4, n_resblocks=2))
        with torch.no_grad():
            outs.append(g(torch.linspace(-1, 1, 3 * 16 * 16).view(1, 3, 16, 16)))
    assert torch.equal(outs[0], outs[1])


# -- finite differences on 1-channel 8x8 instances -------------------------

def _fd_net(net, x):
    net = net.double()
    x = x.double()
    out = net(x)
    if isinstance(out, (list, tuple)):
        return lambda: sum(o.sum() for o in net(x))
    return lambda: net(x).sum()


@pytest.mark.parametrize("which", ["generator", "decomposition", "discriminator"])
def test_network_gradients_match_fd(which):
    torch.manual_seed(0)
    if which == "generator":
        # two levels: three would squeeze 8x8 to a 1x1 bottleneck that instance
        # norm zeroes, cutting the encoder out of the gradient path
        net = build_generator(GeneratorConfig(base_channels=2, n_downsample=2, n_upsample=2, n_resblocks=2,
                                              input_channels=1, output_channels=1))
    elif which == "decomposition":
        net = build_decomposition(DecompositionConfig(base_channels=2, input_channels=1, shading_channels=1))
    else:
        net = build_discriminator(DiscriminatorConfig(base_channels=2, input_channels=1))
    # wide weights keep a 1e-3 step small relative to pre-activations, so it
    # rarely straddles a ReLU kink
    for p in net.parameters():
        if p.ndim > 1:
            nn.init.normal_(p, 0, 2.0)
        else:
            nn.init.normal_(p, 0, 0.1)
    x = torch.randn(1, 1, 8, 8, generator=torch.Generator().manual_seed(1))
    objective = _fd_net(net, x)
    worst = fd_check_params(objective, list(net.parameters()))
    assert worst < 1e-2, worst


# -- complexity -------------------------------------------------------------

def test_single_conv_flops():
    assert count_flops(nn.Conv2d(3, 64, 3, padding=1), torch.empty(1, 3, 64, 64)) == 14_155_776


def test_gflops_scale_with_area():
    cfg = ModelConfig(GeneratorConfig(base_channels=8), DecompositionConfig(base_channels=8),
                      DiscriminatorConfig(base_channels=8))
    b = ModelBundle(cfg)
    small, big = estimate_gflops(b, 64, 96), estimate_gflops(b, 128, 192)
    assert math.isclose(big, 4 * small, rel_tol=1e-12)


def test_gflops_ordering_and_param_invariance():
    b = ModelBundle(ModelConfig())
    before = count_params(b)
    square, wide = estimate_gflops(b, 512, 512), estimate_gflops(b, 512, 768)
    assert count_params(b) == before
    assert square < wide
    # published reference: 1862.846 (512x512) < 2792.768 (768x512)
    assert (square < wide) == (1862.846 < 2792.768)
    # weights survive the meta-device trace
    assert all(p.device.type == "cpu" for p in b.parameters())
