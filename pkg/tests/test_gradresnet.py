import logging

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from jescore.autodiff import ShapeError
from jescore.gradresnet import (ArchConfig, ConfigError, align, build, expected_parameter_count,
                                side_connect, small_config)

log = logging.getLogger(__name__)

HOMOGENEOUS = dict(activation="relu", norm="none", biases=False)


def _images(seed, n=2, c=1, size=8, scale=60.0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, c, size, size, generator=g) * scale + 128


class TestBuild:
    def test_same_seed_is_bitwise_identical(self):
        a = build(small_config(), seed=3)
        b = build(small_config(), seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self):
        a = dict(build(small_config(), seed=0).named_parameters())
        b = dict(build(small_config(), seed=1).named_parameters())
        assert not torch.equal(a["stem.weight"], b["stem.weight"])

    def test_biases_add_one_tensor_per_conv_and_norm(self):
        plain = dict(build(small_config()).named_parameters())
        with_bias = dict(build(small_config(biases=True)).named_parameters())
        layers = {k.rsplit(".", 1)[0] for k in plain}
        assert set(with_bias) == set(plain) | {f"{layer}.bias" for layer in layers}

    def test_default_parameter_count(self):
        # hand-expanded layer shapes of the default small-image network
        stem = 3 * 64 * 9
        stage1 = 4 * 64 * 64 * 9
        stage2 = 64 * 128 * 9 + 3 * 128 * 128 * 9 + 64 * 128
        stage3 = 128 * 256 * 9 + 3 * 256 * 256 * 9 + 128 * 256
        stage4 = 256 * 512 * 9 + 3 * 512 * 512 * 9 + 256 * 512
        gains = 2 * (64 + 128 + 256 + 512)
        by_hand = stem + stage1 + stage2 + stage3 + stage4 + gains
        net = build(ArchConfig())
        actual = sum(p.numel() for p in net.parameters())
        assert actual == by_hand == expected_parameter_count(ArchConfig())
        assert abs(actual - 11.2e6) / 11.2e6 < 0.02

    @pytest.mark.parametrize("overrides", [
        {}, {"biases": True}, {"norm": "none"}, {"norm": "batchnorm_eval", "biases": True},
        {"first_conv": "large", "maxpool": True}, {"blocks_per_stage": (1, 3)},
    ])
    def test_closed_form_count_matches(self, overrides):
        cfg = small_config(3, **overrides)
        assert sum(p.numel() for p in build(cfg).parameters()) == expected_parameter_count(cfg)

    def test_parameter_names_unique_and_stable(self):
        names = [n for n, _ in build(small_config()).named_parameters()]
        assert len(names) == len(set(names))
        assert names == [n for n, _ in build(small_config(), seed=9).named_parameters()]
        assert names[0] == "stem.weight"

    def test_gains_start_at_one(self):
        for name, p in build(small_config()).named_parameters():
            if name.endswith("gain"):
                assert torch.all(p == 1)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(stage_channels=(16, 32), blocks_per_stage=(2,), feature_dim=32),
        dict(stage_channels=(16, 32), blocks_per_stage=(2, 2), feature_dim=16),
        dict(stage_channels=(16, 32), blocks_per_stage=(2, 2), feature_dim=32, activation="tanh"),
        dict(stage_channels=(12, 24), blocks_per_stage=(2, 2), feature_dim=24, groups=8),
        dict(stage_channels=(16, 24), blocks_per_stage=(2, 2), feature_dim=24, groups=8),
        dict(norm="layernorm"),
    ])
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            ArchConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = small_config(3, activation="relu")
        assert ArchConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            ArchConfig.from_dict({**small_config().to_dict(), "dropout": 0.1})

    def test_homogeneous_flag(self):
        assert small_config(**HOMOGENEOUS).homogeneous
        assert not small_config().homogeneous


class TestFeatures:
    def test_output_shape(self):
        net = build(small_config(3))
        assert net(_images(0, n=3, c=3)).shape == (3, 32)

    @pytest.mark.parametrize("overrides", [HOMOGENEOUS, {}, {"norm": "batchnorm_eval"}])
    def test_zero_input_gives_zero_features_without_biases(self, overrides):
        net = build(small_config(**overrides))
        assert torch.count_nonzero(net(torch.zeros(1, 1, 8, 8))) == 0

    def test_biases_break_zero_preservation(self):
        net = build(small_config(biases=True))
        with torch.no_grad():
            for name, p in net.named_parameters():
                if name.endswith("bias"):
                    p.fill_(0.1)
        assert torch.count_nonzero(net(torch.zeros(1, 1, 8, 8))) > 0

    @given(st.floats(0.05, 20.0))
    @settings(max_examples=20, deadline=None)
    def test_positive_homogeneity(self, alpha):
        net = build(small_config(**HOMOGENEOUS), seed=1)
        y = _images(1)
        a = net(alpha * y)
        b = alpha * net(y)
        assert (a - b).norm() / b.norm() < 1e-5

    def test_homogeneity_fails_for_default(self):
        net = build(small_config(), seed=1)
        y = _images(1)
        assert (net(2 * y) - 2 * net(y)).norm() / net(y).norm() > 1e-3

    def test_identical_images_identical_rows(self):
        net = build(small_config(), seed=2)
        y = _images(2, n=1).repeat(2, 1, 1, 1)
        out = net(y)
        assert torch.equal(out[0], out[1])

    def test_per_sample_independence(self):
        net = build(small_config(), seed=2)
        y = _images(3, n=3)
        together = net(y)
        apart = torch.cat([net(y[i:i + 1]) for i in range(3)])
        np.testing.assert_allclose(together.detach(), apart.detach(), rtol=1e-5, atol=1e-6)

    def test_incompatible_size_rejected(self):
        net = build(small_config())
        with pytest.raises(ShapeError):
            net(torch.zeros(1, 1, 7, 7))
        with pytest.raises(ShapeError):
            net(torch.zeros(1, 3, 8, 8))

    def test_large_stem_halves_resolution(self):
        net = build(small_config(first_conv="large", maxpool=True))
        assert net.stem.weight.shape[-1] == 7
        assert net.downsampling == 8
        assert net(torch.zeros(1, 1, 16, 16)).shape == (1, 32)

    def test_continuity_default_config(self):
        net = build(small_config(), seed=4).double()
        y = _images(4).double()
        g = torch.Generator().manual_seed(5)
        ratios = []
        with torch.no_grad():
            base = net(y)
        for scale in (1e-2, 1e-3, 1e-4):
            d = torch.randn(y.shape, generator=g, dtype=torch.float64)
            d *= scale / d.norm()
            with torch.no_grad():
                ratios.append(float((net(y + d) - base).norm() / d.norm()))
        lipschitz = max(ratios)
        log.info("empirical local Lipschitz estimate %.3e", lipschitz)
        assert np.isfinite(lipschitz)
        # the ratio is a derivative estimate, so it must not blow up as the step shrinks
        assert max(ratios) < 10 * min(ratios)


class TestSideConnections:
    def test_disabled_passthrough(self):
        out = torch.randn(1, 4, 2, 2)
        assert side_connect(torch.randn(1, 2, 4, 4), out, enabled=False) is out

    def test_zero_output_gives_aligned_input(self):
        inp = torch.randn(1, 2, 4, 4)
        out = side_connect(inp, torch.zeros(1, 4, 2, 2))
        assert torch.equal(out, align(inp, torch.zeros(1, 4, 2, 2)))

    def test_align_ones_with_channel_doubling(self):
        out = align(torch.ones(1, 1, 4, 4), torch.zeros(1, 2, 2, 2))
        assert out.shape == (1, 2, 2, 2)
        assert torch.all(out == 1)

    def test_align_pools_then_tiles(self):
        inp = torch.arange(16.0).view(1, 1, 4, 4)
        out = align(inp, torch.zeros(1, 2, 2, 2))
        expected = torch.tensor([[2.5, 4.5], [10.5, 12.5]])
        assert torch.equal(out[0, 0], expected)
        assert torch.equal(out[0, 1], expected)

    def test_align_rejects_untileable(self):
        with pytest.raises(ShapeError):
            align(torch.ones(1, 3, 4, 4), torch.zeros(1, 4, 4, 4))

    def test_side_connections_are_parameter_free(self):
        on = [n for n, _ in build(small_config()).named_parameters()]
        off = [n for n, _ in build(small_config(side_connections=False)).named_parameters()]
        assert on == off
        y = _images(6)
        assert not torch.allclose(build(small_config())(y),
                                  build(small_config(side_connections=False))(y))


class TestAblations:
    """Each switch changes exactly the pieces it names."""

    def _names(self, **overrides):
        return {n for n, _ in build(small_config(**overrides)).named_parameters()}

    def test_relu_keeps_parameters(self):
        assert self._names(activation="relu") == self._names()

    def test_no_norm_drops_only_gains(self):
        base = self._names()
        assert base - self._names(norm="none") == {n for n in base if n.endswith("gain")}

    def test_batchnorm_keeps_gain_slots(self):
        assert self._names(norm="batchnorm_eval") == self._names()

    def test_batchnorm_is_affine_in_eval_mode(self):
        net = build(small_config(norm="batchnorm_eval"), seed=0)
        y = _images(7)
        net.train()
        a = net(y)
        net.eval()
        assert torch.equal(a, net(y))
