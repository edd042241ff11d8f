"""Whole-pipeline contracts: shape ladder, determinism, op-count linearity."""

import numpy as np
import pytest

from mambaloc.model import Model, ModelConfig, build, mac_count, param_and_flop_report, param_count
from mambaloc.tensor import ShapeError, Tensor


def image(rng, h, w, b=1):
    return Tensor(rng.uniform(0.0, 1.0, (b, h, w, 3)).astype(np.float64))


MICRO = dict(dtype=np.float64)


class TestConfig:
    def test_default_depths(self):
        cfg = ModelConfig()
        assert cfg.depths == (2, 2, 9, 2)
        assert cfg.divisibility == 32

    def test_micro_divisibility(self):
        assert ModelConfig.micro().divisibility == 16

    def test_validation_errors(self):
        with pytest.raises(ValueError):
            ModelConfig(depths=(2, 2, 9))
        with pytest.raises(ValueError):
            ModelConfig(depths=(0, 2, 9, 2))
        with pytest.raises(ValueError):
            ModelConfig(channels=(50, 96, 192, 384), cab_reduction=16)
        with pytest.raises(ValueError):
            ModelConfig(input_size=(100, 64))
        with pytest.raises(ValueError):
            ModelConfig(scan_mode="parallel")

    def test_round_trips_through_dict(self):
        cfg = ModelConfig.tiny(use_cab=False, input_size=(64, 64))
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        a = build(ModelConfig.micro(), seed=3, **MICRO)
        b = build(ModelConfig.micro(), seed=3, **MICRO)
        for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data), na

    def test_different_seeds_differ(self):
        a = build(ModelConfig.micro(), seed=3, **MICRO)
        b = build(ModelConfig.micro(), seed=4, **MICRO)
        diffs = [not np.array_equal(ta.data, tb.data)
                 for (_, ta), (_, tb) in zip(a.named_parameters(), b.named_parameters())]
        assert any(diffs)

    def test_smoke_minimal_depths(self):
        model = build(ModelConfig.micro(), seed=0, **MICRO)
        rng = np.random.default_rng(0)
        out = model(image(rng, 16, 16))
        assert out.shape == (1, 16, 16, 1)

    def test_param_count_equals_enumeration(self):
        model = build(ModelConfig.micro(), seed=0, **MICRO)
        total = 0
        for _, t in model.named_parameters():
            total += int(np.prod(t.shape))
        assert param_count(model) == total
        assert total > 0


class TestForward:
    @pytest.mark.parametrize("hw", [64, 96, 128])
    def test_shape_ladder(self, hw):
        cfg = ModelConfig.tiny(depths=(1, 1, 1, 1))
        model = build(cfg, seed=1, **MICRO)
        model.eval()
        rng = np.random.default_rng(hw)
        x = image(rng, hw, hw)
        x1, x2, x3, x4 = model.forward_features(x)
        assert x1.shape == (1, hw // 4, hw // 4, cfg.channels[0])
        assert x2.shape == (1, hw // 8, hw // 8, cfg.channels[1])
        assert x3.shape == (1, hw // 16, hw // 16, cfg.channels[2])
        assert x4.shape == (1, hw // 32, hw // 32, cfg.channels[3])
        p = model(x)
        assert p.shape == (1, hw, hw, 1)
        assert np.all(p.data > 0.0) and np.all(p.data < 1.0)

    def test_rectangular_input(self):
        model = build(ModelConfig.tiny(depths=(1, 1, 1, 1)), seed=1, **MICRO)
        model.eval()
        rng = np.random.default_rng(5)
        p = model(image(rng, 64, 96))
        assert p.shape == (1, 64, 96, 1)

    def test_configured_size_enforced(self):
        model = build(ModelConfig.micro(input_size=(16, 16)), seed=1, **MICRO)
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeError):
            model(image(rng, 32, 32))

    def test_indivisible_input_rejected(self):
        model = build(ModelConfig.tiny(depths=(1, 1, 1, 1)), seed=1, **MICRO)
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeError):
            model(image(rng, 48, 64))

    def test_out_of_range_values_rejected(self):
        model = build(ModelConfig.micro(), seed=1, **MICRO)
        x = Tensor(np.full((1, 16, 16, 3), 1.5))
        with pytest.raises(ValueError):
            model(x)

    def test_constant_gray_zero_head_gives_half(self):
        model = build(ModelConfig.micro(), seed=1, **MICRO)
        model.eval()
        model.decoder.head.w.data[:] = 0.0
        model.decoder.head.b.data[:] = 0.0
        x = Tensor(np.full((1, 16, 16, 3), 0.5))
        out = model(x)
        np.testing.assert_allclose(out.data, 0.5, atol=1e-12)

    def test_forward_is_deterministic(self):
        model = build(ModelConfig.micro(), seed=1, **MICRO)
        model.eval()
        rng = np.random.default_rng(3)
        x = image(rng, 16, 16, b=2)
        assert np.array_equal(model(x).data, model(x).data)


class TestOpCounts:
    def test_doubling_pixels_scales_linearly(self):
        cfg = ModelConfig.tiny()
        a = mac_count(cfg, (64, 64))
        b = mac_count(cfg, (64, 128))
        c = mac_count(cfg, (128, 128))
        assert 1.9 <= b / a <= 2.1
        assert 1.9 <= c / b <= 2.1

    def test_default_config_ratio(self):
        cfg = ModelConfig()
        ratio = mac_count(cfg, (256, 512)) / mac_count(cfg, (256, 256))
        assert 1.9 <= ratio <= 2.1

    def test_report_returns_counts(self, capsys):
        model = build(ModelConfig.micro(), seed=0, **MICRO)
        params, macs = param_and_flop_report(model, (16, 16))
        out = capsys.readouterr().out
        assert "params" in out and "macs" in out
        assert params == param_count(model)
        assert macs == mac_count(model.config, (16, 16))
        assert params > 0 and macs > 0
