"""Block contracts: shapes, residual identities, attention oracle, gradients."""

import numpy as np
import pytest

from mambaloc import tensor as T
from mambaloc.blocks import (
    BatchNorm,
    ChannelAttention,
    Conv2D,
    Decoder,
    DepthwiseConv2D,
    Downsample,
    InvertedResidual,
    LayerNorm,
    Linear,
    MixedSSMBlock,
    MLP,
    Module,
    PatchEmbed,
)
from mambaloc.tensor import GradTape, ShapeError, Tensor, grad_check


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


@pytest.fixture
def gen():
    return np.random.default_rng(0)


class TestModuleBase:
    def test_named_parameters_cover_nested_structure(self, gen):
        block = MixedSSMBlock(gen, 4, state=2, cab_reduction=2, dtype=np.float64)
        names = [n for n, _ in block.named_parameters()]
        assert len(names) == len(set(names))
        assert any("ssm" in n for n in names)
        assert any("norm1" in n for n in names)
        assert any("mixer" in n for n in names)

    def test_train_eval_propagates(self, gen):
        block = InvertedResidual(gen, 4)
        assert block.bn1.training
        block.eval()
        assert not block.bn1.training
        block.train()
        assert block.bn2.training

    def test_buffers_enumerated(self, gen):
        block = InvertedResidual(gen, 4)
        buffers = dict(block.named_buffers())
        assert "bn1.running_mean" in buffers
        assert "bn3.running_var" in buffers
        assert len(buffers) == 6


class TestElementaryLayers:
    def test_linear_shapes_any_rank(self, gen):
        lin = Linear(gen, 5, 7, dtype=np.float64)
        assert lin(t64(np.ones((3, 5)))).shape == (3, 7)
        assert lin(t64(np.ones((2, 4, 5)))).shape == (2, 4, 7)

    def test_conv_layer_matches_primitive(self, gen):
        conv = Conv2D(gen, 3, 4, kernel=3, padding=1, dtype=np.float64)
        x = t64(np.random.default_rng(1).standard_normal((2, 5, 5, 3)))
        out = conv(x)
        ref = T.conv2d(x, conv.w, conv.b, stride=1, padding=1)
        np.testing.assert_array_equal(out.data, ref.data)

    def test_batch_norm_layer_updates_buffers_in_train_only(self, gen):
        bn = BatchNorm(3, dtype=np.float64)
        x = t64(np.random.default_rng(2).standard_normal((4, 2, 2, 3)) + 2.0)
        bn(x)
        after_train = bn._buffers["running_mean"].copy()
        assert not np.allclose(after_train, 0.0)
        bn.eval()
        bn(x)
        np.testing.assert_array_equal(bn._buffers["running_mean"], after_train)


class TestPatchEmbed:
    def test_shape_64(self, gen):
        pe = PatchEmbed(gen, 3, 8, dtype=np.float64)
        out = pe(t64(np.zeros((1, 64, 64, 3))))
        assert out.shape == (1, 16, 16, 8)

    def test_shape_512(self, gen):
        pe = PatchEmbed(gen, 3, 4, dtype=np.float64)
        out = pe(t64(np.zeros((1, 512, 512, 3))))
        assert out.shape == (1, 128, 128, 4)

    def test_indivisible_raises_with_requirement(self, gen):
        pe = PatchEmbed(gen, 3, 8, dtype=np.float64)
        with pytest.raises(ShapeError, match="32"):
            pe(t64(np.zeros((1, 33, 64, 3))))

    def test_custom_divisibility(self, gen):
        pe = PatchEmbed(gen, 3, 8, patch=2, divisibility=16, dtype=np.float64)
        assert pe(t64(np.zeros((1, 16, 16, 3)))).shape == (1, 8, 8, 8)


class TestChannelAttention:
    def test_zero_dense_weights_halve_conv_output(self, gen):
        cab = ChannelAttention(gen, 4, reduction=2, dtype=np.float64)
        cab.squeeze.w.data[:] = 0.0
        cab.excite.w.data[:] = 0.0
        x = t64(np.random.default_rng(3).standard_normal((1, 5, 5, 4)))
        out = cab(x)
        conv_out = cab.conv(x)
        np.testing.assert_allclose(out.data, 0.5 * conv_out.data, rtol=1e-12)

    def test_identity_conv_and_zero_dense_gives_half_input(self, gen):
        cab = ChannelAttention(gen, 3, reduction=3, dtype=np.float64)
        cab.conv.w.data[:] = 0.0
        for c in range(3):
            cab.conv.w.data[1, 1, c, c] = 1.0
        cab.conv.b.data[:] = 0.0
        cab.squeeze.w.data[:] = 0.0
        cab.excite.w.data[:] = 0.0
        x = t64(np.random.default_rng(4).standard_normal((2, 4, 4, 3)))
        np.testing.assert_allclose(cab(x).data, 0.5 * x.data, rtol=1e-12)

    def test_constant_grid_pools_to_constant(self):
        x = t64(np.full((2, 3, 3, 4), 1.7))
        np.testing.assert_allclose(T.global_avg_pool(x).data, np.full((2, 4), 1.7), rtol=1e-12)

    def test_matches_brute_force_reimplementation(self, gen):
        cab = ChannelAttention(gen, 8, reduction=4, dtype=np.float64)
        x = np.random.default_rng(5).standard_normal((1, 4, 4, 8))
        out = cab(t64(x)).data

        def sigmoid(v):
            return 1.0 / (1.0 + np.exp(-v))

        y = np.zeros((1, 4, 4, 8))
        for oc in range(8):
            acc = np.zeros((4, 4))
            xp = np.pad(x[0], ((1, 1), (1, 1), (0, 0)))
            for i in range(4):
                for j in range(4):
                    acc[i, j] = np.sum(xp[i:i + 3, j:j + 3, :] * cab.conv.w.data[:, :, :, oc])
            y[0, :, :, oc] = acc + cab.conv.b.data[oc]
        pooled = y[0].mean(axis=(0, 1))
        hidden = np.maximum(pooled @ cab.squeeze.w.data + cab.squeeze.b.data, 0.0)
        scale = sigmoid(hidden @ cab.excite.w.data + cab.excite.b.data)
        np.testing.assert_allclose(out, y * scale, rtol=1e-9)

    def test_rejects_indivisible_reduction(self, gen):
        with pytest.raises(ValueError):
            ChannelAttention(gen, 6, reduction=4)


class TestMixedSSMBlock:
    def test_shape_preserved(self, gen):
        block = MixedSSMBlock(gen, 8, state=2, cab_reduction=4, dtype=np.float64)
        x = t64(np.random.default_rng(6).standard_normal((1, 8, 8, 8)))
        assert block(x).shape == (1, 8, 8, 8)

    def test_zeroed_branch_outputs_make_identity(self, gen):
        block = MixedSSMBlock(gen, 4, state=2, cab_reduction=2, dtype=np.float64)
        block.ssm.out_proj.data[:] = 0.0
        block.mixer.conv.w.data[:] = 0.0
        block.mixer.conv.b.data[:] = 0.0
        x = t64(np.random.default_rng(7).standard_normal((1, 4, 4, 4)))
        np.testing.assert_array_equal(block(x).data, x.data)

    def test_mlp_arm_identity_when_zeroed(self, gen):
        block = MixedSSMBlock(gen, 4, state=2, use_cab=False, dtype=np.float64)
        assert isinstance(block.mixer, MLP)
        block.ssm.out_proj.data[:] = 0.0
        block.mixer.fc2.w.data[:] = 0.0
        block.mixer.fc2.b.data[:] = 0.0
        x = t64(np.random.default_rng(8).standard_normal((1, 4, 4, 4)))
        np.testing.assert_array_equal(block(x).data, x.data)

    @pytest.mark.parametrize("use_cab", [True, False])
    def test_every_parameter_gets_gradient(self, gen, use_cab):
        block = MixedSSMBlock(gen, 4, state=2, cab_reduction=2, use_cab=use_cab, dtype=np.float64)
        x = t64(np.random.default_rng(9).standard_normal((2, 4, 4, 4)))
        with GradTape() as tape:
            out = block(x)
            loss = T.sum_(T.mul(out, out))
        tape.backward(loss)
        for name, p in block.named_parameters():
            assert p.grad is not None, name
            assert np.any(p.grad != 0), name

    def test_block_grad_check(self, gen):
        block = MixedSSMBlock(gen, 2, state=2, cab_reduction=2, dtype=np.float64)
        x = t64(np.random.default_rng(10).standard_normal((1, 2, 2, 2)))
        w = np.linspace(0.5, 1.5, 8).reshape(1, 2, 2, 2)

        def fn(p):
            return T.sum_(T.mul(block(p), t64(w)))

        assert grad_check(fn, x) < 1e-4


class TestDownsample:
    def test_halves_resolution(self, gen):
        for norm in ("ln", "bn"):
            ds = Downsample(gen, 8, 16, norm=norm, dtype=np.float64)
            out = ds(t64(np.random.default_rng(11).standard_normal((1, 16, 16, 8))))
            assert out.shape == (1, 8, 8, 16)

    def test_rejects_odd_dims(self, gen):
        ds = Downsample(gen, 4, 8, dtype=np.float64)
        with pytest.raises(ShapeError):
            ds(t64(np.zeros((1, 5, 8, 4))))

    def test_rejects_unknown_norm(self, gen):
        with pytest.raises(ValueError):
            Downsample(gen, 4, 8, norm="gn")


class TestInvertedResidual:
    def test_shape_preserved(self, gen):
        block = InvertedResidual(gen, 8, dtype=np.float64)
        x = t64(np.random.default_rng(12).standard_normal((2, 4, 4, 8)))
        assert block(x).shape == (2, 4, 4, 8)

    def test_zero_projection_gives_identity(self, gen):
        block = InvertedResidual(gen, 4, dtype=np.float64)
        block.project.w.data[:] = 0.0
        x = t64(np.random.default_rng(13).standard_normal((2, 3, 3, 4)))
        np.testing.assert_array_equal(block(x).data, x.data)

    def test_no_residual_on_channel_change(self, gen):
        block = InvertedResidual(gen, 4, out_ch=6, dtype=np.float64)
        assert not block.residual
        x = t64(np.random.default_rng(14).standard_normal((1, 3, 3, 4)))
        assert block(x).shape == (1, 3, 3, 6)

    def test_parameter_count_formula(self, gen):
        c, t = 6, 4 * 6
        block = InvertedResidual(gen, c, dtype=np.float64)
        counted = sum(p.size for _, p in block.named_parameters())
        expected = c * t + t * 9 + t * c + 2 * t + 2 * t + 2 * c
        assert counted == expected

    def test_gradients_flow(self, gen):
        block = InvertedResidual(gen, 3, expansion=2, dtype=np.float64)
        x = t64(np.random.default_rng(15).uniform(-1, 1, (2, 3, 3, 3)))
        w = np.linspace(0.5, 1.5, 2 * 9 * 3).reshape(2, 3, 3, 3)

        def fn(p):
            return T.sum_(T.mul(block(p), t64(w)))

        assert grad_check(fn, x) < 1e-4


class TestDecoder:
    def _features(self, rng, h=16, channels=(4, 8, 8, 8)):
        feats = []
        size = h
        for c in channels:
            feats.append(t64(rng.standard_normal((1, size, size, c))))
            size //= 2
        return feats

    def test_output_shape_and_open_interval(self, gen):
        dec = Decoder(gen, (4, 8, 8, 8), embed=8, dtype=np.float64)
        feats = self._features(np.random.default_rng(16))
        out = dec(feats, (64, 64))
        assert out.shape == (1, 64, 64, 1)
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_zero_features_zero_biases_give_half(self, gen):
        dec = Decoder(gen, (4, 8, 8, 8), embed=8, dtype=np.float64)
        dec.head.w.data[:] = 0.0
        dec.head.b.data[:] = 0.0
        feats = [Tensor(np.zeros(f.shape, dtype=np.float64))
                 for f in self._features(np.random.default_rng(17))]
        out = dec(feats, (64, 64))
        np.testing.assert_allclose(out.data, 0.5, atol=1e-12)

    def test_rejects_wrong_feature_count(self, gen):
        dec = Decoder(gen, (4, 8, 8, 8), embed=8, dtype=np.float64)
        feats = self._features(np.random.default_rng(18))
        with pytest.raises(ShapeError):
            dec(feats[:3], (64, 64))

    def test_gradient_reaches_all_stage_projections(self, gen):
        dec = Decoder(gen, (4, 8, 8, 8), embed=8, dtype=np.float64)
        feats = self._features(np.random.default_rng(19), h=8)
        with GradTape() as tape:
            out = dec(feats, (32, 32))
            loss = T.sum_(T.mul(out, out))
        tape.backward(loss)
        for i, proj in enumerate(dec.proj):
            assert proj.w.grad is not None and np.any(proj.w.grad != 0), f"stage {i}"
