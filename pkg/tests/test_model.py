import math

import numpy as np
import pytest

from skelformer import model as m
from skelformer import tensor as tk
from skelformer.config import ConfigError
from skelformer.tensor import Tensor

from gradcheck import check


def tiny_cfg(**kw):
    base = dict(t_len=3, joints=4, num_classes=3, c_emb=8, heads=2, blocks=2, rpe_clip=4)
    base.update(kw)
    return m.ModelConfig(**base)


def randomize(params, rng, scale=0.3):
    for t in params.values():
        t.data[...] = rng.normal(0.0, scale, t.shape)
    return params


def ln_ref(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def gelu_ref(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


class TestConfig:
    def test_defaults(self):
        cfg = m.ModelConfig(t_len=16, joints=21, num_classes=10)
        assert (cfg.c_emb, cfg.heads, cfg.blocks, cfg.ffn_ratio, cfg.rpe_clip) == (64, 8, 10, 4, 64)
        assert cfg.scale_attention and cfg.dropout == 0.0

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError, match="divisible"):
            m.ModelConfig(t_len=4, joints=3, num_classes=2, c_emb=64, heads=3)

    @pytest.mark.parametrize("kw", [{"blocks": 0}, {"rpe_clip": 0}, {"num_classes": 1}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            tiny_cfg(**kw)


class TestInit:
    def test_same_seed_bitwise(self):
        a, b = m.init_params(tiny_cfg(), 7), m.init_params(tiny_cfg(), 7)
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)

    def test_shapes_and_constants(self):
        cfg = tiny_cfg()
        p = m.init_params(cfg, 0)
        m.check_params(p, cfg)
        assert p["joint_embed"].shape == (5, 8)
        assert p["blocks.1.temporal.rpe_bias"].shape == (2, 9)
        assert p["blocks.0.ffn.w1.weight"].shape == (8, 32)
        assert not p["blocks.0.temporal.rpe_bias"].data.any()
        assert not p["head.bias"].data.any()
        np.testing.assert_array_equal(p["blocks.0.ln2.gamma"].data, 1.0)

    def test_weight_moments(self):
        cfg = m.ModelConfig(t_len=4, joints=5, num_classes=4, c_emb=64, heads=8, blocks=2)
        p = m.init_params(cfg, 0)
        w = p["blocks.0.spatial.q.weight"].data
        # uniform(+-a) with a = sqrt(6/(fan_in+fan_out)) has variance a^2/3 = 2/(fan_in+fan_out)
        target = 2.0 / (64 + 64)
        assert abs(w.var() - target) <= 0.2 * target
        assert np.abs(w).max() <= math.sqrt(6.0 / 128)
        tok = p["joint_embed"].data
        assert abs(tok.std() - 0.02) <= 0.2 * 0.02


class TestEmbed:
    def test_zero(self):
        cfg = tiny_cfg()
        p = m.init_params(cfg, 0)
        for k in ("embed.weight", "embed.bias", "joint_embed"):
            p[k].data[...] = 0
        out = m.embed(np.zeros((1, 3, 4, 2)), p, cfg)
        assert out.shape == (1, 3, 4, 8) and not out.data.any()

    def test_identity_like_weights(self, f64, rng):
        cfg = m.ModelConfig(t_len=2, joints=3, num_classes=2, c_emb=4, heads=2, blocks=1)
        p = m.init_params(cfg, 0)
        p["embed.weight"].data[...] = np.eye(2, 4)
        frames = rng.normal(size=(1, 2, 3, 2))
        expected = np.concatenate([frames, np.zeros((1, 2, 3, 2))], axis=-1) + p["joint_embed"].data[:3]
        np.testing.assert_allclose(m.embed(frames, p, cfg).data, expected, atol=1e-12)

    def test_joint_permutation(self, f64, rng):
        cfg = tiny_cfg()
        p = m.init_params(cfg, 0)
        randomize(p, rng)
        frames = rng.normal(size=(1, 3, 4, 2))
        perm = np.array([2, 0, 3, 1])
        base = m.embed(frames, p, cfg).data
        p["joint_embed"].data[:4] = p["joint_embed"].data[:4][perm]
        np.testing.assert_allclose(m.embed(frames[:, :, perm], p, cfg).data, base[:, :, perm], atol=1e-12)

    def test_shape_mismatch(self):
        cfg = tiny_cfg()
        with pytest.raises(tk.ShapeError):
            m.embed(np.zeros((1, 3, 5, 2)), m.init_params(cfg, 0), cfg)


class TestClassToken:
    def test_prepended_as_joint_zero(self, rng):
        cfg = tiny_cfg(joints=3)
        p = m.init_params(cfg, 0)
        x = Tensor(rng.normal(size=(2, 3, 3, 8)))
        out = m.attach_class_token(x, p, cfg)
        assert out.shape == (2, 3, 4, 8)
        np.testing.assert_array_equal(out.data[:, :, 1:], x.data)
        np.testing.assert_allclose(out.data[:, :, 0], np.broadcast_to(
            p["class_token"].data + p["joint_embed"].data[3], (2, 3, 8)))

    def test_zero_token(self):
        cfg = tiny_cfg(joints=3)
        p = m.init_params(cfg, 0)
        p["class_token"].data[...] = 0
        p["joint_embed"].data[3] = 0
        out = m.attach_class_token(Tensor(np.ones((1, 3, 3, 8))), p, cfg)
        assert not out.data[:, :, 0].any()

    def test_gradient_is_sum_over_frames_of_joint_zero(self, f64, rng):
        cfg = tiny_cfg()
        p = randomize(m.init_params(cfg, 0), rng)
        frames = rng.normal(size=(2, 3, 4, 2))
        labels = np.array([0, 2])

        def loss():
            return (tk.log_softmax(m.forward(frames, p, cfg))[np.arange(2), labels]).sum() * -1.0

        x_in = m.encode_input(frames, p, cfg)
        out = -(tk.log_softmax(m.readout(m.run_blocks(x_in, p, cfg), p))[np.arange(2), labels]).sum()
        for t in p.values():
            t.grad = None
        out.backward()
        np.testing.assert_allclose(p["class_token"].grad, x_in.grad[:, :, 0].sum(axis=(0, 1)), atol=1e-12)
        assert check(loss, [p["class_token"]]) <= 1e-4


class TestPositionalEncoding:
    def test_frame_zero(self):
        out = m.add_positional_encoding(Tensor(np.zeros((1, 2, 3, 6))))
        np.testing.assert_allclose(out.data[0, 0, 1], [0, 1, 0, 1, 0, 1], atol=1e-7)

    def test_frame_one_first_pair(self, f64):
        table = m.sinusoidal_table(2, 8)
        assert abs(table[1, 0] - 0.8414710) < 1e-7 and abs(table[1, 1] - 0.5403023) < 1e-7
        assert table[1, 0] == math.sin(1.0) and table[1, 1] == math.cos(1.0)

    def test_time_only(self):
        out = m.add_positional_encoding(Tensor(np.zeros((1, 2, 3, 6)))).data
        np.testing.assert_array_equal(out[0, 1, 0], out[0, 1, 2])
        assert not np.array_equal(out[0, 0, 0], out[0, 1, 0])


class TestSpatial:
    def test_single_node(self, f64, rng):
        cfg = tiny_cfg()
        p = randomize(m.init_params(cfg, 0), rng)
        x = rng.normal(size=(2, 3, 1, 8))
        out, w = m.spatial_mhsa(Tensor(x), p, cfg, 0, return_attention=True)
        np.testing.assert_array_equal(w.data, 1.0)
        pv = "blocks.0.spatial"
        v = x @ p[f"{pv}.v.weight"].data + p[f"{pv}.v.bias"].data
        np.testing.assert_allclose(out.data, v @ p[f"{pv}.o.weight"].data + p[f"{pv}.o.bias"].data, atol=1e-12)

    def test_identical_joints_uniform_rows(self, rng):
        cfg = tiny_cfg()
        p = randomize(m.init_params(cfg, 0), rng)
        x = np.broadcast_to(rng.normal(size=(1, 3, 1, 8)), (1, 3, 5, 8))
        _, w = m.spatial_mhsa(Tensor(x), p, cfg, 0, return_attention=True)
        np.testing.assert_allclose(w.data, 1 / 5, atol=1e-6)

    def test_rows_sum_to_one(self, rng):
        cfg = tiny_cfg()
        p = randomize(m.init_params(cfg, 0), rng, 1.0)
        _, w = m.spatial_mhsa(Tensor(rng.normal(size=(2, 3, 5, 8))), p, cfg, 1, return_attention=True)
        assert w.shape == (2, 3, 2, 5, 5)
        assert np.abs(w.data.sum(-1) - 1).max() <= 1e-6

    def test_permutation_equivariance(self, rng):
        cfg = tiny_cfg()
        p = randomize(m.init_params(cfg, 0), rng)
        x = rng.normal(size=(2, 3, 6, 8))
        perm = rng.permutation(6)
        base = m.spatial_mhsa(Tensor(x), p, cfg, 0).data
        moved = m.spatial_mhsa(Tensor(x[:, :, perm]), p, cfg, 0).data
        assert np.abs(moved - base[:, :, perm]).max() <= 1e-5


class TestTemporal:
    def test_single_frame(self, rng):
        cfg = tiny_cfg()
        p = randomize(m.init_params(cfg, 0), rng)
        _, w = m.temporal_mhsa_rpe(Tensor(rng.normal(size=(1, 1, 5, 8))), p, cfg, 0, return_attention=True)
        np.testing.assert_array_equal(w.data, 1.0)

    def test_bias_is_toeplitz(self, rng):
        bias = Tensor(rng.normal(size=(3, 2 * 4 + 1)))
        b = m.rpe_bias_matrix(bias, 12, 4).data
        assert b.shape == (3, 12, 12)
        assert np.array_equal(b[:, 1:, 1:], b[:, :-1, :-1])
        # offsets beyond the clip share the boundary entry
        assert b[0, 11, 0] == bias.data[0, 8] and b[0, 0, 11] == bias.data[0, 0]

    def test_zero_bias_matches_unbiased_attention(self, rng):
        cfg = tiny_cfg()
        p = randomize(m.init_params(cfg, 0), rng)
        p["blocks.0.temporal.rpe_bias"].data[...] = 0
        x = Tensor(rng.normal(size=(2, 3, 5, 8)))
        _, w = m.temporal_mhsa_rpe(x, p, cfg, 0, return_attention=True)
        _, plain = m.attention(x.swapaxes(1, 2), p, "blocks.0.temporal", cfg)
        np.testing.assert_array_equal(w.data, plain.data)

    def test_rows_sum_to_one(self, rng):
        cfg = tiny_cfg(t_len=7)
        p = randomize(m.init_params(cfg, 0), rng, 1.0)
        _, w = m.temporal_mhsa_rpe(Tensor(rng.normal(size=(2, 7, 5, 8))), p, cfg, 0, return_attention=True)
        assert w.shape == (2, 5, 2, 7, 7)
        assert np.abs(w.data.sum(-1) - 1).max() <= 1e-6

    def test_masked_shift_equivariance(self, rng):
        cfg = tiny_cfg(t_len=16, rpe_clip=5)
        p = randomize(m.init_params(cfg, 0), rng, 0.5)
        content = rng.normal(size=(1, 8, 4, 8))
        outs = []
        for offset in (0, 3):
            x = rng.normal(size=(1, 16, 4, 8))  # fresh padding each time
            x[:, offset : offset + 8] = content
            keep = np.zeros(16, dtype=bool)
            keep[offset : offset + 8] = True
            out = m.temporal_mhsa_rpe(Tensor(x), p, cfg, 0, mask=keep[None, :]).data
            outs.append(out[:, offset : offset + 8])
        assert np.abs(outs[0] - outs[1]).max() <= 1e-5


class TestFFN:
    def test_zero_weights_identity(self, rng):
        cfg = tiny_cfg()
        p = m.init_params(cfg, 0)
        for k in ("w1.weight", "w1.bias", "w2.weight", "w2.bias"):
            p[f"blocks.0.ffn.{k}"].data[...] = 0
        x = rng.normal(size=(1, 3, 5, 8)).astype(np.float32)
        assert m.ffn(Tensor(x), p, cfg, 0).data.tobytes() == x.tobytes()

    def test_hidden_width(self, rng):
        cfg = tiny_cfg(ffn_ratio=3)
        p = m.init_params(cfg, 0)
        hidden = m.linear(Tensor(rng.normal(size=(1, 3, 5, 8))), p, "blocks.0.ffn.w1")
        assert hidden.shape[-1] == 24

    def test_scalar_toy(self, f64):
        cfg = m.ModelConfig(t_len=1, joints=1, num_classes=2, c_emb=2, heads=1, blocks=1, ffn_ratio=2)
        p = m.init_params(cfg, 0)
        # only the first channel is non-zero so each output channel is a scalar evaluation
        w1 = np.array([[0.7, -1.3, 0.2, 0.0], [0.0, 0.0, 0.0, 0.0]])
        b1 = np.array([0.1, 0.4, -0.2, 0.0])
        w2 = np.array([[1.5, 0.0], [-0.5, 0.0], [2.0, 0.0], [0.0, 0.0]])
        b2 = np.array([0.05, 0.0])
        for k, v in {"w1.weight": w1, "w1.bias": b1, "w2.weight": w2, "w2.bias": b2}.items():
            p[f"blocks.0.ffn.{k}"].data[...] = v
        x = 0.8
        expected = (1.5 * gelu_ref(0.7 * x + 0.1) - 0.5 * gelu_ref(-1.3 * x + 0.4)
                    + 2.0 * gelu_ref(0.2 * x - 0.2) + 0.05 + x)
        out = m.ffn(Tensor([[[[x, 0.0]]]]), p, cfg, 0).data
        assert abs(out[0, 0, 0, 0] - expected) <= 1e-6


class TestBlock:
    def test_zero_sublayers_match_hand_chain(self, f64, rng):
        cfg = m.ModelConfig(t_len=2, joints=1, num_classes=2, c_emb=2, heads=1, blocks=1)
        p = m.init_params(cfg, 0)
        for name, t in p.items():
            if name.startswith("blocks.0") and ".ln" not in name:
                t.data[...] = 0
        x = rng.normal(size=(2, 2, 2, 2))
        out = m.block_forward(Tensor(x), p, cfg, 0).data
        expected = ln_ref(ln_ref(ln_ref(x)) + x)
        assert np.abs(out - expected).max() <= 1e-6

    def test_wiring_with_live_sublayers(self, f64, rng):
        cfg = tiny_cfg()
        p = randomize(m.init_params(cfg, 0), rng)
        x = Tensor(rng.normal(size=(2, 3, 5, 8)))

        def ln(v, k):
            return tk.layer_norm(Tensor(v), p[f"blocks.0.{k}.gamma"], p[f"blocks.0.{k}.beta"], cfg.ln_eps).data

        h1 = ln(x.data + m.spatial_mhsa(x, p, cfg, 0).data, "ln1")
        h2 = ln(h1 + m.temporal_mhsa_rpe(Tensor(h1), p, cfg, 0).data, "ln2")
        expected = ln(m.ffn(Tensor(h2), p, cfg, 0).data + x.data, "ln3")
        np.testing.assert_allclose(m.block_forward(x, p, cfg, 0).data, expected, atol=1e-12)

    def test_stack_applies_each_block(self, f64, rng):
        cfg = tiny_cfg(blocks=10)
        p = randomize(m.init_params(cfg, 0), rng)
        x = m.encode_input(rng.normal(size=(1, 3, 4, 2)), p, cfg)
        manual = x
        for b in range(10):
            manual = m.block_forward(manual, p, cfg, b)
        np.testing.assert_array_equal(m.run_blocks(x, p, cfg).data, manual.data)

    @pytest.mark.parametrize("t", [4, 16])
    @pytest.mark.parametrize("v", [5, 21])
    @pytest.mark.parametrize("heads", [1, 4, 8])
    def test_shape_contract(self, t, v, heads, rng):
        cfg = m.ModelConfig(t_len=t, joints=v, num_classes=3, c_emb=16, heads=heads, blocks=1)
        p = m.init_params(cfg, 0)
        x = m.encode_input(rng.normal(size=(2, t, v, 2)), p, cfg)
        assert x.shape == (2, t, v + 1, 16)
        assert m.spatial_mhsa(x, p, cfg, 0).shape == x.shape
        assert m.temporal_mhsa_rpe(x, p, cfg, 0).shape == x.shape
        assert m.ffn(x, p, cfg, 0).shape == x.shape
        assert m.block_forward(x, p, cfg, 0).shape == x.shape
        assert m.forward(rng.normal(size=(2, t, v, 2)), p, cfg).shape == (2, 3)


class TestForward:
    def test_batch_logits(self, rng):
        cfg = tiny_cfg()
        out = m.forward(rng.normal(size=(2, 3, 4, 2)), m.init_params(cfg, 0), cfg)
        assert out.shape == (2, 3) and np.all(np.isfinite(out.data))

    def test_identical_samples(self, rng):
        cfg = tiny_cfg()
        x = rng.normal(size=(1, 3, 4, 2))
        out = m.forward(np.concatenate([x, x]), m.init_params(cfg, 0), cfg).data
        assert np.abs(out[0] - out[1]).max() <= 1e-6

    def test_readout_uses_class_joint_only(self, rng):
        cfg = tiny_cfg()
        p = randomize(m.init_params(cfg, 0), rng)
        feats = m.run_blocks(m.encode_input(rng.normal(size=(2, 3, 4, 2)), p, cfg), p, cfg).data
        base = m.readout(Tensor(feats), p).data
        poked = feats.copy()
        poked[:, :, 2] += 5.0
        np.testing.assert_array_equal(m.readout(Tensor(poked), p).data, base)
        poked = feats.copy()
        poked[:, :, 0] += 5.0
        assert np.abs(m.readout(Tensor(poked), p).data - base).max() > 1e-3

    def test_dropout_only_with_rng(self, rng):
        cfg = tiny_cfg(dropout=0.5)
        p = m.init_params(cfg, 0)
        x = rng.normal(size=(1, 3, 4, 2))
        a, b = m.forward(x, p, cfg).data, m.forward(x, p, cfg).data
        np.testing.assert_array_equal(a, b)
        c = m.forward(x, p, cfg, rng=np.random.default_rng(0)).data
        assert not np.array_equal(a, c)

    def test_end_to_end_gradients(self, f64, rng):
        cfg = m.ModelConfig(t_len=3, joints=4, num_classes=2, c_emb=8, heads=2, blocks=2, rpe_clip=3)
        p = randomize(m.init_params(cfg, 0), rng)
        frames = rng.normal(size=(2, 3, 4, 2))
        labels = np.array([0, 1])

        def loss():
            return -(tk.log_softmax(m.forward(frames, p, cfg))[np.arange(2), labels]).sum()

        assert check(loss, list(p.values())) <= 1e-4
