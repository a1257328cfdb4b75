import numpy as np
import pytest

from coattn_affect import tensor as tc
from coattn_affect.errors import CheckpointMismatch, LengthMismatch, ShapeMismatch
from coattn_affect.fileio import read_checkpoint, write_checkpoint
from coattn_affect.metrics import ccc_loss
from coattn_affect.model import (
    AttentionBundle,
    CoAttentionRegressor,
    ModelConfig,
    QKVEncoder,
    attention_weights,
    branch_encode_qkv,
    coattention,
    coattention_matrices,
    colsum_broadcast,
    model_forward,
    standard_attention,
)
from coattn_affect.nn import BranchConfig, TemporalConvNet, VisualBackbone
from coattn_affect.tensor import GradTape, Tensor

from oracles import coattention_loops

TINY = ModelConfig(audio_dim=6, text_dim=5, visual_dim=4, backbone_channels=(2, 3, 4), crop_size=8,
                   tcn_channels=(5, 5), d_k=4, dropout=0.0, seed=7)


def tiny_inputs(rng, steps, cfg=TINY):
    s = cfg.crop_size
    return (Tensor(rng.uniform(-1, 1, (steps, 3, s, s))),
            Tensor(rng.standard_normal((steps, cfg.audio_dim))),
            Tensor(rng.standard_normal((steps, cfg.text_dim))))


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0.0


class TestBackbone:
    def test_window_of_default_frames(self):
        rng = np.random.default_rng(0)
        backbone = VisualBackbone((8, 16, 32), 64, 40, rng)
        out = backbone(Tensor(rng.uniform(-1, 1, (300, 3, 40, 40))))
        assert out.shape == (300, 64)

    def test_zero_frames_zero_output_layer(self):
        rng = np.random.default_rng(1)
        backbone = VisualBackbone((2, 3, 4), 6, 8, rng)
        zero_params(backbone.out)
        assert np.array_equal(backbone(Tensor(np.zeros((3, 3, 8, 8)))).data, np.zeros((3, 6)))

    def test_stateless_per_frame(self):
        rng = np.random.default_rng(2)
        backbone = VisualBackbone((2, 3, 4), 6, 8, rng)
        frame = rng.uniform(-1, 1, (3, 8, 8))
        out = backbone(Tensor(np.stack([frame, rng.uniform(-1, 1, (3, 8, 8)), frame]))).data
        assert np.array_equal(out[0], out[2])

    def test_wrong_spatial_size(self):
        backbone = VisualBackbone((2, 3, 4), 6, 40, np.random.default_rng(3))
        with pytest.raises(ShapeMismatch):
            backbone(Tensor(np.zeros((2, 3, 48, 48))))

    def test_three_named_stages(self):
        model = CoAttentionRegressor(TINY)
        groups = {model.parameter_group(n) for n, _ in model.named_parameters()}
        assert groups == {"head", "backbone.stage1", "backbone.stage2", "backbone.stage3"}
        assert model.parameter_group("backbone.out.weight") == "head"


class TestTcn:
    def test_zero_convs_leave_residual_projection(self):
        rng = np.random.default_rng(4)
        tcn = TemporalConvNet(BranchConfig(3, (5, 5), 3, (1, 2), 0.0), rng)
        for block in tcn.blocks:
            block.conv_weight.data[...] = 0.0
            block.conv_bias.data[...] = 0.0
        x = Tensor(rng.standard_normal((9, 3)))
        expected = tc.linear(x, tcn.block0.proj.weight).data
        assert np.allclose(tcn(x).data, expected, rtol=0, atol=1e-15)

    def test_zero_convs_identity_residual(self):
        rng = np.random.default_rng(5)
        tcn = TemporalConvNet(BranchConfig(4, (4,), 3, (1,), 0.0), rng)
        zero_params(tcn)
        x = Tensor(rng.standard_normal((6, 4)))
        assert np.array_equal(tcn(x).data, x.data)

    def test_unit_kernel_identity_passes_input(self):
        rng = np.random.default_rng(6)
        tcn = TemporalConvNet(BranchConfig(3, (3,), 1, (1,), 0.0, residual=False), rng)
        tcn.block0.conv_weight.data[...] = np.eye(3)[:, :, None]
        tcn.block0.conv_bias.data[...] = 0.0
        x = rng.uniform(0, 2, (8, 3))  # relu keeps non-negative inputs unchanged
        assert np.array_equal(tcn(Tensor(x)).data, x)

    def test_causal_on_random_data(self):
        rng = np.random.default_rng(7)
        tcn = TemporalConvNet(BranchConfig(3, (4, 4), 3, (1, 2), 0.0), rng)
        x = rng.standard_normal((20, 3))
        y = tcn(Tensor(x)).data
        for t in (0, 5, 13):
            x2 = x.copy()
            x2[t] += rng.standard_normal(3)
            y2 = tcn(Tensor(x2)).data
            assert np.array_equal(y2[:t], y[:t])
            assert not np.array_equal(y2[t:], y[t:])

    def test_length_preserved(self):
        tcn = TemporalConvNet(BranchConfig(2), np.random.default_rng(8)).eval()
        for steps in (1, 2, 7, 300):
            assert tcn(Tensor(np.ones((steps, 2)))).shape == (steps, 64)

    def test_rejects_wrong_width(self):
        tcn = TemporalConvNet(BranchConfig(2), np.random.default_rng(9))
        with pytest.raises(ShapeMismatch):
            tcn(Tensor(np.ones((4, 3))))

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            BranchConfig(3, (4, 4), 3, (1,))


class TestQkv:
    def test_identity_weights(self):
        rng = np.random.default_rng(10)
        enc = QKVEncoder(4, 4, rng)
        for lin in (enc.query, enc.key, enc.value):
            lin.weight.data[...] = np.eye(4)
            lin.bias.data[...] = 0.0
        x = Tensor(rng.standard_normal((5, 4)))
        q, k, v = branch_encode_qkv(x, enc)
        assert np.array_equal(q.data, x.data)

    def test_zero_weights(self):
        enc = QKVEncoder(4, 3, np.random.default_rng(11))
        zero_params(enc)
        for out in enc(Tensor(np.ones((5, 4)))):
            assert np.array_equal(out.data, np.zeros((5, 3)))

    def test_default_width_is_32(self):
        model = CoAttentionRegressor()
        enc = Tensor(np.ones((3, 64)))
        assert {t.shape[1] for t in model.audio_qkv(enc)} == {32}


class TestCoattention:
    def test_uniform_scores(self):
        q = Tensor(np.zeros((2, 2)))
        k = Tensor(np.random.default_rng(12).standard_normal((2, 2)))
        v = Tensor([[1.0, 0.0], [0.0, 1.0]])
        out = coattention_matrices(q, k, v).data
        assert np.allclose(out, [[1.5, 1.5], [1.5, 1.5]], rtol=0, atol=1e-15)

    def test_matches_scalar_loops(self):
        rng = np.random.default_rng(13)
        q, k, v = (rng.standard_normal((6, 32)) for _ in range(3))
        out = coattention_matrices(Tensor(q), Tensor(k), Tensor(v)).data
        assert np.max(np.abs(out - np.array(coattention_loops(q.tolist(), k.tolist(), v.tolist())))) <= 1e-10

    def test_decomposition(self):
        rng = np.random.default_rng(14)
        parts = [[Tensor(rng.standard_normal((4, 8))) for _ in range(3)] for _ in range(3)]
        bundle = AttentionBundle(*parts)
        assert bundle.Q.shape == (12, 8) and bundle.d_k == 8
        full = coattention(bundle).data
        split = standard_attention(bundle.Q, bundle.K, bundle.V).data + colsum_broadcast(bundle.V).data
        assert np.max(np.abs(full - split)) <= 1e-10

    def test_rows_are_stochastic(self):
        rng = np.random.default_rng(15)
        w = attention_weights(Tensor(rng.standard_normal((9, 4)) * 5), Tensor(rng.standard_normal((9, 4)))).data
        assert np.max(np.abs(w.sum(axis=1) - 1.0)) <= 1e-12

    def test_heads_split_width(self):
        rng = np.random.default_rng(16)
        q, k, v = (Tensor(rng.standard_normal((6, 8))) for _ in range(3))
        two = coattention_matrices(q, k, v, heads=2).data
        left = coattention_matrices(tc.slice_axis(q, 0, 4, 1), tc.slice_axis(k, 0, 4, 1),
                                    tc.slice_axis(v, 0, 4, 1)).data
        assert two.shape == (6, 8)
        assert np.allclose(two[:, :4], left, rtol=0, atol=1e-14)

    def test_bundle_needs_three_branches(self):
        t = Tensor(np.ones((2, 2)))
        with pytest.raises(ShapeMismatch):
            AttentionBundle([t, t], [t, t], [t, t])


class TestFusionHead:
    def test_zero_inputs_zero_bias(self):
        model = CoAttentionRegressor(TINY)
        model.head.bias.data[...] = 0.0
        out = model.fusion_head(Tensor(np.zeros((9, 4))), Tensor(np.zeros((3, 5))))
        assert np.array_equal(out.valence.data, np.zeros(3))
        assert np.array_equal(out.arousal.data, np.zeros(3))

    def test_visual_encoding_matters(self):
        rng = np.random.default_rng(17)
        model = CoAttentionRegressor(TINY)
        att = Tensor(rng.standard_normal((12, 4)))
        with_visual = model.fusion_head(att, Tensor(rng.standard_normal((4, 5))))
        without = model.fusion_head(att, Tensor(np.zeros((4, 5))))
        assert with_visual.valence.shape == (4,)
        assert not np.allclose(with_visual.valence.data, without.valence.data)

    def test_rejects_misaligned_attention(self):
        model = CoAttentionRegressor(TINY)
        with pytest.raises(ShapeMismatch):
            model.fusion_head(Tensor(np.zeros((10, 4))), Tensor(np.zeros((3, 5))))

    def test_separate_heads_option(self):
        cfg = ModelConfig(**{**TINY.to_dict(), "joint_head": False})
        model = CoAttentionRegressor(cfg)
        out = model(*tiny_inputs(np.random.default_rng(18), 5))
        assert out.valence.shape == out.arousal.shape == (5,)


class TestModelForward:
    def test_length_mismatch(self):
        rng = np.random.default_rng(19)
        v, a, t = tiny_inputs(rng, 300)
        _, _, short = tiny_inputs(rng, 299)
        with pytest.raises(LengthMismatch):
            model_forward(CoAttentionRegressor(TINY), v, a, short)

    def test_deterministic_with_dropout_seed(self):
        cfg = ModelConfig(**{**TINY.to_dict(), "dropout": 0.3})
        inputs = tiny_inputs(np.random.default_rng(20), 12)
        runs = []
        for _ in range(2):
            model = CoAttentionRegressor(cfg).train()
            runs.append(model(*inputs, rng=np.random.default_rng(99)).valence.data)
        assert np.array_equal(runs[0], runs[1])

    def test_default_model_on_300_frames(self):
        model = CoAttentionRegressor().eval()
        rng = np.random.default_rng(21)
        out = model(Tensor(rng.uniform(-1, 1, (300, 3, 40, 40))),
                    Tensor(rng.standard_normal((300, 128))), Tensor(rng.standard_normal((300, 768))))
        assert out.valence.shape == out.arousal.shape == (300,)

    @pytest.mark.parametrize("steps", [1, 2, 5, 33])
    def test_length_preserved_end_to_end(self, steps):
        out = CoAttentionRegressor(TINY)(*tiny_inputs(np.random.default_rng(steps), steps))
        assert out.valence.shape == (steps,)

    def test_gradient_reaches_every_branch(self):
        model = CoAttentionRegressor(TINY)
        model.set_trainable({"head", "backbone.stage1", "backbone.stage2", "backbone.stage3"})
        rng = np.random.default_rng(22)
        with GradTape() as tape:
            out = model(*tiny_inputs(rng, 10))
            loss = tc.add(ccc_loss(out.valence, rng.uniform(-1, 1, 10)),
                          ccc_loss(out.arousal, rng.uniform(-1, 1, 10)))
        tape.backward(loss)
        for prefix in ("backbone.stage1", "visual_tcn", "audio_tcn", "text_tcn",
                       "visual_qkv", "audio_qkv", "text_qkv"):
            norm = sum(np.linalg.norm(p.grad) for n, p in model.named_parameters() if n.startswith(prefix))
            assert norm > 0, prefix

    def test_frozen_groups_get_no_gradient(self):
        model = CoAttentionRegressor(TINY)
        model.set_trainable({"head"})
        rng = np.random.default_rng(23)
        with GradTape() as tape:
            out = model(*tiny_inputs(rng, 6))
            loss = ccc_loss(out.valence, rng.uniform(-1, 1, 6))
        tape.backward(loss)
        for name, p in model.named_parameters():
            if name.startswith("backbone.stage"):
                assert p.grad is None
            else:
                assert p.grad is not None


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = CoAttentionRegressor(TINY)
        state = model.state_dict()
        write_checkpoint(tmp_path / "m.afwt", state)
        back = read_checkpoint(tmp_path / "m.afwt")
        assert list(back) == list(state)
        for name in state:
            assert back[name].tobytes() == state[name].tobytes()
        write_checkpoint(tmp_path / "again.afwt", back)
        assert (tmp_path / "again.afwt").read_bytes() == (tmp_path / "m.afwt").read_bytes()

    def test_load_restores_model(self, tmp_path):
        source, target = CoAttentionRegressor(TINY), CoAttentionRegressor(ModelConfig(**{**TINY.to_dict(), "seed": 8}))
        write_checkpoint(tmp_path / "m.afwt", source.state_dict())
        target.load_state_dict(read_checkpoint(tmp_path / "m.afwt"))
        inputs = tiny_inputs(np.random.default_rng(24), 4)
        assert np.array_equal(source(*inputs).valence.data, target(*inputs).valence.data)

    def test_architecture_drift(self, tmp_path):
        write_checkpoint(tmp_path / "m.afwt", CoAttentionRegressor(TINY).state_dict())
        other = CoAttentionRegressor(ModelConfig(**{**TINY.to_dict(), "d_k": 8}))
        with pytest.raises(CheckpointMismatch):
            other.load_state_dict(read_checkpoint(tmp_path / "m.afwt"))
