import numpy as np
import pytest

from ordinal_siamese import tensor as T
from ordinal_siamese.encoder import (ConfigError, EncoderConfig, checkpoint_bytes, embed, forward,
                                     init_params, load_params, save_params)
from ordinal_siamese.loss import weighted_loss

from conftest import assert_grad_close, numeric_grad


class TestConfig:
    def test_default_is_valid(self):
        cfg = EncoderConfig()
        assert cfg.spatial_trace()[-1] == (2, 2, 2)

    def test_roundtrip(self, tiny_encoder_cfg):
        assert EncoderConfig.from_dict(tiny_encoder_cfg.to_dict()) == tiny_encoder_cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            EncoderConfig.from_dict({"depth": 50})

    def test_bad_stride(self):
        with pytest.raises(ConfigError):
            EncoderConfig(stages=((1, 8, 3),))
        with pytest.raises(ConfigError):
            EncoderConfig(stem_stride=4)

    def test_small_input_keeps_one_voxel(self):
        cfg = EncoderConfig(input_shape=(1, 1, 1, 1), stem_stride=2, stages=((1, 2, 2),) * 3)
        assert cfg.spatial_trace()[-1] == (1, 1, 1)

    def test_head_must_end_at_embedding_dim(self):
        with pytest.raises(ConfigError):
            EncoderConfig(head_dims=(16, 4), embedding_dim=8)

    def test_projection_only_when_needed(self, tiny_encoder_cfg):
        shapes = tiny_encoder_cfg.param_shapes()
        assert "stage0.block0.proj" not in shapes
        assert shapes["stage1.block0.proj"] == (3, 2, 1, 1, 1)


class TestParams:
    def test_init_is_pure(self, tiny_encoder_cfg):
        a, b = init_params(tiny_encoder_cfg, 3), init_params(tiny_encoder_cfg, 3)
        assert a.equals(b)
        assert not a.equals(init_params(tiny_encoder_cfg, 4))

    def test_bounds(self, tiny_encoder_cfg):
        p = init_params(tiny_encoder_cfg, 0)
        k = p.tensors["stem.kernel"]
        assert np.abs(k).max() <= np.sqrt(6 / 27)
        np.testing.assert_array_equal(p.tensors["head0.bias"], 0.0)

    def test_checkpoint_roundtrip(self, tiny_encoder_cfg, tmp_path):
        p = init_params(tiny_encoder_cfg, 5)
        save_params(p, tmp_path / "m.ckpt")
        q = load_params(tmp_path / "m.ckpt")
        assert q.equals(p) and q.config == p.config and q.seed == 5
        assert checkpoint_bytes(q) == (tmp_path / "m.ckpt").read_bytes()

    def test_checkpoint_bad_magic(self):
        with pytest.raises(ValueError):
            load_params(b"NOTACKPT" + bytes(16))


class TestForward:
    def test_shapes(self, tiny_encoder_cfg):
        p = init_params(tiny_encoder_cfg, 0)
        rng = np.random.default_rng(0)
        assert embed(p, rng.normal(size=(1, 4, 4, 4))).shape == (3,)
        assert embed(p, rng.normal(size=(5, 1, 4, 4, 4))).shape == (5, 3)

    def test_batch_matches_single(self, tiny_encoder_cfg):
        p = init_params(tiny_encoder_cfg, 0)
        x = np.random.default_rng(1).normal(size=(3, 1, 4, 4, 4))
        batched = embed(p, x).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], embed(p, x[i]).data, rtol=1e-12, atol=1e-14)

    def test_wrong_volume_shape(self, tiny_encoder_cfg):
        p = init_params(tiny_encoder_cfg, 0)
        with pytest.raises(T.ShapeError):
            embed(p, np.zeros((1, 5, 4, 4)))

    def test_full_composition_gradient(self, tiny_encoder_cfg):
        """Encoder + weighted triplet loss against central differences, 20 sampled entries per tensor."""
        rng = np.random.default_rng(2)
        params = init_params(tiny_encoder_cfg, 1)
        a, pz, n = (rng.normal(size=(2, 1, 4, 4, 4)) for _ in range(3))
        alpha = np.array([1.3, 1.7])

        def loss_of(tensors):
            ea, ep, en = (forward(tiny_encoder_cfg, tensors, x) for x in (a, pz, n))
            return T.mean(weighted_loss(T.euclidean_distance(ea, ep), T.euclidean_distance(ea, en), alpha, 3.0))

        tape = T.Tape()
        w = params.on_tape(tape)
        grads = T.backward(tape, loss_of(w))
        for name, arr in params.tensors.items():
            flat = arr.reshape(-1)
            picks = rng.choice(flat.size, size=min(20, flat.size), replace=False)
            analytic = grads[w[name].grad_id].data.reshape(-1)[picks]

            def f(v, name=name):
                full = flat.copy()
                full[picks] = v
                return loss_of({**params.tensors, name: full.reshape(arr.shape)}).item()

            assert_grad_close(analytic, numeric_grad(f, flat[picks]))
