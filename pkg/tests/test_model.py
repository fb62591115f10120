"""Network assembly: stems, fusion stages, head, parameter count, checkpoints."""

import numpy as np
import pytest

from dffnet import dfb as dfb_mod
from dffnet import ssafb as ssafb_mod
from dffnet.data import DataError
from dffnet.model import (ModelConfig, count_parameters, dffm_forward, estimate_macs,
                          init_model_params, load_checkpoint, model_forward,
                          save_checkpoint, stem_forward)
from dffnet.tensor import ShapeError, Tensor


def toy_config(**overrides):
    base = dict(num_classes=3, aux_channels=1, pca_components=8, patch_size=5,
                width=4, dffm_count=1, filter_bases=2, post_width=8,
                head_hidden=16, seed=7)
    base.update(overrides)
    return ModelConfig(**base)


def zero_params_keeping_bases(params):
    """Zero every learnable except the near-all-pass filter bases."""
    for name, tensor in params.named_parameters().items():
        if "bases" not in name:
            tensor.data = np.zeros_like(tensor.data)


class TestConfig:
    def test_defaults_follow_published_setup(self):
        config = ModelConfig(num_classes=15)
        assert config.pca_components == 30
        assert config.dffm_count == 2
        assert config.patch_size == 11
        assert config.width == 64

    @pytest.mark.parametrize("bad", [
        dict(width=6), dict(patch_size=4), dict(dffm_count=0),
        dict(pca_components=5), dict(filter_bases=0), dict(num_classes=1),
    ])
    def test_invalid_configs_rejected(self, bad):
        with pytest.raises(ShapeError):
            toy_config(**bad)

    def test_stem_depth_arithmetic(self):
        assert ModelConfig(num_classes=2, pca_components=30).stem_depth_out == 12


class TestStem:
    def test_default_output_shapes(self):
        config = ModelConfig(num_classes=5)
        params = init_model_params(config)
        hsi = Tensor(np.random.default_rng(0).normal(size=(1, 1, 30, 11, 11)))
        aux = Tensor(np.random.default_rng(1).normal(size=(1, 1, 11, 11)))
        f_h, f_x = stem_forward(hsi, aux, params, config)
        assert f_h.shape == (1, 64, 11, 11)
        assert f_x.shape == (1, 64, 11, 11)

    def test_zero_weights_zero_features(self):
        config = toy_config()
        params = init_model_params(config)
        for name in ("stem3d", "stem1x1", "stem2d"):
            getattr(params, f"{name}_w").data *= 0.0
            getattr(params, f"{name}_b").data *= 0.0
        hsi = Tensor(np.random.default_rng(2).normal(size=(2, 1, 8, 5, 5)))
        aux = Tensor(np.random.default_rng(3).normal(size=(2, 1, 5, 5)))
        f_h, f_x = stem_forward(hsi, aux, params, config)
        assert np.abs(f_h.data).max() == 0.0
        assert np.abs(f_x.data).max() == 0.0

    @pytest.mark.parametrize("patch", [3, 5, 9])
    def test_spatial_size_preserved(self, patch):
        config = toy_config(patch_size=patch)
        params = init_model_params(config)
        hsi = Tensor(np.zeros((1, 1, 8, patch, patch)))
        aux = Tensor(np.zeros((1, 1, patch, patch)))
        f_h, f_x = stem_forward(hsi, aux, params, config)
        assert f_h.shape[-2:] == (patch, patch)
        assert f_x.shape[-2:] == (patch, patch)

    def test_shape_mismatch_rejected(self):
        config = toy_config()
        params = init_model_params(config)
        with pytest.raises(ShapeError):
            stem_forward(Tensor(np.zeros((1, 1, 9, 5, 5))),
                         Tensor(np.zeros((1, 1, 5, 5))), params, config)


class TestDffm:
    def test_both_flags_off_is_identity(self):
        config = toy_config()
        params = init_model_params(config)
        rng = np.random.default_rng(4)
        f_h = Tensor(rng.normal(size=(2, 4, 5, 5)))
        f_x = Tensor(rng.normal(size=(2, 4, 5, 5)))
        h2, x2 = dffm_forward(f_h, f_x, params.dffms[0], use_dfb=False, use_ssafb=False)
        np.testing.assert_array_equal(h2.data, f_h.data)
        np.testing.assert_array_equal(x2.data, f_x.data)

    def test_zero_params_near_identity(self):
        # with every weight zeroed except the near-all-pass bases, the
        # dynamic filter is the basis mean (~1) and the fusion residual is
        # exactly zero, so each stream is approximately preserved
        config = toy_config()
        params = init_model_params(config)
        zero_params_keeping_bases(params)
        rng = np.random.default_rng(5)
        f_h = Tensor(rng.normal(size=(1, 4, 5, 5)))
        f_x = Tensor(rng.normal(size=(1, 4, 5, 5)))
        h2, x2 = dffm_forward(f_h, f_x, params.dffms[0])
        assert np.abs(h2.data - f_h.data).max() < 0.15
        assert np.abs(x2.data - f_x.data).max() < 0.15

    def test_shape_contract(self):
        config = toy_config()
        params = init_model_params(config)
        f = Tensor(np.zeros((3, 4, 5, 5)))
        h2, x2 = dffm_forward(f, f, params.dffms[0])
        assert h2.shape == (3, 4, 5, 5) and x2.shape == (3, 4, 5, 5)


class TestForward:
    def test_logits_shape(self):
        config = toy_config(num_classes=15)
        params = init_model_params(config)
        rng = np.random.default_rng(6)
        hsi = Tensor(rng.normal(size=(2, 1, 8, 5, 5)))
        aux = Tensor(rng.normal(size=(2, 1, 5, 5)))
        assert model_forward(hsi, aux, config, params).shape == (2, 15)

    def test_deterministic_bitwise(self):
        config = toy_config()
        rng = np.random.default_rng(7)
        hsi = rng.normal(size=(2, 1, 8, 5, 5))
        aux = rng.normal(size=(2, 1, 5, 5))

        def run():
            params = init_model_params(config)
            return model_forward(Tensor(hsi), Tensor(aux), config, params).data.tobytes()

        assert run() == run()

    def test_batch_permutation_permutes_logits(self):
        config = toy_config()
        params = init_model_params(config)
        rng = np.random.default_rng(8)
        hsi = rng.normal(size=(4, 1, 8, 5, 5))
        aux = rng.normal(size=(4, 1, 5, 5))
        logits = model_forward(Tensor(hsi), Tensor(aux), config, params).data
        perm = np.array([2, 0, 3, 1])
        permuted = model_forward(Tensor(hsi[perm]), Tensor(aux[perm]), config, params).data
        np.testing.assert_allclose(permuted, logits[perm], atol=1e-12)

    def test_ablation_flags_change_output(self):
        config = toy_config()
        params = init_model_params(config)
        rng = np.random.default_rng(9)
        hsi = Tensor(rng.normal(size=(1, 1, 8, 5, 5)))
        aux = Tensor(rng.normal(size=(1, 1, 5, 5)))
        full = model_forward(hsi, aux, config, params).data
        no_dfb = model_forward(hsi, aux, toy_config(use_dfb=False), params).data
        assert np.abs(full - no_dfb).max() > 1e-9

    def test_finite_outputs_over_random_batches(self):
        config = toy_config()
        params = init_model_params(config)
        rng = np.random.default_rng(10)
        for _ in range(100):
            hsi = Tensor(rng.uniform(-10, 10, size=(2, 1, 8, 5, 5)))
            aux = Tensor(rng.uniform(-10, 10, size=(2, 1, 5, 5)))
            logits = model_forward(hsi, aux, config, params).data
            assert np.isfinite(logits).all()

    def test_gradcheck_toy_model(self):
        from dffnet.checks import run_checks

        ((_, report),) = run_checks(["model"], 1e-4, 0)
        assert report.passed, str(report)


class TestParameterCount:
    def test_linear_layer_count(self):
        from dffnet.ops import MlpSpec, init_mlp

        layers = init_mlp(np.random.default_rng(0), MlpSpec((30, 10)))
        assert sum(w.size + b.size for w, b in layers) == 310

    def test_toy_config_closed_form(self):
        config = toy_config()
        c, p, n, k = 4, 5, 2, 3
        wf = p // 2 + 1
        stem3d = 8 * 63 + 8
        stem1x1 = (8 * 1) * c + c
        stem2d = 9 * c + c
        mlp = c * 1 + 1 + 1 * n + n
        ffn = (c * 9 + c) + (2 * c * 9 + 2 * c)
        dfb = 2 * n * c * p * wf + mlp + ffn
        ca = c * 1 + 1 + 1 * c + c
        sa = 2 * 25 + 1
        fuse = 2 * c * c + c
        dffm = 2 * dfb + ca + sa + fuse
        post = 2 * (c * 8 * 9 + 8)
        head = (16 * 16 + 16) + (16 * k + k)
        expected = stem3d + stem1x1 + stem2d + dffm + post + head
        assert count_parameters(config) == expected

    def test_default_count_near_published(self):
        count = count_parameters(ModelConfig(num_classes=15))
        assert 0.9e6 <= count <= 1.7e6
        assert count == 1281573

    def test_macs_estimate_positive_and_scales(self):
        small = estimate_macs(toy_config())
        big = estimate_macs(ModelConfig(num_classes=15))
        assert 0 < small < big


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        config = toy_config()
        params = init_model_params(config)
        extras = {"pca.mean": np.arange(8.0), "pca.components": np.eye(8)}
        save_checkpoint(tmp_path / "ckpt", config, params, extras=extras,
                        meta={"train_fraction": 0.1, "split_seed": 3})
        config2, params2, extras2, meta = load_checkpoint(tmp_path / "ckpt")
        assert config2 == config
        for name, tensor in params.named_parameters().items():
            np.testing.assert_array_equal(params2.named_parameters()[name].data, tensor.data)
        np.testing.assert_array_equal(extras2["pca.mean"], extras["pca.mean"])
        assert meta["train_fraction"] == "0.1"

    def test_corrupt_tensor_magic(self, tmp_path):
        config = toy_config()
        params = init_model_params(config)
        save_checkpoint(tmp_path / "ckpt", config, params)
        victim = tmp_path / "ckpt" / "params" / "fc1.weight.dtns"
        victim.write_bytes(b"XXXX" + victim.read_bytes()[4:])
        with pytest.raises(DataError, match="magic"):
            load_checkpoint(tmp_path / "ckpt")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            load_checkpoint(tmp_path / "nothing")

    def test_missing_tensor(self, tmp_path):
        config = toy_config()
        params = init_model_params(config)
        save_checkpoint(tmp_path / "ckpt", config, params)
        (tmp_path / "ckpt" / "params" / "fc2.bias.dtns").unlink()
        with pytest.raises(DataError, match="fc2.bias"):
            load_checkpoint(tmp_path / "ckpt")
