"""Loss, optimizer, training loop determinism, and classification metrics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dffnet.data import build_patch_dataset, pca_fit, pca_reduce_cube, split_dataset, synth_generate
from dffnet.model import ModelConfig, init_model_params
from dffnet.tensor import Tensor
from dffnet.train import (AdamState, ConfusionMatrix, TrainSettings, TrainingError,
                          adam_step, cross_entropy, evaluate, metrics, train,
                          write_confusion, write_history)


def toy_setup(train_fraction=0.5, dtype=np.float64, scene_seed=6, **config_overrides):
    scene = synth_generate(3, 14, 8, 1, seed=scene_seed)
    split = split_dataset(scene, train_fraction, seed=1)
    pca = pca_fit(np.array([scene.hsi[:, r, c] for r, c, _ in split.train]), 8)
    reduced = pca_reduce_cube(pca, scene.hsi)
    config = dict(num_classes=3, aux_channels=1, pca_components=8, patch_size=5,
                  width=4, dffm_count=1, filter_bases=2, post_width=8,
                  head_hidden=16, seed=3)
    config.update(config_overrides)
    config = ModelConfig(**config)
    train_ds = build_patch_dataset(reduced, scene.aux, scene.labels, split.train,
                                   config.patch_size, dtype)
    test_ds = build_patch_dataset(reduced, scene.aux, scene.labels, split.test,
                                  config.patch_size, dtype)
    return config, train_ds, test_ds


class TestCrossEntropy:
    def test_uniform_two_way(self):
        loss = cross_entropy(Tensor([0.0, 0.0]), 0)
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_huge_margin_vanishes(self):
        loss = cross_entropy(Tensor([20.0, 0.0]), 0)
        assert loss.item() < 1e-8

    def test_log_sum_exp_value(self):
        # -log softmax([1,2,3])[2] = log(1 + e^-1 + e^-2)
        expected = math.log(1.0 + math.exp(-1.0) + math.exp(-2.0))
        loss = cross_entropy(Tensor([1.0, 2.0, 3.0]), 2)
        assert loss.item() == pytest.approx(expected, abs=1e-12)
        assert loss.item() == pytest.approx(0.40761, abs=5e-6)

    def test_batch_mean(self):
        logits = Tensor(np.array([[0.0, 0.0], [20.0, 0.0]]))
        loss = cross_entropy(logits, np.array([0, 0]))
        assert loss.item() == pytest.approx(math.log(2.0) / 2.0, abs=1e-8)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor([0.0, 0.0]), 2)

    def test_extreme_logits_stable(self):
        loss = cross_entropy(Tensor([1000.0, -1000.0]), 1)
        assert np.isfinite(loss.item())


class TestAdam:
    def test_first_step_equals_lr(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([1.0])
        state = AdamState(lr=0.1)
        adam_step(state, {"p": p})
        assert p.data[0] == pytest.approx(0.9, abs=1e-7)

    def test_zero_gradient_no_motion(self):
        p = Tensor(np.array([2.5, -1.0]), requires_grad=True)
        before = p.data.tobytes()
        p.grad = np.zeros(2)
        adam_step(AdamState(lr=0.1), {"p": p})
        assert p.data.tobytes() == before

    def test_first_step_magnitude_gradient_invariant(self):
        deltas = []
        for g in (1.0, 1000.0):
            p = Tensor(np.array([0.0]), requires_grad=True)
            p.grad = np.array([g])
            adam_step(AdamState(lr=0.05), {"p": p})
            deltas.append(abs(p.data[0]))
        assert deltas[0] == pytest.approx(0.05, rel=1e-7)
        assert deltas[1] == pytest.approx(0.05, rel=1e-7)

    def test_nonfinite_gradient_aborts_with_name(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        with pytest.raises(TrainingError, match="'p'"):
            adam_step(AdamState(), {"p": p})

    def test_skips_unreached_parameters(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = None
        adam_step(AdamState(lr=0.1), {"p": p})
        assert p.data[0] == 1.0


class TestTrainLoop:
    def test_single_sample_overfit_loss_decreases(self):
        config, train_ds, _ = toy_setup()
        one = type(train_ds)(train_ds.hsi[:1], train_ds.aux[:1],
                             train_ds.labels[:1], train_ds.pixels[:1])
        params = init_model_params(config)
        settings = TrainSettings(epochs=21, lr=1e-3, seed=0, verbose=False)
        history = train(config, params, one, settings)
        losses = [rec.loss for rec in history]
        assert all(b < a for a, b in zip(losses[1:], losses[2:]))
        assert losses[-1] < losses[0]

    def test_zero_lr_leaves_params_bit_identical(self):
        config, train_ds, _ = toy_setup()
        params = init_model_params(config)
        before = {k: v.data.tobytes() for k, v in params.named_parameters().items()}
        train(config, params, train_ds,
              TrainSettings(epochs=2, lr=0.0, seed=0, verbose=False))
        after = {k: v.data.tobytes() for k, v in params.named_parameters().items()}
        assert before == after

    def test_same_seed_identical_history(self):
        config, train_ds, _ = toy_setup()
        runs = []
        for _ in range(2):
            params = init_model_params(config)
            history = train(config, params, train_ds,
                            TrainSettings(epochs=3, seed=5, verbose=False))
            runs.append([(rec.loss, rec.train_oa) for rec in history])
        assert runs[0] == runs[1]

    def test_empty_dataset_rejected(self):
        config, train_ds, _ = toy_setup()
        empty = type(train_ds)(train_ds.hsi[:0], train_ds.aux[:0],
                               train_ds.labels[:0], train_ds.pixels[:0])
        with pytest.raises(TrainingError, match="empty"):
            train(config, init_model_params(config), empty,
                  TrainSettings(epochs=1, verbose=False))

    @pytest.mark.slow
    def test_loss_drops_fivefold_on_small_subset(self):
        config, train_ds, _ = toy_setup()
        subset = type(train_ds)(train_ds.hsi[:32], train_ds.aux[:32],
                                train_ds.labels[:32], train_ds.pixels[:32])
        params = init_model_params(config)
        history = train(config, params, subset,
                        TrainSettings(epochs=50, lr=1e-3, seed=2, verbose=False))
        assert history[-1].loss < 0.2 * history[0].loss

    def test_history_file_format(self, tmp_path):
        config, train_ds, _ = toy_setup()
        params = init_model_params(config)
        history = train(config, params, train_ds,
                        TrainSettings(epochs=2, seed=0, verbose=False))
        write_history(tmp_path / "h.csv", history)
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,train_oa"
        assert len(lines) == 3
        epoch, loss, oa = lines[1].split(",")
        assert int(epoch) == 1 and float(loss) > 0 and 0.0 <= float(oa) <= 1.0


class TestEvaluate:
    def test_constant_predictor_single_column(self):
        config, train_ds, _ = toy_setup()
        params = init_model_params(config)
        for name, tensor in params.named_parameters().items():
            tensor.data = np.zeros_like(tensor.data)
        params.fc2_b.data = np.array([0.0, 5.0, 0.0])
        cm = evaluate(config, params, train_ds)
        nonzero_cols = np.nonzero(cm.counts.sum(axis=0))[0]
        np.testing.assert_array_equal(nonzero_cols, [1])
        assert cm.total == len(train_ds)

    def test_argmax_tie_breaks_low_index(self):
        config, train_ds, _ = toy_setup()
        params = init_model_params(config)
        for name, tensor in params.named_parameters().items():
            tensor.data = np.zeros_like(tensor.data)
        cm = evaluate(config, params, train_ds)  # all logits equal
        nonzero_cols = np.nonzero(cm.counts.sum(axis=0))[0]
        np.testing.assert_array_equal(nonzero_cols, [0])

    def test_hand_built_counts(self):
        # labels 0,0,1,1 with predictions 0,1,1,1
        counts = np.zeros((2, 2), dtype=np.int64)
        np.add.at(counts, (np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1])), 1)
        cm = ConfusionMatrix(counts)
        np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 2]])


class TestMetrics:
    def test_perfect(self):
        m = metrics(ConfusionMatrix(np.array([[50, 0], [0, 50]])))
        assert (m.oa, m.aa, m.kappa) == (1.0, 1.0, 1.0)

    def test_chance(self):
        m = metrics(ConfusionMatrix(np.array([[25, 25], [25, 25]])))
        assert m.oa == 0.5 and m.kappa == pytest.approx(0.0, abs=1e-15)

    def test_worked_example(self):
        m = metrics(ConfusionMatrix(np.array([[40, 10], [20, 30]])))
        assert m.oa == pytest.approx(0.70, abs=1e-12)
        assert m.aa == pytest.approx(0.70, abs=1e-12)
        assert m.kappa == pytest.approx(0.40, abs=1e-12)

    def test_empty_class_excluded_with_warning(self):
        cm = ConfusionMatrix(np.array([[10, 0, 0], [0, 5, 0], [0, 0, 0]]))
        with pytest.warns(UserWarning, match=r"\[2\]"):
            m = metrics(cm)
        assert m.aa == 1.0
        assert m.empty_classes == [2]
        assert np.isnan(m.per_class[2])

    def test_single_class_degenerate(self):
        m = metrics(ConfusionMatrix(np.array([[7]])))
        assert m.oa == 1.0 and m.kappa == 1.0

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            metrics(ConfusionMatrix(np.zeros((2, 2), dtype=np.int64)))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_bounds_and_diagonal_iff_kappa_one(self, seed):
        rng = np.random.default_rng(seed)
        counts = rng.integers(0, 30, size=(3, 3))
        counts[rng.integers(0, 3), rng.integers(0, 3)] += 1  # non-empty
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = metrics(ConfusionMatrix(counts))
        assert 0.0 <= m.oa <= 1.0
        assert 0.0 <= m.aa <= 1.0
        assert -1.0 <= m.kappa <= 1.0 + 1e-12
        off_diag = counts.sum() - np.trace(counts)
        if m.kappa == pytest.approx(1.0, abs=1e-12):
            assert off_diag == 0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_invariant_under_class_relabeling(self, seed):
        rng = np.random.default_rng(seed)
        counts = rng.integers(1, 20, size=(4, 4))
        perm = rng.permutation(4)
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            base = metrics(ConfusionMatrix(counts))
            permuted = metrics(ConfusionMatrix(counts[np.ix_(perm, perm)]))
        assert base.oa == pytest.approx(permuted.oa, abs=1e-12)
        assert base.aa == pytest.approx(permuted.aa, abs=1e-12)
        assert base.kappa == pytest.approx(permuted.kappa, abs=1e-12)

    def test_confusion_csv(self, tmp_path):
        cm = ConfusionMatrix(np.array([[3, 1], [0, 5]]))
        write_confusion(tmp_path / "cm.csv", cm)
        assert (tmp_path / "cm.csv").read_text().splitlines() == ["3,1", "0,5"]
