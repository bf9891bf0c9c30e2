import numpy as np
import pytest

from clprop.graph import build_graph, make_splits
from clprop.mlp import (
    EpochRecord,
    MlpParams,
    TrainConfig,
    TrainingDivergedError,
    forward,
    init_mlp,
    load_params,
    loss_and_gradients,
    params_checksum,
    predict,
    save_params,
    train,
    training_log_to_csv,
)


def make_blobs(n_per_class=100, separation=6.0, seed=0, num_classes=2):
    """Gaussian blobs on a circle of radius ``separation``; unit noise, so
    large separations are linearly separable with overwhelming probability."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centers = separation * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    features = np.concatenate(
        [centers[c] + rng.standard_normal((n_per_class, 2)) for c in range(num_classes)]
    )
    labels = np.repeat(np.arange(num_classes), n_per_class)
    n = num_classes * n_per_class
    return build_graph(n, [], features, labels, num_classes)


class TestInit:
    def test_layer_shapes(self):
        p = init_mlp(4, 8, 1, 3, seed=0)
        assert [w.shape for w in p.weights] == [(4, 8), (8, 3)]
        assert [b.shape for b in p.biases] == [(8,), (3,)]

    def test_deterministic(self):
        a = init_mlp(5, 7, 2, 3, seed=42)
        b = init_mlp(5, 7, 2, 3, seed=42)
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_seed_changes_weights(self):
        a = init_mlp(5, 7, 1, 3, seed=0)
        b = init_mlp(5, 7, 1, 3, seed=1)
        assert any((wa != wb).any() for wa, wb in zip(a.weights, b.weights))

    def test_glorot_range(self):
        p = init_mlp(10, 20, 1, 4, seed=3)
        s = np.sqrt(6.0 / 30)
        assert np.abs(p.weights[0]).max() <= s
        assert all(not b.any() for b in p.biases)

    def test_zero_dimension(self):
        with pytest.raises(ValueError):
            init_mlp(0, 8, 1, 3, seed=0)

    def test_broken_chain_rejected(self):
        with pytest.raises(ValueError, match="chain"):
            MlpParams([np.zeros((3, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)])


class TestForward:
    def test_zero_params_zero_logits(self):
        p = MlpParams([np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)])
        out = forward(p, np.ones((5, 3)))
        np.testing.assert_array_equal(out, np.zeros((5, 2)))

    def test_single_linear_identity(self):
        p = MlpParams([np.eye(3)], [np.zeros(3)], dropout_rate=0.0)
        x = np.arange(12, dtype=float).reshape(4, 3)
        np.testing.assert_array_equal(forward(p, x), x)

    def test_dropout_only_in_train_mode(self):
        p = init_mlp(4, 32, 1, 2, seed=0, dropout_rate=0.5)
        x = np.ones((8, 4))
        a = forward(p, x)
        b = forward(p, x)
        np.testing.assert_array_equal(a, b)
        c = forward(p, x, train_mode=True, seed=0)
        d = forward(p, x, train_mode=True, seed=1)
        assert (c != d).any()

    def test_dimension_mismatch(self):
        p = init_mlp(4, 8, 1, 2, seed=0)
        with pytest.raises(ValueError, match="feature dim"):
            forward(p, np.ones((2, 5)))


class TestPredict:
    def test_zero_logits_uniform(self):
        p = MlpParams([np.zeros((2, 3))], [np.zeros(3)])
        out = predict(p, np.ones((4, 2)))
        np.testing.assert_allclose(out.values, 1 / 3)

    def test_large_logits_no_overflow(self):
        p = MlpParams([np.eye(2)], [np.zeros(2)])
        out = predict(p, np.array([[1000.0, 0.0]]))
        assert np.isfinite(out.values).all()
        np.testing.assert_allclose(out.values[0], [1.0, 0.0], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(8)
        p = init_mlp(6, 16, 2, 5, seed=1)
        out = predict(p, rng.standard_normal((50, 6)) * 10)
        np.testing.assert_allclose(out.values.sum(axis=1), 1.0, atol=1e-12)
        assert out.values.min() > 0 and out.values.max() < 1


def central_difference(params, x, labels, layer, which, index, eps=1e-5):
    def loss_at(offset):
        plus = params.copy()
        target = plus.weights[layer] if which == "w" else plus.biases[layer]
        target[index] += offset
        loss, _ = loss_and_gradients(plus, x, labels)
        return loss

    return (loss_at(eps) - loss_at(-eps)) / (2 * eps)


class TestGradients:
    @pytest.mark.parametrize("instance_seed", range(5))
    def test_matches_central_differences(self, instance_seed):
        rng = np.random.default_rng(100 + instance_seed)
        num_layers = int(rng.integers(1, 4))
        p = init_mlp(5, 6, num_layers, 3, seed=instance_seed, dropout_rate=0.0)
        x = rng.standard_normal((12, 5))
        labels = rng.integers(0, 3, 12)
        _, grads = loss_and_gradients(p, x, labels)
        for _ in range(20):
            layer = int(rng.integers(0, len(p.weights)))
            if rng.random() < 0.8:
                w = p.weights[layer]
                index = (int(rng.integers(w.shape[0])), int(rng.integers(w.shape[1])))
                analytic = grads[layer][0][index]
                which = "w"
            else:
                index = (int(rng.integers(p.biases[layer].shape[0])),)
                analytic = grads[layer][1][index]
                which = "b"
            numeric = central_difference(p, x, labels, layer, which, index)
            scale = max(abs(numeric), abs(analytic), 1e-8)
            assert abs(numeric - analytic) / scale < 1e-3


class TestTrain:
    def test_separable_blobs_reach_high_accuracy(self):
        from clprop.metrics import accuracy

        graph = make_blobs(100, seed=0)
        split = make_splits(graph, "dense", seed=0)[0]
        params = init_mlp(2, 16, 1, 2, seed=0, dropout_rate=0.0)
        config = TrainConfig(learning_rate=0.05, epochs=500, early_stop_patience=500,
                             weight_decay=0.0, hidden_dim=16)
        trained, log = train(params, graph, split, config)
        preds = predict(trained, graph.features)
        assert accuracy(preds, graph.labels, split.train) >= 0.99

    def test_zero_learning_rate_is_a_no_op(self):
        graph = make_blobs(20, seed=1)
        split = make_splits(graph, "dense", seed=0)[0]
        params = init_mlp(2, 8, 1, 2, seed=0, dropout_rate=0.0)
        before = [w.copy() for w in params.weights]
        config = TrainConfig(learning_rate=0.0, epochs=20, early_stop_patience=20)
        trained, log = train(params, graph, split, config)
        for w0, w1 in zip(before, trained.weights):
            np.testing.assert_array_equal(w0, w1)
        losses = {rec.train_loss for rec in log}
        assert len(losses) == 1

    def test_non_finite_loss_raises(self):
        # overflow-scale weights make the very first loss non-finite, which is
        # exactly the diverged-learning-rate signature the guard looks for
        graph = make_blobs(30, seed=2)
        split = make_splits(graph, "dense", seed=0)[0]
        params = MlpParams(
            [np.full((2, 8), 1e200), np.full((8, 2), 1e200)],
            [np.zeros(8), np.zeros(2)],
            dropout_rate=0.0,
        )
        config = TrainConfig(learning_rate=0.01, epochs=5, early_stop_patience=5)
        with pytest.raises(TrainingDivergedError):
            train(params, graph, split, config)

    def test_loss_monotone_without_dropout(self):
        graph = make_blobs(50, seed=3)
        split = make_splits(graph, "dense", seed=0)[0]
        params = init_mlp(2, 8, 1, 2, seed=0, dropout_rate=0.0)
        config = TrainConfig(learning_rate=1e-3, epochs=60, early_stop_patience=60,
                             weight_decay=0.0)
        _, log = train(params, graph, split, config)
        losses = [rec.train_loss for rec in log]
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_early_stop_returns_best_snapshot(self):
        from clprop.metrics import accuracy

        graph = make_blobs(60, separation=1.2, seed=4)
        split = make_splits(graph, "medium", seed=1)[0]
        params = init_mlp(2, 8, 1, 2, seed=2, dropout_rate=0.5)
        config = TrainConfig(learning_rate=0.02, epochs=150, early_stop_patience=25)
        trained, log = train(params, graph, split, config)
        best_logged = max(rec.val_acc for rec in log)
        achieved = accuracy(predict(trained, graph.features), graph.labels, split.validation)
        assert achieved == pytest.approx(best_logged)

    def test_empty_train_mask(self):
        import dataclasses

        graph = make_blobs(20, seed=5)
        split = make_splits(graph, "dense", seed=0)[0]
        split = dataclasses.replace(split, train=np.array([], dtype=np.int64))
        params = init_mlp(2, 8, 1, 2, seed=0)
        with pytest.raises(ValueError, match="nonempty"):
            train(params, graph, split, TrainConfig())

    def test_patience_bounded_by_epochs(self):
        with pytest.raises(ValueError, match="patience"):
            TrainConfig(epochs=10, early_stop_patience=20)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        p = init_mlp(7, 5, 2, 4, seed=9, dropout_rate=0.25)
        path = tmp_path / "ckpt.bin"
        save_params(p, path)
        q = load_params(path)
        assert q.dropout_rate == p.dropout_rate
        for wa, wb in zip(p.weights, q.weights):
            np.testing.assert_array_equal(wa, wb)
        for ba, bb in zip(p.biases, q.biases):
            np.testing.assert_array_equal(ba, bb)

    def test_checksum_tracks_content(self):
        a = init_mlp(3, 4, 1, 2, seed=0)
        b = init_mlp(3, 4, 1, 2, seed=0)
        c = init_mlp(3, 4, 1, 2, seed=1)
        assert params_checksum(a) == params_checksum(b)
        assert params_checksum(a) != params_checksum(c)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="checkpoint"):
            load_params(path)

    def test_log_csv(self, tmp_path):
        log = [EpochRecord(0, 1.5, 0.5), EpochRecord(1, 1.2, 0.75)]
        path = tmp_path / "log.csv"
        training_log_to_csv(log, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_acc"
        assert lines[1].startswith("0,1.5,")
