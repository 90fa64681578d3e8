import numpy as np
import pytest

from fedlora.data import Dataset
from fedlora.lora import LoraAdapter, effective_delta, init_adapter
from fedlora.model import (
    AdamState,
    FrozenBase,
    TrainingConfig,
    adam_step,
    evaluate,
    forward,
    init_adam_state,
    l2_penalty,
    local_train,
    loss_and_grads,
)


def finite_difference_grads(base, adapter, mask, features, labels, cfg, step=1e-5):
    """Central differences over every trainable element, using only loss values."""
    mask = np.asarray(mask, dtype=bool)
    active = np.nonzero(mask)[0]

    def loss_at(b, a):
        probe = LoraAdapter(b=b, a=a, rank=adapter.rank, scale=adapter.scale)
        loss, _, _ = loss_and_grads(base, probe, mask, features, labels, cfg)
        return loss

    grad_b = np.zeros((adapter.out_dim, len(active)))
    for slot, i in enumerate(active):
        for r in range(adapter.out_dim):
            plus, minus = adapter.b.copy(), adapter.b.copy()
            plus[r, i] += step
            minus[r, i] -= step
            grad_b[r, slot] = (loss_at(plus, adapter.a) - loss_at(minus, adapter.a)) / (2 * step)
    grad_a = np.zeros((len(active), adapter.in_dim))
    for slot, i in enumerate(active):
        for c in range(adapter.in_dim):
            plus, minus = adapter.a.copy(), adapter.a.copy()
            plus[i, c] += step
            minus[i, c] -= step
            grad_a[slot, c] = (loss_at(adapter.b, plus) - loss_at(adapter.b, minus)) / (2 * step)
    return grad_b, grad_a


def random_instance(rng, out_dim=None, in_dim=None, rank=None):
    out_dim = out_dim or int(rng.integers(2, 7))
    in_dim = in_dim or int(rng.integers(1, 8))
    rank = rank or int(rng.integers(1, 5))
    base = FrozenBase(weights=rng.standard_normal((out_dim, in_dim)))
    adapter = LoraAdapter(
        b=rng.standard_normal((out_dim, rank)),
        a=rng.standard_normal((rank, in_dim)),
        rank=rank,
        scale=float(rng.uniform(0.5, 2.0)),
    )
    n = int(rng.integers(1, 9))
    features = rng.standard_normal((n, in_dim))
    labels = rng.integers(0, out_dim, size=n)
    mask = np.zeros(rank, dtype=bool)
    mask[rng.choice(rank, size=int(rng.integers(1, rank + 1)), replace=False)] = True
    return base, adapter, mask, features, labels


class TestForward:
    def test_zero_adapter_reduces_to_base(self):
        rng = np.random.default_rng(0)
        base = FrozenBase(weights=rng.standard_normal((4, 6)))
        adapter = init_adapter(4, 6, 2, seed=0)
        x = rng.standard_normal(6)
        assert np.array_equal(forward(base, adapter, x), base.weights @ x)

    def test_hand_example(self):
        base = FrozenBase(weights=np.zeros((2, 2)))
        adapter = LoraAdapter(
            b=np.array([[1.0], [0.0]]), a=np.array([[2.0, 0.0]]), rank=1, scale=1.0
        )
        assert np.array_equal(forward(base, adapter, [3.0, 1.0]), [6.0, 0.0])

    def test_matches_dense_product_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            base, adapter, _, features, _ = random_instance(rng)
            x = features[0]
            dense = (base.weights + effective_delta(adapter)) @ x
            np.testing.assert_allclose(forward(base, adapter, x), dense, rtol=1e-10, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        base = FrozenBase(weights=np.zeros((2, 3)))
        adapter = init_adapter(2, 3, 1, seed=0)
        with pytest.raises(ValueError):
            forward(base, adapter, np.zeros(4))


class TestLossAndGrads:
    def test_gradients_vanish_at_confident_optimum(self):
        # Base logits overwhelmingly favor the true class, so softmax is one-hot
        # to machine precision and the unregularized gradient is ~0.
        base = FrozenBase(weights=np.array([[100.0, 0.0], [-100.0, 0.0]]))
        adapter = init_adapter(2, 2, 1, seed=0)
        cfg = TrainingConfig(weight_decay=0.0)
        features = np.array([[1.0, 0.3], [1.0, -0.2]])
        labels = np.array([0, 0])
        _, grad_b, grad_a = loss_and_grads(base, adapter, [True], features, labels, cfg)
        assert np.abs(grad_b).max() < 1e-8
        assert np.abs(grad_a).max() < 1e-8

    @pytest.mark.parametrize("weight_decay", [0.0, 0.001, 0.1])
    def test_matches_finite_differences(self, weight_decay):
        rng = np.random.default_rng(2)
        cfg = TrainingConfig(weight_decay=weight_decay)
        for _ in range(12):
            base, adapter, mask, features, labels = random_instance(rng)
            _, grad_b, grad_a = loss_and_grads(base, adapter, mask, features, labels, cfg)
            fd_b, fd_a = finite_difference_grads(base, adapter, mask, features, labels, cfg)
            scale = max(np.abs(fd_b).max(), np.abs(fd_a).max(), 1e-12)
            assert np.abs(grad_b - fd_b).max() / scale < 1e-5
            assert np.abs(grad_a - fd_a).max() / scale < 1e-5

    def test_frozen_components_shape_loss_but_get_no_gradient(self):
        rng = np.random.default_rng(3)
        base = FrozenBase(weights=rng.standard_normal((3, 4)))
        adapter = LoraAdapter(
            b=rng.standard_normal((3, 2)), a=rng.standard_normal((2, 4)), rank=2
        )
        zeroed_frozen = LoraAdapter(
            b=np.column_stack([adapter.b[:, 0], np.zeros(3)]),
            a=np.vstack([adapter.a[0, :], np.zeros(4)]),
            rank=2,
        )
        cfg = TrainingConfig(weight_decay=0.0)
        features = rng.standard_normal((5, 4))
        labels = rng.integers(0, 3, size=5)
        mask = np.array([True, False])
        loss_full, grad_b, grad_a = loss_and_grads(base, adapter, mask, features, labels, cfg)
        loss_zeroed, _, _ = loss_and_grads(base, zeroed_frozen, mask, features, labels, cfg)
        assert grad_b.shape == (3, 1) and grad_a.shape == (1, 4)
        assert loss_full != loss_zeroed

    def test_loss_decomposition_is_exact(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            base, adapter, mask, features, labels = random_instance(rng)
            with_decay = TrainingConfig(weight_decay=0.37)
            without = TrainingConfig(weight_decay=0.0)
            loss_wd, _, _ = loss_and_grads(base, adapter, mask, features, labels, with_decay)
            loss_0, _, _ = loss_and_grads(base, adapter, mask, features, labels, without)
            assert loss_wd == loss_0 + l2_penalty(adapter, mask, 0.37)

    def test_empty_batch_rejected(self):
        base = FrozenBase(weights=np.zeros((2, 2)))
        adapter = init_adapter(2, 2, 1, seed=0)
        with pytest.raises(ValueError):
            loss_and_grads(
                base, adapter, [True], np.zeros((0, 2)), np.zeros(0, dtype=int), TrainingConfig()
            )

    def test_all_false_mask_rejected(self):
        base = FrozenBase(weights=np.zeros((2, 2)))
        adapter = init_adapter(2, 2, 1, seed=0)
        with pytest.raises(ValueError):
            loss_and_grads(
                base, adapter, [False], np.zeros((1, 2)), np.zeros(1, dtype=int), TrainingConfig()
            )


class TestAdamStep:
    def test_zero_gradients_leave_parameters_unchanged(self):
        rng = np.random.default_rng(5)
        adapter = LoraAdapter(b=rng.standard_normal((3, 2)), a=rng.standard_normal((2, 4)), rank=2)
        mask = np.array([True, True])
        state = init_adam_state(3, 4, 2)
        updated, new_state = adam_step(
            adapter, mask, (np.zeros((3, 2)), np.zeros((2, 4))), state, TrainingConfig()
        )
        assert np.array_equal(updated.b, adapter.b)
        assert np.array_equal(updated.a, adapter.a)
        assert new_state.step == 1

    def test_first_step_matches_bias_corrected_oracle(self):
        rng = np.random.default_rng(6)
        cfg = TrainingConfig(learning_rate=0.01)
        adapter = LoraAdapter(b=rng.standard_normal((3, 2)), a=rng.standard_normal((2, 4)), rank=2)
        grad_b = rng.standard_normal((3, 2))
        grad_a = rng.standard_normal((2, 4))
        mask = np.array([True, True])
        updated, _ = adam_step(adapter, mask, (grad_b, grad_a), init_adam_state(3, 4, 2), cfg)
        # With zero moments the bias-corrected first step is lr * g / (|g| + eps).
        expected_b = adapter.b - cfg.learning_rate * grad_b / (np.abs(grad_b) + cfg.adam_eps)
        expected_a = adapter.a - cfg.learning_rate * grad_a / (np.abs(grad_a) + cfg.adam_eps)
        np.testing.assert_allclose(updated.b, expected_b, rtol=1e-12)
        np.testing.assert_allclose(updated.a, expected_a, rtol=1e-12)

    def test_frozen_slices_bit_identical_after_many_steps(self):
        rng = np.random.default_rng(7)
        adapter = LoraAdapter(b=rng.standard_normal((3, 4)), a=rng.standard_normal((4, 5)), rank=4)
        mask = np.array([True, False, True, False])
        frozen_b = adapter.b[:, [1, 3]].copy()
        frozen_a = adapter.a[[1, 3], :].copy()
        state = init_adam_state(3, 5, 2)
        cfg = TrainingConfig()
        for _ in range(100):
            grads = (rng.standard_normal((3, 2)), rng.standard_normal((2, 5)))
            adapter, state = adam_step(adapter, mask, grads, state, cfg)
        assert np.array_equal(adapter.b[:, [1, 3]], frozen_b)
        assert np.array_equal(adapter.a[[1, 3], :], frozen_a)
        assert state.step == 100

    def test_gradient_shape_mismatch_rejected(self):
        adapter = init_adapter(3, 4, 2, seed=0)
        state = init_adam_state(3, 4, 1)
        with pytest.raises(ValueError):
            adam_step(
                adapter,
                [True, False],
                (np.zeros((3, 2)), np.zeros((2, 4))),
                state,
                TrainingConfig(),
            )


def planted_shard(rng, n=60, out_dim=4, in_dim=6, rank=2):
    base = FrozenBase(weights=0.01 * rng.standard_normal((out_dim, in_dim)))
    planted = LoraAdapter(
        b=rng.standard_normal((out_dim, rank)), a=rng.standard_normal((rank, in_dim)), rank=rank
    )
    features = rng.standard_normal((n, in_dim))
    labels = ((base.weights + planted.b @ planted.a) @ features.T).argmax(axis=0)
    return base, planted, Dataset(features=features, labels=labels, class_count=out_dim)


class TestLocalTrain:
    def test_zero_epochs_is_identity(self):
        rng = np.random.default_rng(8)
        base, _, shard = planted_shard(rng)
        adapter = init_adapter(4, 6, 2, seed=1)
        cfg = TrainingConfig(local_epochs=0)
        trained = local_train(base, adapter, [True, True], shard, cfg, seed=0)
        assert np.array_equal(trained.b, adapter.b)
        assert np.array_equal(trained.a, adapter.a)

    def test_same_seed_is_bitwise_deterministic(self):
        rng = np.random.default_rng(9)
        base, _, shard = planted_shard(rng)
        adapter = init_adapter(4, 6, 2, seed=1)
        cfg = TrainingConfig(local_epochs=2, batch_size=16)
        first = local_train(base, adapter, [True, True], shard, cfg, seed=5)
        second = local_train(base, adapter, [True, True], shard, cfg, seed=5)
        assert np.array_equal(first.b, second.b)
        assert np.array_equal(first.a, second.a)

    def test_loss_decreases_after_one_epoch_on_planted_shard(self):
        rng = np.random.default_rng(10)
        base, _, shard = planted_shard(rng, n=120)
        adapter = init_adapter(4, 6, 2, seed=1)
        cfg = TrainingConfig(local_epochs=1, batch_size=16)
        _, before = evaluate(base, adapter, shard)
        trained = local_train(base, adapter, [True, True], shard, cfg, seed=0)
        _, after = evaluate(base, trained, shard)
        assert after <= before

    def test_empty_shard_rejected(self):
        base = FrozenBase(weights=np.zeros((2, 2)))
        adapter = init_adapter(2, 2, 1, seed=0)
        empty = Dataset(features=np.zeros((0, 2)), labels=np.zeros(0, dtype=int), class_count=2)
        with pytest.raises(ValueError):
            local_train(base, adapter, [True], empty, TrainingConfig(), seed=0)


class TestEvaluate:
    def test_oracle_weights_are_perfect(self):
        rng = np.random.default_rng(11)
        base, planted, shard = planted_shard(rng, n=200)
        accuracy, _ = evaluate(base, planted, shard)
        assert accuracy == 1.0

    def test_untrained_model_near_chance_on_random_labels(self):
        rng = np.random.default_rng(12)
        base = FrozenBase(weights=rng.standard_normal((4, 8)))
        adapter = init_adapter(4, 8, 2, seed=0)
        n = 4000
        dataset = Dataset(
            features=rng.standard_normal((n, 8)),
            labels=rng.integers(0, 4, size=n),
            class_count=4,
        )
        accuracy, _ = evaluate(base, adapter, dataset)
        # Binomial 4-sigma envelope around 1/4.
        bound = 4 * np.sqrt(0.25 * 0.75 / n)
        assert abs(accuracy - 0.25) < bound

    def test_accuracy_invariant_under_permutation(self):
        rng = np.random.default_rng(13)
        base, _, shard = planted_shard(rng, n=80)
        adapter = init_adapter(4, 6, 2, seed=3)
        perm = rng.permutation(shard.n_samples)
        shuffled = Dataset(
            features=shard.features[perm], labels=shard.labels[perm], class_count=4
        )
        acc1, loss1 = evaluate(base, adapter, shard)
        acc2, loss2 = evaluate(base, adapter, shuffled)
        assert acc1 == acc2
        assert loss1 == pytest.approx(loss2, rel=1e-12)

    def test_empty_dataset_rejected(self):
        base = FrozenBase(weights=np.zeros((2, 2)))
        adapter = init_adapter(2, 2, 1, seed=0)
        empty = Dataset(features=np.zeros((0, 2)), labels=np.zeros(0, dtype=int), class_count=2)
        with pytest.raises(ValueError):
            evaluate(base, adapter, empty)
