"""Gradient correctness of every primitive against central finite differences."""

import numpy as np
import pytest

from sckansformer import tensor as T
from oracles import fd_grad, rel_err

SEEDS = (0, 1, 2)
TOL = 1e-4


def check_grad(build, arrays, seed_note=""):
    """FD-check d(sum of build(*tensors)) w.r.t. each input array.

    build maps Tensors to a Tensor; the loss is its elementwise square sum
    (squaring makes upstream gradients non-constant).
    """
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    loss = T.tsum(T.mul(out, out))
    loss.backward()
    for i, t in enumerate(tensors):
        def f(x, _i=i):
            with T.no_grad():
                args = [T.Tensor(a) for a in arrays]
                args[_i] = T.Tensor(x)
                o = build(*args)
                return float((o.data**2).sum())

        numeric = fd_grad(f, arrays[i])
        err = rel_err(t.grad, numeric)
        assert err < TOL, f"input {i}{seed_note}: rel err {err:.2e}"


class TestElementwise:
    def test_add_sub_mul_div_broadcast(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            a = rng.normal(size=(3, 4))
            b = rng.normal(size=(4,)) + 3.0  # keep divisors away from zero
            check_grad(lambda x, y: T.add(x, y), [a, b], f" seed={seed}")
            check_grad(lambda x, y: T.sub(x, y), [a, b], f" seed={seed}")
            check_grad(lambda x, y: T.mul(x, y), [a, b], f" seed={seed}")
            check_grad(lambda x, y: T.div(x, y), [a, b], f" seed={seed}")

    def test_neg(self):
        rng = np.random.default_rng(5)
        check_grad(lambda x: T.neg(x), [rng.normal(size=(2, 3))])

    def test_scalar_broadcast(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(1, 1))
        check_grad(lambda x, y: T.mul(x, y), [a, b])


class TestMatmul:
    def test_2d(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            check_grad(T.matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], f" seed={seed}")

    def test_batched(self):
        rng = np.random.default_rng(8)
        check_grad(T.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))])

    def test_batched_against_2d_weight(self):
        rng = np.random.default_rng(9)
        check_grad(T.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))])


class TestShapeOps:
    def test_reshape_transpose_chain(self):
        rng = np.random.default_rng(10)
        check_grad(
            lambda x: T.transpose(T.reshape(x, (6, 4)), (1, 0)),
            [rng.normal(size=(2, 3, 4))],
        )

    def test_broadcast_to(self):
        rng = np.random.default_rng(11)
        check_grad(lambda x: T.broadcast_to(x, (4, 3, 2)), [rng.normal(size=(3, 2))])

    def test_concat(self):
        rng = np.random.default_rng(12)
        check_grad(
            lambda x, y: T.concatenate([x, y], axis=1),
            [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))],
        )

    def test_split(self):
        rng = np.random.default_rng(13)
        check_grad(
            lambda x: T.mul(T.split(x, [2, 3], axis=1)[0], T.Tensor(np.arange(1.0, 5.0).reshape(2, 2))),
            [rng.normal(size=(2, 5))],
        )


class TestReductions:
    def test_sum_axes(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 3, 4))
        check_grad(lambda t: T.tsum(t, axis=1), [x])
        check_grad(lambda t: T.tsum(t, axis=(0, 2), keepdims=True), [x])

    def test_mean(self):
        rng = np.random.default_rng(15)
        check_grad(lambda t: T.tmean(t, axis=-1), [rng.normal(size=(3, 5))])

    def test_sum_of_squares_gradient_is_2x(self):
        rng = np.random.default_rng(16)
        x = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        T.tsum(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)

    def test_sum_gradient_is_ones(self):
        x = T.Tensor(np.zeros((2, 5)), requires_grad=True)
        T.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 5)))


class TestNonlinearities:
    def test_exp_log_sqrt(self):
        rng = np.random.default_rng(17)
        pos = rng.uniform(0.5, 2.0, size=(3, 3))
        check_grad(T.exp, [rng.normal(size=(3, 3))])
        check_grad(T.log, [pos])
        check_grad(T.sqrt, [pos])

    def test_sigmoid_silu(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            x = rng.normal(scale=2.0, size=(4, 4))
            check_grad(T.sigmoid, [x], f" seed={seed}")
            check_grad(T.silu, [x], f" seed={seed}")

    def test_softmax(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            check_grad(lambda x: T.softmax(x, axis=-1), [rng.normal(size=(3, 5))], f" seed={seed}")


class TestConv2d:
    def test_plain(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(2, 3, 5, 5))
            k = rng.normal(size=(4, 3, 3, 3))
            check_grad(lambda a, b: T.conv2d(a, b, padding=1), [x, k], f" seed={seed}")

    def test_strided_grouped(self):
        rng = np.random.default_rng(20)
        x = rng.normal(size=(2, 4, 6, 6))
        k = rng.normal(size=(6, 2, 3, 3))
        check_grad(lambda a, b: T.conv2d(a, b, stride=2, padding=1, groups=2), [x, k])

    def test_depthwise(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(2, 3, 4, 4))
        k = rng.normal(size=(3, 1, 3, 3))
        check_grad(lambda a, b: T.conv2d(a, b, padding=1, groups=3), [x, k])

    def test_pointwise(self):
        rng = np.random.default_rng(22)
        x = rng.normal(size=(2, 4, 3, 3))
        k = rng.normal(size=(6, 4, 1, 1))
        check_grad(T.conv2d, [x, k])


class TestNormalization:
    def test_layer_norm(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            x = rng.normal(size=(4, 6))
            gamma = rng.normal(size=6)
            beta = rng.normal(size=6)
            check_grad(T.layer_norm, [x, gamma, beta], f" seed={seed}")

    def test_group_norm(self):
        rng = np.random.default_rng(25)
        x = rng.normal(size=(2, 4, 3, 3))
        gamma = rng.normal(size=4)
        beta = rng.normal(size=4)
        check_grad(lambda a, g, b: T.group_norm(a, 2, g, b), [x, gamma, beta])

    def test_batch_norm_train(self):
        rng = np.random.default_rng(26)
        x = rng.normal(size=(3, 2, 2, 2))
        gamma = rng.normal(size=2)
        beta = rng.normal(size=2)

        def bn(a, g, b):
            # fresh running stats per call: stat update is a side effect,
            # not part of the differentiated function
            return T.batch_norm(a, g, b, np.zeros(2), np.ones(2), train=True)

        check_grad(bn, [x, gamma, beta])

    def test_global_avg_pool(self):
        rng = np.random.default_rng(27)
        check_grad(T.global_avg_pool, [rng.normal(size=(2, 3, 4, 4))])


class TestLossGradients:
    def test_cross_entropy(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            z = rng.normal(size=(4, 3))
            labels = rng.integers(0, 3, size=4)
            logits = T.Tensor(z, requires_grad=True)
            T.cross_entropy_with_logits(logits, labels).backward()

            def f(x):
                with T.no_grad():
                    return T.cross_entropy_with_logits(T.Tensor(x), labels).item()

            err = rel_err(logits.grad, fd_grad(f, z))
            assert err < TOL, f"seed={seed}: {err:.2e}"


class TestGraphSemantics:
    def test_composite_graph_fd(self):
        # matmul -> softmax -> sum, the canonical composite check
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            a = rng.normal(size=(3, 4))
            b = rng.normal(size=(4, 4))
            check_grad(lambda x, y: T.softmax(T.matmul(x, y), axis=-1), [a, b], f" seed={seed}")

    def test_multi_consumer_sums_gradients(self):
        x = T.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        y = T.add(T.mul(x, x), x)  # x used twice
        T.tsum(y).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data + 1.0)

    def test_shared_subexpression(self):
        x = T.Tensor(np.array([[2.0]]), requires_grad=True)
        h = T.mul(x, x)
        out = T.add(h, h)  # h consumed twice: dh must arrive doubled
        T.tsum(out).backward()
        np.testing.assert_allclose(x.grad, [[8.0]])

    def test_backward_rejects_non_scalar(self):
        x = T.Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(T.ContractError):
            T.mul(x, x).backward()

    def test_grad_accumulates_across_backward_calls(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        T.tsum(x).backward()
        T.tsum(T.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 1.0 + 2.0 * x.data)

    def test_no_grad_detaches(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert y._grad_fn is None and y._parents == ()

    def test_untracked_leaf_gets_no_grad(self):
        x = T.Tensor(np.ones(3), requires_grad=True)
        c = T.Tensor(np.full(3, 2.0))
        T.tsum(T.mul(x, c)).backward()
        assert c.grad is None
        np.testing.assert_allclose(x.grad, 2.0)

    def test_gradient_map_covers_intermediates(self):
        x = T.Tensor(np.ones((2, 2)), requires_grad=True)
        y = T.mul(x, x)
        loss = T.tsum(y)
        gm = loss.backward()
        assert any(t is y for t in gm)
        assert any(t is x for t in gm)

    def test_grads_match_shapes(self):
        rng = np.random.default_rng(30)
        x = T.Tensor(rng.normal(size=(2, 1, 4)), requires_grad=True)
        y = T.Tensor(rng.normal(size=(3, 1)), requires_grad=True)
        T.tsum(T.mul(x, y)).backward()
        assert x.grad.shape == x.shape and y.grad.shape == y.shape
