import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfptkd import tensor as T
from dfptkd.tensor import DTypeError, GradientError, ShapeError, Tensor, backward, check_gradients

from conftest import GRAD_RTOL, conv2d_loops, fd_gradient, matmul_loops, rel_error


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def grad_of(f, x):
    leaf = t64(x, grad=True)
    return backward(f(leaf), inputs=[leaf])[leaf]


def check_fd(f, x):
    """Analytic gradient of scalar f vs central differences."""
    analytic = grad_of(f, x)
    numeric = fd_gradient(lambda a: f(t64(a)).item(), x)
    return rel_error(analytic, numeric)


class TestElementwise:
    def test_add_values(self):
        assert np.array_equal((t64([1, 2]) + t64([3, 4])).data, [4, 6])

    def test_mul_by_ones_is_identity(self, rng):
        x = t64(rng.normal(size=(3, 4)))
        assert np.array_equal((x * T.ones_like(x)).data, x.data)

    def test_broadcast_add_grad_is_column_sums(self, rng):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=3)
        ta = t64(a)
        g = grad_of(lambda tb: (ta + tb).sum(), b)
        assert np.allclose(g, np.ones((2, 3)).sum(axis=0))
        weights = rng.normal(size=(2, 3))
        assert check_fd(lambda tb: ((ta + tb) * t64(weights)).sum(), b) < GRAD_RTOL

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            t64(np.zeros((2, 3))) + t64(np.zeros((4,)))

    def test_division_by_zero(self):
        with pytest.raises(ZeroDivisionError):
            t64([1.0, 2.0]) / t64([1.0, 0.0])

    def test_mixed_dtype_rejected(self):
        with pytest.raises(DTypeError):
            Tensor(np.ones(2, np.float32)) + Tensor(np.ones(2, np.float64))

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_gradients(self, op, rng):
        for _ in range(20):
            a = rng.normal(size=(3, 4))
            b = rng.uniform(0.5, 2.0, size=(4,)) * rng.choice([-1, 1], size=4)
            w = rng.normal(size=(3, 4))
            tb = t64(b)
            assert check_fd(lambda ta: (T.elementwise(ta, tb, op) * t64(w)).sum(), a) < GRAD_RTOL
            ta = t64(a)
            assert check_fd(lambda tb_: (T.elementwise(ta, tb_, op) * t64(w)).sum(), b) < GRAD_RTOL

    @pytest.mark.parametrize("name", ["exp", "log", "relu", "pow"])
    def test_unary_gradients(self, name, rng):
        fns = {"exp": T.exp, "log": T.log, "relu": T.relu, "pow": lambda x: T.power(x, 3.0)}
        for _ in range(20):
            x = rng.uniform(0.1, 2.0, size=(5,)) * (1 if name == "log" else rng.choice([-1, 1], size=5))
            w = rng.normal(size=5)
            assert check_fd(lambda t: (fns[name](t) * t64(w)).sum(), x) < GRAD_RTOL


class TestReduce:
    def test_sum_all(self):
        assert T.reduce(t64([[1, 2], [3, 4]]), None, "sum").item() == 10

    def test_mean_of_constant(self):
        assert T.reduce(t64(np.full((3, 5), 2.5)), (0, 1), "mean").item() == 2.5

    def test_keepdims(self):
        assert T.reduce(t64(np.ones((2, 3, 4))), (1,), "sum", keepdims=True).shape == (2, 1, 4)
        assert T.reduce(t64(np.ones((2, 3, 4))), (1,), "sum").shape == (2, 4)

    def test_invalid_axis(self):
        with pytest.raises((ShapeError, ValueError)):
            T.reduce(t64(np.ones((2, 3))), (2,), "sum")

    def test_max_tie_routes_to_first(self):
        g = grad_of(lambda t: t.max(), np.array([1.0, 3.0, 3.0, 2.0]))
        assert np.array_equal(g, [0, 1, 0, 0])
        # perturbation oracle: raising the first maximum moves the max, raising the second does not
        base = np.array([1.0, 3.0, 3.0, 2.0])
        up = base.copy(); up[1] += 1e-6
        assert t64(up).max().item() - t64(base).max().item() == pytest.approx(1e-6)

    def test_max_axis_tie(self):
        x = np.array([[5.0, 5.0, 1.0], [0.0, 2.0, 2.0]])
        g = grad_of(lambda t: t.max(axis=1).sum(), x)
        assert np.array_equal(g, [[1, 0, 0], [0, 1, 0]])

    @pytest.mark.parametrize("mode", ["sum", "mean", "max"])
    def test_gradients(self, mode, rng):
        for _ in range(20):
            x = rng.normal(size=(3, 4, 2))
            w = rng.normal(size=(3, 2))
            assert check_fd(lambda t: (T.reduce(t, (1,), mode) * t64(w)).sum(), x) < GRAD_RTOL


class TestMatmul:
    def test_identity(self, rng):
        a = rng.normal(size=(3, 3))
        assert np.allclose(T.matmul(t64(np.eye(3)), t64(a)).data, a)

    def test_small_product_against_loops(self):
        a = np.array([[1.0, 2, 3], [4, 5, 6]])
        b = np.array([[7.0, 8], [9, 10], [11, 12]])
        expect = matmul_loops(a, b)
        assert np.array_equal(expect, [[58, 64], [139, 154]])
        assert np.allclose(T.matmul(t64(a), t64(b)).data, expect)

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))

    def test_gradients(self, rng):
        for _ in range(20):
            a, b, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
            tb, ta = t64(b), t64(a)
            assert check_fd(lambda t: (T.matmul(t, tb) * t64(w)).sum(), a) < GRAD_RTOL
            assert check_fd(lambda t: (T.matmul(ta, t) * t64(w)).sum(), b) < GRAD_RTOL


class TestShapeOps:
    def test_reshape_transpose_gradients(self, rng):
        for _ in range(20):
            x = rng.normal(size=(2, 3, 4))
            w = rng.normal(size=(4, 6))
            assert check_fd(lambda t: (t.transpose(2, 0, 1).reshape(4, 6) * t64(w)).sum(), x) < GRAD_RTOL

    def test_getitem_and_concat_gradients(self, rng):
        for _ in range(20):
            x = rng.normal(size=(2, 5))
            w = rng.normal(size=(2, 7))
            f = lambda t: (T.concat([t[:, :3], t[:, [0, 0, 4, 1]]], axis=1) * t64(w)).sum()
            assert check_fd(f, x) < GRAD_RTOL

    def test_reshape_size_mismatch(self):
        with pytest.raises((ShapeError, ValueError)):
            t64(np.ones(6)).reshape(4, 2)


class TestConv:
    @pytest.mark.parametrize("stride,padding,k,size", [(1, 1, 3, 5), (2, 1, 3, 6), (2, 0, 3, 7), (1, 0, 1, 4),
                                                       (2, 0, 1, 5), (1, 3, 7, 4), (1, 2, 5, 6)])
    def test_forward_matches_loops(self, stride, padding, k, size, rng):
        x = rng.normal(size=(2, 3, size, size))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        got = T.conv2d(t64(x), t64(w), t64(b), stride, padding).data
        assert np.allclose(got, conv2d_loops(x, w, b, stride, padding), atol=1e-12)

    @pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 2, 5)])
    def test_gradients(self, stride, padding, k, rng):
        for _ in range(20):
            x = rng.normal(size=(2, 2, 5, 5))
            w = rng.normal(size=(3, 2, k, k))
            b = rng.normal(size=3)
            oh = (5 + 2 * padding - k) // stride + 1
            m = t64(rng.normal(size=(2, 3, oh, oh)))
            tw, tb, tx = t64(w), t64(b), t64(x)
            assert check_fd(lambda t: (T.conv2d(t, tw, tb, stride, padding) * m).sum(), x) < GRAD_RTOL
            assert check_fd(lambda t: (T.conv2d(tx, t, tb, stride, padding) * m).sum(), w) < GRAD_RTOL
            assert check_fd(lambda t: (T.conv2d(tx, tw, t, stride, padding) * m).sum(), b) < GRAD_RTOL

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(t64(np.ones((1, 3, 4, 4))), t64(np.ones((2, 2, 3, 3))))


class TestFused:
    def test_batch_norm_train_gradients(self, rng):
        for _ in range(20):
            x = rng.normal(size=(4, 3, 2, 2))
            g, b = rng.normal(size=3), rng.normal(size=3)
            m = t64(rng.normal(size=x.shape))
            tg, tb, tx = t64(g), t64(b), t64(x)
            assert check_fd(lambda t: (T.batch_norm(t, tg, tb)[0] * m).sum(), x) < GRAD_RTOL
            assert check_fd(lambda t: (T.batch_norm(tx, t, tb)[0] * m).sum(), g) < GRAD_RTOL
            assert check_fd(lambda t: (T.batch_norm(tx, tg, t)[0] * m).sum(), b) < GRAD_RTOL

    def test_batch_norm_eval_gradients(self, rng):
        mean, var = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
        for _ in range(20):
            x = rng.normal(size=(2, 3, 2, 2))
            m = t64(rng.normal(size=x.shape))
            g, b = t64(rng.normal(size=3)), t64(rng.normal(size=3))
            assert check_fd(lambda t: (T.batch_norm(t, g, b, mean, var)[0] * m).sum(), x) < GRAD_RTOL

    def test_batch_norm_statistics(self, rng):
        x = rng.normal(3.0, 2.0, size=(16, 2, 4, 4))
        out, mean, var = T.batch_norm(t64(x), t64(np.ones(2)), t64(np.zeros(2)))
        assert np.allclose(mean, x.mean(axis=(0, 2, 3)))
        assert np.allclose(var, x.var(axis=(0, 2, 3)))
        assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-10)

    def test_log_softmax_gradients_and_values(self, rng):
        for _ in range(20):
            z = rng.normal(size=(3, 5)) * 3
            w = rng.normal(size=(3, 5))
            assert check_fd(lambda t: (T.log_softmax(t, 1) * t64(w)).sum(), z) < GRAD_RTOL
        z = np.array([[1000.0, 0.0]])
        assert np.all(np.isfinite(T.log_softmax(t64(z), 1).data))
        assert np.allclose(T.softmax(t64([[0.0, 0.0]]), 1).data, 0.5)


class TestBackward:
    def test_sum_of_squares(self, rng):
        x = rng.normal(size=6)
        assert np.allclose(grad_of(lambda t: (t * t).sum(), x), 2 * x)

    def test_two_paths_accumulate(self, rng):
        x = rng.normal(size=4)
        f = lambda a: (T.exp(a) * 2.0).sum() + (a * a).sum()
        g = grad_of(f, x)
        assert np.allclose(g, 2 * np.exp(x) + 2 * x)
        assert check_fd(f, x) < GRAD_RTOL

    def test_k_consumers(self, rng):
        x = rng.normal(size=3)
        g = grad_of(lambda a: a.sum() + (a * 3.0).sum() + T.exp(a).sum(), x)
        assert np.allclose(g, 1 + 3 + np.exp(x))

    def test_frozen_tensor_passes_gradient_through(self, rng):
        w = Tensor(rng.normal(size=(3, 3)))  # frozen
        x = rng.normal(size=(2, 3))
        g = grad_of(lambda a: T.matmul(a, w).sum(), x)
        assert w.grad is None
        assert np.allclose(g, np.ones((2, 3)) @ w.data.T)

    def test_unreached_input_gets_zero(self):
        a, b = t64([1.0, 2.0], grad=True), t64([3.0], grad=True)
        grads = backward((a * a).sum(), inputs=[a, b])
        assert np.array_equal(grads[b], [0.0])

    def test_leaf_grads_accumulate_across_calls(self):
        a = t64([1.0, 2.0], grad=True)
        (a * 2.0).sum().backward()
        (a * 3.0).sum().backward()
        assert np.array_equal(a.grad, [5.0, 5.0])

    def test_non_scalar_loss(self):
        with pytest.raises(GradientError):
            backward(t64([1.0, 2.0], grad=True) * 2.0)

    def test_no_grad_records_nothing(self):
        a = t64([1.0], grad=True)
        with T.no_grad():
            y = a * 2.0
        assert not y.requires_grad

    def test_tape_is_topological(self, rng):
        a = t64(rng.normal(size=3), grad=True)
        b = T.exp(a)
        loss = (b * a).sum() + b.sum()
        order = T._topological_order(loss)
        pos = {id(n): i for i, n in enumerate(order)}
        assert len(pos) == len(order)
        for node in order:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]

    def test_deterministic_forward(self, rng):
        x, w = rng.normal(size=(2, 3, 6, 6)).astype(np.float32), rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        a = T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
        b = T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
        assert a.tobytes() == b.tobytes()


class TestCheckGradients:
    def test_sum_is_exact(self, rng):
        assert check_gradients(lambda t: t.sum(), t64(rng.normal(size=5))) < 1e-9

    def test_softmax_cross_entropy(self, rng):
        z = rng.normal(size=(4, 6))
        y = np.eye(6)[[0, 3, 5, 1]]
        err = check_gradients(lambda t: -(T.log_softmax(t, 1) * t64(y)).sum(), t64(z))
        assert err < 1e-4

    def test_detects_wrong_gradient(self, rng):
        # a node whose backward rule is deliberately wrong
        def bad(t):
            out = T._result(t.data * 2, (t,), lambda g: (g * 3,), "bad")
            return out.sum()
        assert check_gradients(bad, t64(rng.normal(size=3))) > 0.1


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_property_composite_gradient(m, n, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, n))
    w = rng.normal(size=(n, 3))
    f = lambda t: (T.log_softmax(T.matmul(T.relu(t) + t * 0.5, t64(w)), 1) * t64(np.ones((m, 3)))).mean()
    assert check_fd(f, x) < GRAD_RTOL
