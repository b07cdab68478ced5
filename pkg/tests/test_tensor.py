"""Autodiff core: hand-computed values plus finite-difference oracles."""

import numpy as np
import pytest

from sparsenas import tensor as T
from sparsenas.errors import ContractError, DimensionError, ValidationError
from sparsenas.tensor import Tensor

from fdcheck import fd_grad, rel_err

RNG = np.random.default_rng(1234)


def analytic_grad(op, x_value, *extra_tensors):
    """Gradient of sum(op(x) * c) w.r.t. x for a fixed random cotangent c."""
    x = Tensor(x_value.copy(), requires_grad=True)
    with T.tape():
        y = op(x, *extra_tensors)
        c = np.asarray(RNG_COTANGENTS.setdefault(y.data.shape, np.random.default_rng(7).standard_normal(y.data.shape)))
        loss = T.tsum(T.mul(y, Tensor(c)))
        T.backward(loss)
    return x.grad, c


RNG_COTANGENTS = {}


def check_grad(op, x_value, tol=1e-4):
    grad, c = analytic_grad(op, x_value)

    def f(xv):
        with T.no_grad():
            return float((op(Tensor(xv)).data * c).sum())

    fd = fd_grad(f, x_value)
    assert rel_err(grad, fd) < tol


class TestForwardValues:
    def test_conv2d_zero_input(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(RNG.standard_normal((3, 2, 3, 3)))
        assert np.all(T.conv2d(x, w, 1, 1).data == 0)

    def test_conv2d_ones_window_sums(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, 1, 1).data[0, 0]
        # hand-computed sliding-window sums
        assert out[1, 1] == 9
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4
        assert out[0, 1] == out[1, 0] == out[1, 2] == out[2, 1] == 6

    def test_conv1x1_identity_kernel(self):
        x = Tensor(RNG.standard_normal((2, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(T.conv2d(x, w, 1, 0).data, x.data)

    def test_conv2d_channel_mismatch(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((1, 3, 3, 3)))
        with pytest.raises(DimensionError, match="channel"):
            T.conv2d(x, w, 1, 1)

    def test_avg_pool_constant_interior(self):
        x = Tensor(np.full((1, 1, 5, 5), 3.25))
        out = T.avg_pool2d(x).data[0, 0]
        # padding excluded from the divisor: even borders stay constant
        np.testing.assert_allclose(out, 3.25)

    def test_avg_pool_2x2_window_membership(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        out = T.avg_pool2d(x, k=3, stride=1, padding=1).data[0, 0]
        # all four cells fall inside every 3x3 window of a 2x2 image
        np.testing.assert_allclose(out, 2.5)

    def test_avg_pool_zero(self):
        x = Tensor(np.zeros((2, 3, 4, 4)))
        assert np.all(T.avg_pool2d(x).data == 0)

    def test_relu(self):
        y = T.relu(Tensor(np.array([-1.0, 2.0])))
        np.testing.assert_array_equal(y.data, [0.0, 2.0])

    def test_cross_entropy_uniform_logits(self):
        for k in (2, 5, 10):
            logits = Tensor(np.zeros((4, k)))
            loss = T.softmax_cross_entropy(logits, np.zeros(4, dtype=int))
            assert loss.item() == pytest.approx(np.log(k), rel=1e-12)

    def test_cross_entropy_label_range(self):
        logits = Tensor(np.zeros((2, 3)))
        with pytest.raises(ValidationError, match="label"):
            T.softmax_cross_entropy(logits, np.array([0, 3]))

    def test_batchnorm_constant_batch(self):
        x = Tensor(np.full((4, 2, 3, 3), 7.0), requires_grad=True)
        gamma = Tensor(np.ones(2), requires_grad=True)
        beta = Tensor(np.zeros(2), requires_grad=True)
        y = T.batchnorm2d(x, gamma, beta, np.zeros(2), np.ones(2), training=True)
        np.testing.assert_allclose(y.data, 0.0, atol=1e-12)


class TestBackwardBasics:
    def test_sum_grad_ones(self):
        x = Tensor(RNG.standard_normal((3, 4)), requires_grad=True)
        with T.tape():
            T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_half_square_norm_grad(self):
        x = Tensor(RNG.standard_normal(6), requires_grad=True)
        with T.tape():
            loss = T.scale(T.tsum(T.mul(x, x)), 0.5)
            T.backward(loss)
        np.testing.assert_allclose(x.grad, x.data)

    def test_backward_non_scalar_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.tape():
            y = T.relu(x)
            with pytest.raises(ContractError):
                T.backward(y)

    def test_backward_accumulates(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.tape():
            loss = T.tsum(x)
            T.backward(loss)
            x.grad = np.zeros(3)  # zeroing resets
        with T.tape():
            loss = T.tsum(x)
            T.backward(loss)
            T.backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))

    def test_linearity_of_backward(self):
        x = Tensor(RNG.standard_normal((2, 3)), requires_grad=True)
        with T.tape():
            T.backward(T.tsum(T.mul(x, x)))
        g1 = x.grad.copy()
        x.zero_grad()
        with T.tape():
            T.backward(T.scale(T.tsum(T.mul(x, x)), 3.0))
        np.testing.assert_allclose(x.grad, 3.0 * g1)

    def test_no_grad_buffer_without_requires_grad(self):
        x = Tensor(np.ones(3), requires_grad=False)
        with T.tape():
            y = T.relu(x)
            loss = T.tsum(y)
        assert x.grad is None and not y.requires_grad

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
            w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
            with T.tape():
                loss = T.tsum(T.relu(T.conv2d(x, w, 1, 1)))
                T.backward(loss)
            return x.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

        assert run() == run()


class TestFiniteDifference:
    """Every differentiable op vs the central-difference oracle (float64)."""

    def test_add(self):
        b = Tensor(RNG.standard_normal((3, 4)))
        check_grad(lambda x: T.add(x, b), RNG.standard_normal((3, 4)))

    def test_mul(self):
        b = Tensor(RNG.standard_normal((3, 4)))
        check_grad(lambda x: T.mul(x, b), RNG.standard_normal((3, 4)))

    def test_scale(self):
        check_grad(lambda x: T.scale(x, -2.5), RNG.standard_normal((2, 5)))

    def test_mean(self):
        check_grad(T.tmean, RNG.standard_normal((4, 3)))

    def test_relu_away_from_kink(self):
        x = RNG.standard_normal((4, 4))
        x[np.abs(x) < 0.1] += 0.3
        check_grad(T.relu, x)

    def test_matmul(self):
        b = Tensor(RNG.standard_normal((4, 2)))
        check_grad(lambda x: T.matmul(x, b), RNG.standard_normal((3, 4)))

    def test_linear_input_weight_bias(self):
        xv = RNG.standard_normal((5, 3))
        wv = RNG.standard_normal((3, 4))
        bv = RNG.standard_normal(4)
        c = RNG.standard_normal((5, 4))

        for target in ("x", "w", "b"):
            vals = {"x": xv.copy(), "w": wv.copy(), "b": bv.copy()}
            var = Tensor(vals[target], requires_grad=True)

            def wrap(arrs):
                tens = {k: (var if k == target else Tensor(arrs[k])) for k in arrs}
                return T.linear(tens["x"], tens["w"], tens["b"])

            with T.tape():
                loss = T.tsum(T.mul(wrap(vals), Tensor(c)))
                T.backward(loss)

            def f(v):
                arrs = dict(vals)
                arrs[target] = v
                with T.no_grad():
                    tens = {k: Tensor(arrs[k]) for k in arrs}
                    return float((T.linear(tens["x"], tens["w"], tens["b"]).data * c).sum())

            assert rel_err(var.grad, fd_grad(f, vals[target])) < 1e-4

    def test_row(self):
        check_grad(lambda x: T.row(x, 2), RNG.standard_normal((4, 5)))

    def test_conv2d_input_and_weight(self):
        xv = RNG.standard_normal((2, 2, 5, 5))
        wv = RNG.standard_normal((3, 2, 3, 3))
        c = RNG.standard_normal((2, 3, 5, 5))

        x = Tensor(xv.copy(), requires_grad=True)
        w = Tensor(wv.copy(), requires_grad=True)
        with T.tape():
            loss = T.tsum(T.mul(T.conv2d(x, w, 1, 1), Tensor(c)))
            T.backward(loss)

        def f_x(v):
            with T.no_grad():
                return float((T.conv2d(Tensor(v), Tensor(wv), 1, 1).data * c).sum())

        def f_w(v):
            with T.no_grad():
                return float((T.conv2d(Tensor(xv), Tensor(v), 1, 1).data * c).sum())

        assert rel_err(x.grad, fd_grad(f_x, xv)) < 1e-4
        assert rel_err(w.grad, fd_grad(f_w, wv)) < 1e-4

    def test_conv2d_stride2(self):
        wv = RNG.standard_normal((2, 1, 3, 3))
        check_grad(lambda x: T.conv2d(x, Tensor(wv), 2, 1),
                   RNG.standard_normal((1, 1, 6, 6)))

    def test_avg_pool2d(self):
        check_grad(lambda x: T.avg_pool2d(x, 3, 1, 1),
                   RNG.standard_normal((2, 2, 4, 4)))

    def test_avg_pool2d_stride2(self):
        check_grad(lambda x: T.avg_pool2d(x, 2, 2, 0),
                   RNG.standard_normal((1, 2, 6, 6)))

    def test_global_avg_pool(self):
        check_grad(T.global_avg_pool, RNG.standard_normal((2, 3, 4, 4)))

    def test_softmax_cross_entropy(self):
        labels = np.array([0, 2, 1, 2])
        xv = RNG.standard_normal((4, 3))
        x = Tensor(xv.copy(), requires_grad=True)
        with T.tape():
            T.backward(T.softmax_cross_entropy(x, labels))

        def f(v):
            with T.no_grad():
                return T.softmax_cross_entropy(Tensor(v), labels).item()

        assert rel_err(x.grad, fd_grad(f, xv)) < 1e-4

    @pytest.mark.parametrize("training", [True, False])
    def test_batchnorm2d(self, training):
        xv = RNG.standard_normal((3, 2, 4, 4))
        gv = RNG.standard_normal(2) + 1.0
        bv = RNG.standard_normal(2)
        c = RNG.standard_normal((3, 2, 4, 4))
        rm = RNG.standard_normal(2) * 0.1
        rv = np.abs(RNG.standard_normal(2)) + 0.5

        x = Tensor(xv.copy(), requires_grad=True)
        gamma = Tensor(gv.copy(), requires_grad=True)
        beta = Tensor(bv.copy(), requires_grad=True)
        with T.tape():
            y = T.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), training)
            T.backward(T.tsum(T.mul(y, Tensor(c))))

        def make_f(which):
            def f(v):
                arrs = {"x": xv, "g": gv, "b": bv}
                arrs[which] = v
                with T.no_grad():
                    out = T.batchnorm2d(Tensor(arrs["x"]), Tensor(arrs["g"]),
                                        Tensor(arrs["b"]), rm.copy(), rv.copy(),
                                        training)
                    return float((out.data * c).sum())
            return f

        assert rel_err(x.grad, fd_grad(make_f("x"), xv)) < 1e-4
        assert rel_err(gamma.grad, fd_grad(make_f("g"), gv)) < 1e-4
        assert rel_err(beta.grad, fd_grad(make_f("b"), bv)) < 1e-4

    def test_weighted_sum(self):
        xs_v = [RNG.standard_normal((2, 3)) for _ in range(4)]
        pv = np.array([0.4, 0.3, 0.0, 0.3])
        c = RNG.standard_normal((2, 3))

        p = Tensor(pv.copy(), requires_grad=True)
        xs = [Tensor(v.copy(), requires_grad=True) for v in xs_v]
        terms = [x if pv[i] != 0 else None for i, x in enumerate(xs)]
        with T.tape():
            T.backward(T.tsum(T.mul(T.weighted_sum(p, terms), Tensor(c))))

        def f_p(v):
            with T.no_grad():
                out = sum(v[i] * xs_v[i] for i in range(4))
                return float((out * c).sum())

        fd_p = fd_grad(f_p, pv)
        fd_p[2] = 0.0  # skipped term: gradient slot defined as zero
        assert rel_err(p.grad, fd_p) < 1e-4
        for i in (0, 1, 3):
            def f_x(v, i=i):
                arrs = list(xs_v)
                arrs[i] = v
                return float((sum(pv[j] * arrs[j] for j in range(4)) * c).sum())
            assert rel_err(xs[i].grad, fd_grad(f_x, xs_v[i])) < 1e-4
