import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snmm import tensor as T


def central_diff(f, params, h=1e-5):
    """Finite-difference gradient oracle, independent of the reverse pass."""
    grads = []
    for p in params:
        g = np.zeros_like(p.values)
        flat = p.values.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def autodiff_grads(f, params):
    for p in params:
        p.grad = None
    T.backward(f())
    return [p.grad if p.grad is not None else np.zeros_like(p.values) for p in params]


def rel_err(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1.0)
    return np.max(np.abs(a - b)) / denom


class TestForwardOps:
    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(3, 3))
        out = T.matmul(T.tensor(np.eye(3)), T.tensor(m))
        np.testing.assert_array_equal(out.values, m)

    def test_sigmoid_at_zero(self):
        assert T.sigmoid(T.tensor([0.0])).values[0] == 0.5

    def test_zero_residual_loss(self):
        x = T.tensor([1.0, 2.0, 3.0])
        loss = T.mean(T.square(T.sub(x, T.tensor([1.0, 2.0, 3.0]))))
        assert loss.item() == 0.0

    def test_shape_mismatch_named(self):
        with pytest.raises(T.ShapeError, match="matmul"):
            T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))
        with pytest.raises(T.ShapeError, match="mul"):
            T.mul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((3, 2))))

    def test_bias_row_add(self):
        x = T.tensor(np.zeros((4, 3)))
        b = T.tensor([1.0, 2.0, 3.0])
        out = T.add(x, b)
        assert out.shape == (4, 3)
        np.testing.assert_array_equal(out.values[2], [1.0, 2.0, 3.0])

    def test_concat_slice_roundtrip(self):
        a = T.tensor(np.arange(6.0).reshape(2, 3))
        b = T.tensor(np.arange(4.0).reshape(2, 2))
        cat = T.concat([a, b], axis=1)
        np.testing.assert_array_equal(T.slice_cols(cat, 3, 5).values, b.values)

    def test_forward_op_dispatch(self):
        out = T.forward_op("sigmoid", T.tensor([0.0]))
        assert out.values[0] == 0.5
        total = T.forward_op("sum", T.tensor([1.0, 2.0]))
        assert total.item() == 3.0
        with pytest.raises(T.ShapeError, match="transmogrify"):
            T.forward_op("transmogrify", T.tensor([1.0]))
        with pytest.raises(T.ShapeError, match="matmul"):
            T.forward_op("matmul", T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(7)
        x = T.tensor(rng.normal(scale=50.0, size=(8, 4)))
        for op in (T.sigmoid, T.tanh, T.relu, T.elu, T.square):
            assert np.all(np.isfinite(op(x).values))
        z = T.tensor(rng.normal(scale=200.0, size=(8, 4)))
        t = T.tensor((rng.random((8, 4)) > 0.5).astype(float))
        assert np.all(np.isfinite(T.logistic_loss(z, t).values))


class TestDetach:
    def test_product_rule_with_frozen_factor(self):
        x = T.parameter([3.0])
        loss = T.tsum(T.mul(x, T.detach(x)))
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, [3.0])

    def test_value_identity_bitwise(self):
        x = T.parameter(np.random.default_rng(1).normal(size=(5, 2)))
        d = T.detach(x)
        assert np.array_equal(d.values, x.values)
        assert d.parents == ()
        assert not d.on_graph

    def test_fully_detached_loss_has_zero_grads(self):
        w = T.parameter(np.ones((2, 2)))
        h = T.matmul(T.tensor(np.ones((3, 2))), w)
        loss = T.mean(T.square(T.detach(h)))
        grads = T.backward(loss)
        assert grads == {}
        assert w.grad is None


class TestBackward:
    def test_square_derivative(self):
        x = T.parameter([3.0])
        T.backward(T.tsum(T.square(x)))
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_mean_scaling(self):
        x = T.parameter(np.arange(5.0))
        T.backward(T.mean(x))
        np.testing.assert_allclose(x.grad, np.full(5, 0.2))

    def test_nonscalar_loss_rejected(self):
        with pytest.raises(T.ShapeError):
            T.backward(T.parameter(np.ones(3)))

    def test_two_layer_net_gradcheck(self):
        rng = np.random.default_rng(42)
        x = T.tensor(rng.normal(size=(6, 4)))
        y = T.tensor(rng.normal(size=(6, 1)))
        w1 = T.parameter(rng.normal(scale=0.5, size=(4, 5)))
        b1 = T.parameter(np.zeros((1, 5)))
        w2 = T.parameter(rng.normal(scale=0.5, size=(5, 1)))
        b2 = T.parameter(np.zeros((1, 1)))
        params = [w1, b1, w2, b2]

        def f():
            h = T.tanh(T.add(T.matmul(x, w1), b1))
            return T.mean(T.square(T.sub(T.add(T.matmul(h, w2), b2), y)))

        ad = autodiff_grads(f, params)
        fd = central_diff(f, params)
        assert max(rel_err(a, b) for a, b in zip(ad, fd)) < 1e-6

    def test_deterministic_given_seed(self):
        def run():
            rng = np.random.default_rng(3)
            x = T.tensor(rng.normal(size=(4, 3)))
            w = T.parameter(rng.normal(size=(3, 2)))
            T.backward(T.mean(T.square(T.matmul(x, w))))
            return w.grad

        assert np.array_equal(run(), run())

    def test_all_ops_gradcheck_many_seeds(self):
        # Every differentiable op against central differences, 100 seeds.
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            x = T.parameter(rng.normal(size=(3, 4)))
            w = T.parameter(rng.normal(scale=0.7, size=(4, 4)))
            t = T.tensor((rng.random((3, 4)) > 0.5).astype(float))
            params = [x, w]

            def f():
                h = T.matmul(x, w)
                h = T.add(h, T.tensor(rng2_bias))
                a = T.sigmoid(T.slice_cols(h, 0, 2))
                b = T.tanh(T.slice_cols(h, 2, 4))
                c = T.concat([a, b], axis=1)
                d = T.elu(T.mul(c, x)) + T.relu(c) + T.square(c)
                e = T.bce(T.sigmoid(d), T.slice_rows(t, 0, 3))
                ll = T.logistic_loss(h, t)
                return T.mean(e) + T.tsum(T.mean(ll, axis=0)) + T.mean(T.tsum(d, axis=1))

            rng2_bias = rng.normal(size=(1, 4))
            ad = autodiff_grads(f, params)
            fd = central_diff(f, params)
            worst = max(worst, max(rel_err(a, b) for a, b in zip(ad, fd)))
        assert worst < 1e-5

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
    def test_detach_annihilates_gradient(self, vals):
        x = T.parameter(vals)
        loss = T.tsum(T.square(T.detach(x))) + T.tsum(x) * 0.0
        x.grad = None
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, np.zeros(len(vals)))


class TestOptimizer:
    def test_sgd_definition(self):
        p = T.parameter([1.0])
        p.grad = np.array([2.0])
        T.SGD([p], T.OptimConfig(rule="sgd", lr=0.1, clip_norm=None)).step()
        np.testing.assert_allclose(p.values, [0.8])

    def test_zero_grad_no_change(self):
        p = T.parameter([1.5])
        p.grad = np.array([0.0])
        for rule in ("sgd", "adam"):
            T.make_optimizer([p], T.OptimConfig(rule=rule, lr=0.1)).step()
        np.testing.assert_array_equal(p.values, [1.5])

    def test_clip_scales_gradient(self):
        p = T.parameter(np.zeros(2))
        p.grad = np.array([0.0, 4.0])
        T.clip_gradients([p], 1.0)
        np.testing.assert_allclose(p.grad, [0.0, 1.0])

    def test_nonpositive_lr_rejected(self):
        with pytest.raises(ValueError):
            T.OptimConfig(lr=0.0)
        with pytest.raises(ValueError):
            T.OptimConfig(lr=-1e-3)

    def test_adam_first_step_size(self):
        # First Adam step moves by ~lr regardless of gradient scale.
        p = T.parameter([0.0])
        p.grad = np.array([123.0])
        T.Adam([p], T.OptimConfig(lr=0.01, clip_norm=None)).step()
        np.testing.assert_allclose(p.values, [-0.01], rtol=1e-6)
