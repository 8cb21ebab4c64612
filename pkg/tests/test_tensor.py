"""The autodiff engine: rank-4 tensors, op gradients, graph traversal."""

import numpy as np
import pytest

import gdclab.tensor as T
from gdclab.errors import ContractError, NumericError, ShapeError


def randt(rng, shape, scale=1.0):
    return T.Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


class TestTensorBasics:
    def test_rank_enforced(self):
        with pytest.raises(ShapeError):
            T.Tensor(np.zeros((3, 3)))
        with pytest.raises(ShapeError):
            T.Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_scalar_helpers(self):
        s = T.scalar(2.5)
        assert s.shape == (1, 1, 1, 1)
        assert s.item() == 2.5
        z = T.zeros((2, 3, 4, 5))
        assert z.shape == (2, 3, 4, 5) and not z.data.any()

    def test_item_rejects_nonscalar(self):
        with pytest.raises(ShapeError):
            T.zeros((1, 2, 1, 1)).item()

    def test_default_dtype_context(self):
        assert T.zeros((1, 1, 1, 1)).dtype == np.float32
        with T.using_dtype(np.float64):
            assert T.zeros((1, 1, 1, 1)).dtype == np.float64
        assert T.zeros((1, 1, 1, 1)).dtype == np.float32

    def test_detach_shares_values(self):
        a = T.scalar(1.0, requires_grad=True)
        d = a.detach()
        assert not d.requires_grad and d._parents == ()
        assert np.array_equal(d.data, a.data)


class TestForwardValues:
    def test_arithmetic(self):
        a = T.Tensor(np.full((1, 2, 2, 2), 6.0))
        b = T.Tensor(np.full((1, 2, 2, 2), 3.0))
        assert np.all(T.add(a, b).data == 9.0)
        assert np.all(T.sub(a, b).data == 3.0)
        assert np.all(T.mul(a, b).data == 18.0)
        assert np.all(T.div(a, b).data == 2.0)
        assert np.all(T.scale(a, 0.5).data == 3.0)
        assert np.all(T.add_scalar(a, -1.0).data == 5.0)
        assert np.all(T.neg(a).data == -6.0)

    def test_operator_sugar(self):
        a = T.Tensor(np.full((1, 1, 1, 1), 4.0))
        b = T.Tensor(np.full((1, 1, 1, 1), 2.0))
        assert (a + b).item() == 6.0
        assert (a - b).item() == 2.0
        assert (a * b).item() == 8.0
        assert (a / b).item() == 2.0
        assert (a * 0.5).item() == 2.0
        assert (a + 1.0).item() == 5.0
        assert (-a).item() == -4.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            T.add(T.zeros((1, 1, 2, 2)), T.zeros((1, 1, 2, 3)))

    def test_concat_slice_crop(self):
        rng = np.random.default_rng(0)
        a = T.Tensor(rng.normal(size=(1, 2, 3, 3)))
        b = T.Tensor(rng.normal(size=(1, 3, 3, 3)))
        cat = T.concat_channels([a, b])
        assert cat.shape == (1, 5, 3, 3)
        assert np.array_equal(T.slice_channels(cat, 0, 2).data, a.data)
        assert np.array_equal(T.slice_channels(cat, 2, 5).data, b.data)
        crop = T.crop_spatial(b, 0, 2, 1, 3)
        assert np.array_equal(crop.data, b.data[:, :, 0:2, 1:3])

    def test_reductions(self):
        a = T.Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
        assert T.sum_all(a).item() == 28.0
        assert T.mean_all(a).item() == 3.5

    def test_unary_values(self):
        with T.using_dtype(np.float64):
            a = T.Tensor(np.full((1, 1, 1, 1), 4.0))
            assert T.power(a, 0.5).item() == 2.0
            assert T.sqrt(a).item() == 2.0
            assert abs(T.exp(T.scalar(1.0)).item() - np.e) < 1e-12
            assert T.log(T.scalar(np.e)).item() == pytest.approx(1.0, abs=1e-12)
            assert T.log2(T.scalar(8.0)).item() == pytest.approx(3.0, abs=1e-12)
            # softplus(0) = ln 2; large inputs do not overflow
            assert T.softplus(T.scalar(0.0)).item() == pytest.approx(np.log(2.0))
            assert T.softplus(T.scalar(500.0)).item() == pytest.approx(500.0)
            assert T.normal_cdf(T.scalar(0.0)).item() == pytest.approx(0.5)

    def test_broadcast_channels(self):
        a = T.Tensor(np.array([1.0, 2.0]).reshape(1, 2, 1, 1))
        b = T.broadcast_channels(a, (3, 2, 2, 2))
        assert b.shape == (3, 2, 2, 2)
        assert np.all(b.data[:, 0] == 1.0) and np.all(b.data[:, 1] == 2.0)

    def test_clamp_min(self):
        a = T.Tensor(np.array([-1.0, 0.5, 2.0, 1.0]).reshape(1, 1, 1, 4))
        c = T.clamp_min(a, 1.0)
        assert np.array_equal(c.data.ravel(), [1.0, 1.0, 2.0, 1.0])


class TestBackward:
    def test_requires_scalar_loss(self):
        a = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(T.add(a, a))

    def test_rejects_nonfinite_loss(self):
        a = T.scalar(np.inf, requires_grad=True)
        with pytest.raises(NumericError):
            T.backward(T.sum_all(a))

    def test_rejects_grad_free_loss(self):
        with pytest.raises(ContractError):
            T.backward(T.scalar(1.0))

    def test_simple_chain(self):
        a = T.scalar(3.0, requires_grad=True)
        loss = T.sum_all(T.mul(a, a))
        T.backward(loss)
        assert a.grad[0, 0, 0, 0] == pytest.approx(6.0)

    def test_grad_accumulates_across_uses(self):
        a = T.scalar(2.0, requires_grad=True)
        loss = T.sum_all(T.add(T.mul(a, a), a))   # a^2 + a -> 2a + 1 = 5
        T.backward(loss)
        assert a.grad[0, 0, 0, 0] == pytest.approx(5.0)

    def test_no_grad_builds_no_graph(self):
        a = T.scalar(2.0, requires_grad=True)
        with T.no_grad():
            out = T.mul(a, a)
        assert out._parents == () and not out.requires_grad

    def test_diamond_graph(self):
        # loss = (a+a) * (a+a) = 4 a^2 -> grad 8a
        a = T.scalar(1.5, requires_grad=True)
        s = T.add(a, a)
        T.backward(T.sum_all(T.mul(s, s)))
        assert a.grad[0, 0, 0, 0] == pytest.approx(12.0)

    def test_deep_chain_iterative(self):
        # deep graphs must not hit the recursion limit
        a = T.scalar(1.0, requires_grad=True)
        cur = a
        for _ in range(3000):
            cur = T.add_scalar(cur, 0.0)
        T.backward(T.sum_all(cur))
        assert a.grad[0, 0, 0, 0] == 1.0


class TestGradCheck:
    """Central-difference verification of every op's backward rule."""

    @pytest.mark.parametrize("seed", range(3))
    def test_arithmetic_ops(self, seed):
        # operands bounded away from zero keep every coordinate's gradient
        # large relative to finite-difference noise
        rng = np.random.default_rng(seed)
        with T.using_dtype(np.float64):
            a = T.Tensor(rng.uniform(0.5, 1.5, size=(2, 3, 4, 4)), requires_grad=True)
            b = T.Tensor(rng.uniform(1.0, 2.0, size=(2, 3, 4, 4)), requires_grad=True)

            def f_mul(x, y):
                s = T.add_scalar(T.sub(T.mul(x, y), T.scale(y, 0.3)), 2.0)
                return T.sum_all(T.mul(s, s))

            def f_div(x, y):
                s = T.add_scalar(T.div(x, y), 2.0)
                return T.sum_all(T.mul(s, s))

            assert T.grad_check(f_mul, [a, b]) < 1e-7
            assert T.grad_check(f_div, [a, b]) < 1e-7

    @pytest.mark.parametrize("seed", range(3))
    def test_structure_ops(self, seed):
        rng = np.random.default_rng(10 + seed)
        with T.using_dtype(np.float64):
            a = randt(rng, (1, 2, 4, 4))
            b = randt(rng, (1, 3, 4, 4))

            def f(x, y):
                cat = T.concat_channels([x, y])
                sl = T.slice_channels(cat, 1, 4)
                cr = T.crop_spatial(sl, 1, 4, 0, 3)
                return T.sum_all(T.mul(cr, cr))

            assert T.grad_check(f, [a, b]) < 1e-7

    @pytest.mark.parametrize("seed", range(3))
    def test_smooth_unary_ops(self, seed):
        rng = np.random.default_rng(20 + seed)
        with T.using_dtype(np.float64):
            a = T.Tensor(rng.uniform(0.5, 2.0, size=(1, 2, 3, 3)), requires_grad=True)

            def f(x):
                s = T.add(T.exp(T.scale(x, 0.3)), T.log(x))
                s = T.add(s, T.power(x, 1.7))
                s = T.add(s, T.sqrt(x))
                s = T.add(s, T.log2(x))
                s = T.add(s, T.softplus(x))
                s = T.add(s, T.normal_cdf(x))
                return T.sum_all(T.mul(s, s))

            assert T.grad_check(f, [a]) < 1e-7

    def test_mean_and_broadcast(self):
        rng = np.random.default_rng(5)
        with T.using_dtype(np.float64):
            a = randt(rng, (1, 3, 1, 1))

            def f(x):
                wide = T.broadcast_channels(x, (2, 3, 4, 4))
                return T.mean_all(T.mul(wide, wide))

            assert T.grad_check(f, [a]) < 1e-8

    def test_clamp_kink_safe(self):
        rng = np.random.default_rng(6)
        with T.using_dtype(np.float64):
            # keep every coordinate at least 1e-3 away from the clamp point
            vals = rng.uniform(0.5, 1.5, size=(1, 1, 4, 4))
            vals = np.where(np.abs(vals - 1.0) < 1e-3, vals + 5e-3, vals)
            a = T.Tensor(vals, requires_grad=True)

            def f(x):
                c = T.clamp_min(x, 1.0)
                return T.sum_all(T.mul(c, c))

            assert T.grad_check(f, [a]) < 1e-7

    def test_grad_check_rejects_float32(self):
        a = T.Tensor(np.ones((1, 1, 1, 1), dtype=np.float32), requires_grad=True)
        with pytest.raises(ContractError):
            T.grad_check(lambda x: T.sum_all(x), [a])
