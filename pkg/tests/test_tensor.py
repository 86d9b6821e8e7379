import math

import numpy as np
import pytest

from pneumonet import tensor as T
from pneumonet.errors import ContractError, DimensionError
from pneumonet.tensor import Tensor


def matmul_oracle(a, b):
    """Direct triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def numeric_grad(f, x, step=1e-5):
    """Central finite differences of scalar-valued f at array x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def assert_close_rel(actual, expected, rtol=1e-4):
    denom = np.maximum(np.abs(expected), 1.0)
    np.testing.assert_array_less(np.abs(actual - expected) / denom, rtol)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, Tensor(np.eye(2)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_against_triple_loop(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = T.matmul(Tensor(a), Tensor(b))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])
        np.testing.assert_allclose(out.data, matmul_oracle(a, b))

    def test_random_against_triple_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m, k, n = rng.integers(1, 6, size=3)
            a = rng.normal(size=(m, k))
            b = rng.normal(size=(k, n))
            out = T.matmul(Tensor(a), Tensor(b))
            np.testing.assert_allclose(out.data, matmul_oracle(a, b), rtol=1e-12)

    def test_inner_dimension_error_names_shapes(self):
        a = Tensor(np.zeros((2, 3)))
        b = Tensor(np.zeros((4, 2)))
        with pytest.raises(DimensionError) as exc:
            T.matmul(a, b)
        assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)

    def test_batched_matches_per_slice(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 4, 2, 5))
        b = rng.normal(size=(3, 4, 5, 3))
        out = T.matmul(Tensor(a), Tensor(b))
        for i in range(3):
            for j in range(4):
                np.testing.assert_allclose(out.data[i, j], a[i, j] @ b[i, j])


class TestSoftmax:
    def test_symmetric_pair(self):
        out = T.softmax_lastdim(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_hand_evaluated(self):
        # exp(0) = 1, exp(ln 3) = 3 -> [1/4, 3/4]
        out = T.softmax_lastdim(Tensor([0.0, math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_no_overflow_on_huge_logits(self):
        out = T.softmax_lastdim(Tensor([1000.0, 1000.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_rows_sum_to_one_up_to_1e4(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            x = rng.uniform(-1e4, 1e4, size=(4, 7))
            out = T.softmax_lastdim(Tensor(x))
            assert np.all(out.data >= 0.0) and np.all(out.data <= 1.0)
            np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_empty_last_dim_rejected(self):
        with pytest.raises(DimensionError):
            T.softmax_lastdim(Tensor(np.zeros((2, 0))))


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor(0.0)).item() == 0.0

    def test_against_erf_oracle(self):
        # x * Phi(x) evaluated with the stdlib erf
        for x in (3.0, -3.0, 0.5, -1.7):
            expected = x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))
            assert abs(T.gelu(Tensor(x)).item() - expected) < 1e-12
        assert abs(T.gelu(Tensor(3.0)).item() - 2.99596) < 1e-4
        assert abs(T.gelu(Tensor(-3.0)).item() - (-0.00405)) < 1e-4


class TestBackward:
    def test_square_at_three(self):
        x = Tensor(3.0, requires_grad=True)
        loss = T.mul(x, x)
        loss.backward()
        assert float(x.grad) == 6.0

    def test_matmul_sum_gradient(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        ta = Tensor(a.copy(), requires_grad=True)
        loss = T.tsum(T.matmul(ta, Tensor(b)))
        loss.backward()
        # analytic: grad(A)[i,t] = sum_j B[t,j]; cross-check with finite differences
        np.testing.assert_allclose(ta.grad, np.tile(b.sum(axis=1), (3, 1)))
        fd = numeric_grad(lambda arr: (arr @ b).sum(), a.copy())
        assert_close_rel(ta.grad, fd)

    def test_constant_loss_writes_nothing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.tsum(Tensor([5.0]))
        loss.backward()
        assert x.grad is None

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        out = T.mul(x, x)
        with pytest.raises(ContractError):
            out.backward()

    def test_repeated_use_of_same_input(self):
        # y = x * x + x  ->  dy/dx = 2x + 1
        x = Tensor(2.0, requires_grad=True)
        y = T.add(T.mul(x, x), x)
        y.backward()
        assert float(x.grad) == 5.0


UNARY_OPS = {
    "relu": (T.relu, lambda rng, s: rng.normal(size=s) + 0.05),
    "sigmoid": (T.sigmoid, lambda rng, s: rng.normal(size=s) * 3.0),
    "gelu": (T.gelu, lambda rng, s: rng.normal(size=s) * 2.0),
    "exp": (T.exp, lambda rng, s: rng.normal(size=s)),
    "log": (T.log, lambda rng, s: rng.uniform(0.5, 3.0, size=s)),
    "sqrt": (T.sqrt, lambda rng, s: rng.uniform(0.5, 3.0, size=s)),
    "softmax": (T.softmax_lastdim, lambda rng, s: rng.normal(size=s) * 2.0),
    "square": (lambda t: T.power(t, 2.0), lambda rng, s: rng.normal(size=s)),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_unary_gradients_match_finite_differences(name):
    """Analytic gradients agree with central differences over 100 trials."""
    op, sampler = UNARY_OPS[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(100):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        x = sampler(rng, shape)
        w = rng.normal(size=shape)  # random projection makes the loss scalar
        t = Tensor(x.copy(), requires_grad=True)
        loss = T.tsum(T.mul(op(t), Tensor(w)))
        loss.backward()
        fd = numeric_grad(lambda arr: (np.asarray(
            op(Tensor(arr)).data) * w).sum(), x.copy())
        assert_close_rel(t.grad, fd)


def test_binary_gradients_match_finite_differences():
    rng = np.random.default_rng(99)
    for _ in range(100):
        m, k, n = rng.integers(1, 5, size=3)
        a = rng.normal(size=(m, k))
        b = rng.normal(size=(k, n))
        w = rng.normal(size=(m, n))
        ta = Tensor(a.copy(), requires_grad=True)
        tb = Tensor(b.copy(), requires_grad=True)
        loss = T.tsum(T.mul(T.matmul(ta, tb), Tensor(w)))
        loss.backward()
        fd_a = numeric_grad(lambda arr: ((arr @ b) * w).sum(), a.copy())
        fd_b = numeric_grad(lambda arr: ((a @ arr) * w).sum(), b.copy())
        assert_close_rel(ta.grad, fd_a)
        assert_close_rel(tb.grad, fd_b)


def test_broadcast_add_bias_gradient():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 3))
    bias = rng.normal(size=(3,))
    tb = Tensor(bias.copy(), requires_grad=True)
    loss = T.tsum(T.add(Tensor(x), tb))
    loss.backward()
    np.testing.assert_allclose(tb.grad, np.full(3, 4.0))


def test_clip_gradient_masks_outside():
    x = Tensor([-2.0, 0.5, 2.0], requires_grad=True)
    loss = T.tsum(T.clip(x, 0.0, 1.0))
    loss.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_two_passes_bitwise_identical():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(5, 5))
    w = rng.normal(size=(5, 5))

    def run():
        t = Tensor(x.copy(), requires_grad=True)
        loss = T.tsum(T.gelu(T.matmul(t, Tensor(w.copy()))))
        loss.backward()
        return t.grad

    g1, g2 = run(), run()
    assert np.array_equal(g1, g2)


def test_values_finite_after_forward_backward():
    rng = np.random.default_rng(13)
    x = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
    out = T.softmax_lastdim(T.gelu(T.matmul(x, Tensor(rng.normal(size=(6, 6))))))
    assert np.all(np.isfinite(out.data))
    T.tsum(out).backward()
    assert np.all(np.isfinite(x.grad))


def test_default_dtype_switch():
    T.set_default_dtype(np.float32)
    try:
        assert Tensor([1, 2]).dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
    assert Tensor([1, 2]).dtype == np.float64
    with pytest.raises(ContractError):
        T.set_default_dtype(np.int32)
