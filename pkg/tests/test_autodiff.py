import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import dhrd.autodiff as ad
from dhrd.autodiff import (
    NonFinite,
    NotScalar,
    ShapeMismatch,
    TapeConsumed,
    Tensor,
    backward,
)


def rand(shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).normal(size=shape).astype(dtype)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.allclose(ad.matmul(a, b).data, b.data)

    def test_selector_row(self):
        a = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.allclose(ad.matmul(a, b).data, [[5.0, 6.0], [0.0, 0.0]])

    def test_matches_triple_loop_oracle(self):
        a, b = rand((3, 4), 1), rand((4, 2), 2)
        expect = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expect[i, j] += a[i, k] * b[k, j]
        assert np.allclose(ad.matmul(Tensor(a), Tensor(b)).data, expect, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(Tensor(rand((2, 3))), Tensor(rand((2, 3))))


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax_rows(Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_constant_row(self):
        out = ad.softmax_rows(Tensor([3.7, 3.7, 3.7]))
        assert np.allclose(out.data, [1 / 3] * 3)

    def test_no_overflow_on_large_logits(self):
        out = ad.softmax_rows(Tensor([1000.0, 0.0]))
        assert abs(out.data[0] - 1.0) < 1e-12
        assert abs(out.data[1]) < 1e-12

    def test_nonfinite_rejected(self):
        with pytest.raises(NonFinite):
            ad.softmax_rows(Tensor([np.nan, 1.0]))

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-30, 30))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one_and_shift_invariant(self, row, shift):
        base = ad.softmax_rows(Tensor(row, dtype=np.float64)).data
        shifted = ad.softmax_rows(Tensor([v + shift for v in row], dtype=np.float64)).data
        assert abs(base.sum() - 1.0) < 1e-6
        assert np.allclose(base, shifted, atol=1e-9)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = Tensor(np.full((2, 4), 3.0))
        out = ad.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.0)

    def test_zero_gain_gives_bias(self):
        x = Tensor(rand((3, 5)))
        bias = Tensor(np.arange(5.0))
        out = ad.layer_norm(x, Tensor(np.zeros(5)), bias)
        assert np.allclose(out.data, np.broadcast_to(bias.data, (3, 5)))

    def test_matches_two_pass_oracle(self):
        x = rand((1, 8), 3)
        gain, bias = rand(8, 4), rand(8, 5)
        eps = 1e-5
        mu = x.mean()
        var = ((x - mu) ** 2).mean()
        expect = (x - mu) / np.sqrt(var + eps) * gain + bias
        got = ad.layer_norm(Tensor(x), Tensor(gain), Tensor(bias), eps=eps)
        assert np.allclose(got.data, expect, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.layer_norm(Tensor(rand((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(ad.sum_all(x))
        assert np.allclose(x.grad, [1.0, 1.0, 1.0])

    def test_quadratic_gradient(self):
        x = Tensor([1.0, -2.0, 0.5], requires_grad=True)
        loss = ad.scale(ad.sum_all(ad.mul(x, x)), 0.5)
        backward(loss)
        assert np.allclose(x.grad, x.data)

    def test_accumulation_across_two_uses(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        a = ad.scale(x, 2.0)
        b = ad.scale(x, 3.0)
        backward(ad.sum_all(ad.add(a, b)))
        assert np.allclose(x.grad, [5.0, 5.0])

    def test_not_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(NotScalar):
            backward(ad.scale(x, 2.0))

    def test_tape_consumed(self):
        x = Tensor([1.0], requires_grad=True)
        loss = ad.sum_all(x)
        backward(loss)
        with pytest.raises(TapeConsumed):
            backward(loss)

    def test_no_grad_suppresses_recording(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with ad.no_grad():
            out = ad.sum_all(ad.mul(x, x))
        assert out._backward_fn is None


def _fd_check(op, shapes, seed, atol=1e-5):
    """Central finite differences vs analytic gradient for a scalarized op."""
    tensors = [Tensor(rand(s, seed + i), requires_grad=True) for i, s in enumerate(shapes)]
    weights = rand(op(*tensors).data.shape, seed + 99)

    def scalar():
        return float((op(*tensors).data * weights).sum())

    loss = ad.sum_all(ad.mul(op(*tensors), ad.constant(weights)))
    backward(loss)
    h = 1e-6
    for t in tensors:
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1)
        idxs = np.random.default_rng(seed).choice(flat.size, size=min(8, flat.size), replace=False)
        with ad.no_grad():
            for i in idxs:
                old = flat[i]
                flat[i] = old + h
                up = scalar()
                flat[i] = old - h
                down = scalar()
                flat[i] = old
                fd = (up - down) / (2 * h)
                assert abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-6) < 1e-4


@pytest.mark.parametrize(
    "op,shapes",
    [
        (ad.matmul, [(3, 4), (4, 2)]),
        (ad.bmm, [(2, 3, 4), (2, 4, 3)]),
        (ad.softmax_rows, [(3, 5)]),
        (ad.log_softmax_rows, [(3, 5)]),
        (ad.gelu, [(4, 4)]),
        (lambda x, g, b: ad.layer_norm(x, g, b), [(3, 6), (6,), (6,)]),
        (ad.add, [(3, 4), (3, 4)]),
        (ad.mul, [(3, 4), (3, 4)]),
        (lambda x: ad.transpose(x, (1, 0)), [(3, 4)]),
        (lambda x: ad.reshape(x, (12,)), [(3, 4)]),
    ],
    ids=["matmul", "bmm", "softmax", "log_softmax", "gelu", "layer_norm", "add", "mul", "transpose", "reshape"],
)
def test_gradient_vs_finite_differences(op, shapes):
    _fd_check(op, shapes, seed=11)


def test_gather_and_select_gradients():
    table = Tensor(rand((7, 3), 2), requires_grad=True)
    ids = np.array([[1, 1, 4], [0, 6, 4]])
    out = ad.gather_rows(table, ids)
    backward(ad.sum_all(out))
    # row 1 used twice, row 4 twice: gradient counts multiplicity
    expect = np.zeros((7, 3))
    for r, n in [(1, 2), (4, 2), (0, 1), (6, 1)]:
        expect[r] = n
    assert np.allclose(table.grad, expect)

    h = Tensor(rand((2, 4, 3), 5), requires_grad=True)
    picked = ad.select_positions(h, [1, 3])
    backward(ad.sum_all(picked))
    assert np.allclose(h.grad[0, 1], 1.0) and np.allclose(h.grad[1, 3], 1.0)
    assert h.grad.sum() == pytest.approx(6.0)


def test_determinism():
    x = rand((4, 4), 9)

    def go():
        t = Tensor(x.copy(), requires_grad=True)
        loss = ad.sum_all(ad.gelu(ad.matmul(ad.softmax_rows(t), t)))
        backward(loss)
        return float(loss.data), t.grad.copy()

    l1, g1 = go()
    l2, g2 = go()
    assert l1 == l2
    assert np.array_equal(g1, g2)
