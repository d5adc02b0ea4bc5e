import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sodium import numcore as nc


def test_matmul_identity():
    a = nc.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = nc.matmul(nc.Tensor(np.eye(2)), a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_orthogonal_pick():
    out = nc.matmul(nc.Tensor([[1.0, 0.0]]), nc.Tensor([[0.0], [5.0]]))
    np.testing.assert_array_equal(out.data, [[0.0]])


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.Generator(np.random.PCG64(7))
    a = rng.uniform(-2, 2, (3, 4))
    b = rng.uniform(-2, 2, (4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(nc.matmul(nc.Tensor(a), nc.Tensor(b)).data, expected, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nc.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        nc.matmul(nc.Tensor(np.zeros((2, 3))), nc.Tensor(np.zeros((2, 2))))


def test_logsumexp_symmetric_pair():
    assert nc.logsumexp(nc.Tensor([0.0, 0.0]), 1.0).item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_logsumexp_single_term_is_identity():
    for z, t in [(3.7, 1.0), (-2.0, 0.3), (0.0, 5.0)]:
        assert nc.logsumexp(nc.Tensor([z]), t).item() == pytest.approx(z, abs=1e-12)


def test_logsumexp_no_overflow():
    out = nc.logsumexp(nc.Tensor([1000.0, 0.0]), 1.0).item()
    assert math.isfinite(out)
    assert out == pytest.approx(1000.0, abs=1e-9)


def test_logsumexp_rejects_bad_inputs():
    with pytest.raises(ValueError):
        nc.logsumexp_np(np.array([]), 1.0)
    with pytest.raises(ValueError):
        nc.logsumexp(nc.Tensor([1.0]), 0.0)
    with pytest.raises(ValueError):
        nc.logsumexp(nc.Tensor([1.0]), -2.0)


@settings(max_examples=100)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8),
       st.floats(-30, 30),
       st.floats(0.1, 5.0))
def test_logsumexp_shift_identity(values, c, temperature):
    base = nc.logsumexp_np(np.array(values), temperature)
    shifted = nc.logsumexp_np(np.array(values) + c, temperature)
    assert shifted == pytest.approx(base + c, abs=1e-9)


def test_backward_of_sum_is_ones():
    x = nc.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    nc.backward(nc.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_half_squared_norm_is_x():
    rng = np.random.Generator(np.random.PCG64(0))
    x = nc.Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    nc.backward(nc.mul_scalar(nc.sum_all(nc.square(x)), 0.5))
    np.testing.assert_allclose(x.grad, x.data, rtol=1e-12)


def test_backward_rejects_nonscalar_loss():
    x = nc.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        nc.backward(nc.tanh(x))


def test_composite_graph_matches_finite_differences():
    # A small MLP-shaped composite touching most ops.
    rng = np.random.Generator(np.random.PCG64(3))
    x = rng.uniform(-2, 2, (5, 4))
    w1 = rng.uniform(-1, 1, (4, 6))
    b1 = rng.uniform(-1, 1, 6)
    w2 = rng.uniform(-1, 1, (6, 3))
    labels = rng.integers(0, 3, 5)

    def forward(w1a, b1a, w2a):
        h = nc.tanh(nc.add_bias(nc.matmul(nc.Tensor(x), w1a), b1a))
        logits = nc.matmul(h, w2a)
        ce = nc.cross_entropy(logits, labels)
        reg = nc.mul_scalar(nc.mean_all(nc.square(w2a)), 0.1)
        return nc.add(ce, reg)

    params = [nc.Tensor(w1, requires_grad=True), nc.Tensor(b1, requires_grad=True),
              nc.Tensor(w2, requires_grad=True)]
    nc.backward(forward(*params))
    raw = [w1, b1, w2]
    for i, p in enumerate(params):
        def f(arr, i=i):
            probe = [r.copy() for r in raw]
            probe[i] = arr
            return forward(*[nc.Tensor(q) for q in probe]).item()

        num = nc.numeric_grad(f, raw[i].copy(), 1e-5)
        np.testing.assert_allclose(p.grad, num, rtol=1e-4, atol=1e-6)


def test_gradcheck_suite_passes():
    for name, max_err, ok in nc.check_gradients(seed=0, instances=3):
        assert ok, f"gradient check failed for {name} (max err {max_err:.3e})"


def test_adam_zero_gradient_leaves_params_unchanged():
    p = nc.Tensor([1.0, -2.0, 3.0], requires_grad=True)
    state = nc.adam_init([p], lr=0.1)
    before = p.data.copy()
    nc.adam_step([p], [np.zeros(3)], state)
    np.testing.assert_array_equal(p.data, before)
    assert state.t == 1


def test_adam_first_step_is_signed_learning_rate():
    p = nc.Tensor([1.0, 1.0], requires_grad=True)
    state = nc.adam_init([p], lr=0.05)
    nc.adam_step([p], [np.array([3.0, -0.2])], state)
    # After bias correction the first step is -lr * sign(g) up to eps.
    np.testing.assert_allclose(p.data, [1.0 - 0.05, 1.0 + 0.05], atol=1e-6)


def test_adam_five_step_trace_matches_scalar_oracle():
    # Oracle: hand-rolled scalar Adam on f(w) = 0.5 * (w - 3)^2.
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    w_oracle, m, v = 0.0, 0.0, 0.0
    trace = []
    for t in range(1, 6):
        g = w_oracle - 3.0
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w_oracle -= lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(w_oracle)

    p = nc.Tensor([0.0], requires_grad=True)
    state = nc.adam_init([p], lr=lr)
    for t in range(5):
        loss = nc.mul_scalar(nc.square(nc.add_scalar(p, -3.0)), 0.5)
        nc.backward(nc.sum_all(loss))
        nc.adam_step([p], [p.grad], state)
        p.zero_grad()
        assert p.data[0] == pytest.approx(trace[t], abs=1e-10)


def test_adam_length_mismatch_rejected():
    p = nc.Tensor([1.0], requires_grad=True)
    state = nc.adam_init([p], lr=0.1)
    with pytest.raises(ValueError):
        nc.adam_step([p], [], state)


def test_l2_distance_examples():
    x = nc.Tensor([0.3, -1.2, 4.0])
    assert nc.l2_distance(x, x).item() == 0.0
    d = nc.l2_distance(nc.Tensor([1.0, 0.0]), nc.Tensor([0.0, 1.0]))
    assert d.item() == pytest.approx(1.4142135623730951, abs=1e-12)


def test_softmax_uniform_on_equal_logits():
    out = nc.softmax_rows(nc.Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


@settings(max_examples=100)
@given(st.lists(st.lists(st.floats(-15, 15), min_size=2, max_size=6), min_size=1, max_size=5)
       .filter(lambda rows: len({len(r) for r in rows}) == 1))
def test_softmax_rows_sum_to_one_in_open_interval(rows):
    s = nc.softmax_rows(nc.Tensor(rows)).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(s > 0.0) and np.all(s < 1.0)


def test_elementwise_shape_mismatch_rejected():
    with pytest.raises(nc.ShapeError):
        nc.add(nc.Tensor([1.0]), nc.Tensor([1.0, 2.0]))
    with pytest.raises(nc.ShapeError):
        nc.l2_distance(nc.Tensor([1.0]), nc.Tensor([1.0, 2.0]))


def test_determinism_bitwise():
    def run():
        rng = np.random.Generator(np.random.PCG64(42))
        x = nc.Tensor(rng.uniform(-2, 2, (8, 5)), requires_grad=True)
        w = nc.Tensor(rng.uniform(-1, 1, (5, 4)), requires_grad=True)
        loss = nc.mean_all(nc.square(nc.tanh(nc.matmul(x, w))))
        nc.backward(loss)
        state = nc.adam_init([w], lr=0.01)
        nc.adam_step([w], [w.grad], state)
        return loss.item(), w.data.copy(), x.grad.copy()

    l1, w1, g1 = run()
    l2, w2, g2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(w1, w2)
    np.testing.assert_array_equal(g1, g2)
