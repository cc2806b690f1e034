import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowsteer.autodiff import (
    ContractError,
    DimensionError,
    Tensor,
    concat,
    grad,
    jvp,
    matmul,
    spectral_norm,
    take_rows,
    vjp,
)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for q in range(k):
                s += a[i, q] * b[q, j]
            out[i, j] = s
    return out


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def mlp_params(rng, d_in=5, h=7, d_out=3):
    return [rng.standard_normal((d_in, h)) * 0.5, rng.standard_normal(h) * 0.1,
            rng.standard_normal((h, d_out)) * 0.5, rng.standard_normal(d_out) * 0.1]


def mlp(x, p):
    w0, b0, w1, b1 = p
    h = (matmul(x.reshape(1, -1), Tensor(w0)) + b0).silu()
    return (matmul(h, Tensor(w1)) + b1).tanh().reshape(-1)


def mlp_np(x, p):
    w0, b0, w1, b1 = p
    a = x @ w0 + b0
    h = a / (1 + np.exp(-a))
    return np.tanh(h @ w1 + b1)


def test_matmul_identity():
    assert np.array_equal(matmul([[1, 0], [0, 1]], [[3], [4]]).data, [[3], [4]])


def test_matmul_row_col():
    assert matmul([[1, 2]], [[3], [4]]).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    assert np.max(np.abs(matmul(a, b).data - triple_loop(a, b))) <= 1e-12


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_grad_quadratic():
    assert np.array_equal(grad(lambda x: x.square().sum(), [1.0, 2.0]), [2.0, 4.0])


def test_grad_sum_is_ones():
    assert np.array_equal(grad(lambda x: x.sum(), np.arange(4.0)), np.ones(4))


def test_grad_non_scalar_raises():
    with pytest.raises(ContractError):
        grad(lambda x: x * 2.0, [1.0, 2.0])
    with pytest.raises(ContractError):
        (Tensor([1.0, 2.0], requires_grad=True) * 3.0).backward()


def test_grad_mlp_loss_matches_central_difference():
    rng = np.random.default_rng(2)
    p = mlp_params(rng)
    x = rng.standard_normal(5)
    target = rng.standard_normal(3)
    g = grad(lambda t: (mlp(t, p) - target).square().sum(), x)
    fd = central_diff(lambda t: float(np.sum((mlp_np(t, p) - target) ** 2)), x)
    rel = np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)
    assert rel <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.integers(0, 2**31 - 1))
def test_grad_composed_matches_fd(xs, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((3, 4)) * 0.3
    x = np.array(xs)

    def f(t):
        h = matmul(t.reshape(1, 3), Tensor(w)).tanh()
        return (h * h + h.silu()).mean() + (t * 0.1).square().sum()

    def f_np(t):
        h = np.tanh(t @ w)
        return float(np.mean(h * h + h / (1 + np.exp(-h))) + np.sum((0.1 * t) ** 2))

    g = grad(f, x)
    fd = central_diff(f_np, x)
    scale = max(np.max(np.abs(fd)), 1e-3)
    assert np.max(np.abs(g - fd)) / scale <= 1e-5


def test_ops_are_pure():
    rng = np.random.default_rng(3)
    p = mlp_params(rng)
    x = rng.standard_normal(5)
    a = grad(lambda t: mlp(t, p).sum(), x)
    b = grad(lambda t: mlp(t, p).sum(), x)
    assert np.array_equal(a, b)
    assert np.array_equal(mlp(Tensor(x), p).data, mlp(Tensor(x), p).data)


def test_tape_replay_bit_identical():
    x = Tensor(np.array([0.3, -1.2, 2.0]), requires_grad=True)
    y1 = (x.silu() * x).sum()
    y2 = (x.silu() * x).sum()
    assert y1.data == y2.data


def test_concat_and_take_rows_gradients():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    rows = take_rows(table, np.array([2, 2, 0]))
    out = concat([rows, Tensor(np.ones((3, 1)))], axis=1).sum()
    out.backward()
    assert table.grad.tolist() == [[1, 1], [0, 0], [2, 2]]


def test_broadcast_add_gradient():
    b = Tensor(np.zeros(3), requires_grad=True)
    (Tensor(np.ones((4, 3))) + b).sum().backward()
    assert b.grad.tolist() == [4, 4, 4]


def test_jvp_affine_exact():
    rng = np.random.default_rng(4)
    A, b = rng.standard_normal((4, 4)), rng.standard_normal(4)
    v = rng.standard_normal(4)
    g = lambda t: matmul(t.reshape(1, 4), Tensor(A.T)).reshape(4) + b
    assert np.max(np.abs(jvp(g, rng.standard_normal(4), v) - A @ v)) < 1e-8


def test_jvp_identity():
    v = np.array([1.0, -2.0, 0.5])
    assert np.allclose(jvp(lambda t: t * 1.0, np.zeros(3), v), v, atol=1e-10)


def test_jvp_mlp_matches_central_difference():
    rng = np.random.default_rng(5)
    p = mlp_params(rng)
    x, v = rng.standard_normal(5), rng.standard_normal(5)
    h = 1e-5
    ref = (mlp_np(x + h * v, p) - mlp_np(x - h * v, p)) / (2 * h)
    assert np.max(np.abs(jvp(lambda t: mlp(t, p), x, v) - ref)) <= 1e-5


def test_jvp_shape_mismatch():
    with pytest.raises(DimensionError):
        jvp(lambda t: t, np.zeros(3), np.zeros(2))


def test_vjp_matches_transpose():
    rng = np.random.default_rng(6)
    A = rng.standard_normal((3, 5))
    w = rng.standard_normal(3)
    g = lambda t: matmul(t.reshape(1, 5), Tensor(A.T)).reshape(3)
    assert np.allclose(vjp(g, rng.standard_normal(5), w), A.T @ w, atol=1e-12)


def test_spectral_norm_matches_svd():
    rng = np.random.default_rng(7)
    A = rng.standard_normal((6, 6))
    g = lambda t: matmul(t.reshape(1, 6), Tensor(A.T)).reshape(6)
    sigma = spectral_norm(g, rng.standard_normal(6), iters=200)
    assert abs(sigma - np.linalg.svd(A, compute_uv=False)[0]) < 1e-6
