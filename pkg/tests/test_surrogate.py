import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowsteer.sampler import TimeGrid, correction_target
from flowsteer.surrogate import (
    decomposition_residual,
    jacobian_norm,
    prompt_delta,
    surrogate_loss,
    true_loss,
    verify_propositions,
)
from flowsteer.velocity import AffineField, ConstantField, Prompt

EDIT = int(Prompt.EDIT_TEXT_REMOVAL)


def affine(dim=6, seed=0):
    rng = np.random.default_rng(seed)
    return AffineField(rng.standard_normal((dim, dim)) * 0.4, rng.standard_normal(dim),
                       {EDIT: rng.standard_normal(dim)})


def test_surrogate_zero_at_target():
    rng = np.random.default_rng(0)
    x, u = rng.random(5), rng.standard_normal(5)
    grid = TimeGrid.uniform(10)
    assert surrogate_loss(correction_target(x, grid, 3, u), x, grid, 3, u).value < 1e-18


def test_surrogate_arithmetic():
    ev = surrogate_loss([0.0], [1.0], TimeGrid.uniform(1), 0, [0.0])
    assert ev.value == 1.0 and ev.gradient.tolist() == [-2.0] and ev.remaining == 1.0


def test_surrogate_gradient_matches_fd():
    rng = np.random.default_rng(1)
    x, u, z = rng.random(4), rng.standard_normal(4), rng.standard_normal(4)
    grid = TimeGrid.uniform(8)
    g = surrogate_loss(z, x, grid, 2, u).gradient
    h = 1e-6
    fd = np.array([(surrogate_loss(z + h * e, x, grid, 2, u).value - surrogate_loss(z - h * e, x, grid, 2, u).value)
                   / (2 * h) for e in np.eye(4)])
    assert np.max(np.abs(g - fd)) <= 1e-8


def test_strict_convexity_witness():
    rng = np.random.default_rng(2)
    x, u = rng.random(5), rng.standard_normal(5)
    grid = TimeGrid.uniform(10)
    star = correction_target(x, grid, 4, u)
    for _ in range(5):
        eps = rng.standard_normal(5)
        gain = surrogate_loss(star + eps, x, grid, 4, u).value - surrogate_loss(star, x, grid, 4, u).value
        assert gain == pytest.approx(eps @ eps, rel=1e-12)


def test_true_gradient_constant_field_equals_surrogate():
    f = ConstantField(np.array([0.3, -0.2, 0.8]))
    z, x = np.array([0.1, 0.2, 0.3]), np.array([0.5, 0.5, 0.5])
    grid = TimeGrid.uniform(5)
    tl = true_loss(f, z, x, grid, 2)
    assert np.array_equal(tl.gradient, surrogate_loss(z, x, grid, 2, tl.u).gradient)


def test_true_gradient_affine_closed_form():
    f = affine()
    rng = np.random.default_rng(3)
    grid = TimeGrid.uniform(20)
    for _ in range(10):
        z, x, i = rng.standard_normal(6), rng.random(6), int(rng.integers(0, 20))
        tl = true_loss(f, z, x, grid, i)
        sur = surrogate_loss(z, x, grid, i, tl.u)
        expect = (np.eye(6) + sur.remaining * f.A).T @ sur.gradient
        assert np.max(np.abs(tl.gradient - expect)) < 1e-10
        assert tl.value >= 0.0


def test_true_gradient_bound_on_trained_field(small_model):
    rng = np.random.default_rng(4)
    grid = TimeGrid.uniform(20)
    for k in range(10):
        z, x, i = rng.standard_normal(16), rng.random(16), int(rng.integers(0, 20))
        tl = true_loss(small_model, z, x, grid, i)
        sur = surrogate_loss(z, x, grid, i, tl.u)
        jn = jacobian_norm(small_model, z, x, grid, i, seed=k)
        gap = np.linalg.norm(tl.gradient - sur.gradient)
        assert gap <= sur.remaining * jn * np.linalg.norm(sur.gradient) + 1e-4


def test_jacobian_norm_affine():
    f = affine(seed=5)
    grid = TimeGrid.uniform(4)
    jn = jacobian_norm(f, np.zeros(6), np.zeros(6), grid, 0, iters=200)
    assert jn == pytest.approx(np.linalg.svd(f.A, compute_uv=False)[0], rel=1e-6)


def test_prompt_delta_cases(small_model):
    rng = np.random.default_rng(6)
    z, x = rng.standard_normal(16), rng.random(16)
    grid = TimeGrid.uniform(10)
    assert np.array_equal(prompt_delta(small_model, z, grid, 2, Prompt.EMPTY, x), np.zeros(16))
    f = AffineField(np.eye(3), np.ones(3))
    assert np.array_equal(prompt_delta(f, np.ones(3), grid, 2, EDIT, np.zeros(3)), np.zeros(3))
    d = prompt_delta(small_model, z, grid, 2, EDIT, x)
    v_c = small_model.evaluate(z, grid.times[2], EDIT, x)
    v_e = small_model.evaluate(z, grid.times[2], Prompt.EMPTY, x)
    assert np.array_equal(d, v_c - v_e)
    assert np.array_equal(v_e - v_c, -d)


def test_decomposition_direct_vs_decomposed(small_model):
    rng = np.random.default_rng(7)
    grid = TimeGrid.uniform(20)
    for field, dim in ((small_model, 16), (affine(), 6)):
        for _ in range(10):
            z, x = rng.standard_normal(dim), rng.random(dim)
            assert decomposition_residual(field, z, grid, int(rng.integers(0, 20)), EDIT, x) <= 1e-12


@pytest.mark.parametrize("alpha, ratio", [(0.1, 0.81), (0.01, 0.9801)])
def test_contraction_ratio(alpha, ratio):
    f = affine()
    rng = np.random.default_rng(8)
    rep = verify_propositions(f, rng.standard_normal(6), rng.random(6), TimeGrid.uniform(20), 3, alpha)
    assert abs(rep.loss_after / rep.loss_before - ratio) < 1e-9
    assert rep.ok


def test_full_strength_reaches_minimum():
    f = affine()
    rng = np.random.default_rng(9)
    rep = verify_propositions(f, rng.standard_normal(6), rng.random(6), TimeGrid.uniform(20), 5, 1.0)
    assert rep.loss_after < 1e-18 and rep.ok


def test_verify_rejects_bad_alpha():
    with pytest.raises(ValueError):
        verify_propositions(affine(), np.zeros(6), np.zeros(6), TimeGrid.uniform(4), 0, 1.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.integers(0, 19))
def test_propositions_hold_on_random_instances(seed, alpha, i):
    rng = np.random.default_rng(seed)
    f = affine(seed=seed % 5)
    rep = verify_propositions(f, rng.standard_normal(6) * 3, rng.random(6), TimeGrid.uniform(20), i, alpha, rng=rng)
    assert rep.ok, rep.as_dict()
    assert rep.minimizer_residual < 1e-18
    assert rep.gradient_step_residual < 1e-10
    assert rep.contraction_residual < 1e-9
