import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sodium import gda


def random_fitted_model(rng, n_classes=3, dim=4, n_per_class=60):
    samples = []
    for c in range(n_classes):
        center = rng.uniform(-3, 3, dim)
        spread = rng.uniform(0.3, 1.5, dim)
        for _ in range(n_per_class):
            samples.append((center + spread * rng.standard_normal(dim), c))
    return gda.fit(samples), samples


def test_fit_two_point_hand_computation():
    model = gda.fit([(np.array([1.0, 0.0]), "a"), (np.array([-1.0, 0.0]), "a"),
                     (np.array([5.0, 5.0]), "b"), (np.array([5.0, 6.0]), "b")])
    i = model.class_index("a")
    np.testing.assert_allclose(model.means[i], [0.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(model.covariances[i], [[2.0, 0.0], [0.0, 0.0]], atol=1e-12)
    # Shrinkage makes the factorization succeed despite the zero eigenvalue.
    assert model.shrinkage[i] > 0
    assert np.all(np.isfinite(model.chol[i]))


def test_fit_identical_points_degenerate():
    pts = [(np.array([2.0, -1.0]), 0)] * 5 + [(np.array([0.0, 0.0]), 1)] * 3
    model = gda.fit(pts)
    i = model.class_index(0)
    np.testing.assert_allclose(model.covariances[i], 0.0, atol=1e-15)
    assert math.isfinite(gda.log_density(model, [2.0, -1.0], 0))


def test_fit_rejects_small_class():
    with pytest.raises(ValueError, match="lonely"):
        gda.fit([(np.zeros(2), "lonely"), (np.ones(2), "big"), (np.ones(2) * 2, "big")])


def test_fit_matches_two_pass_oracle():
    rng = np.random.Generator(np.random.PCG64(1))
    pts = [(rng.uniform(-2, 2, 3), int(rng.integers(0, 2))) for _ in range(100)]
    model = gda.fit(pts)
    for c in (0, 1):
        group = np.stack([v for v, label in pts if label == c])
        mu = group.mean(axis=0)
        centered = group - mu
        cov = centered.T @ centered / (len(group) - 1)
        i = model.class_index(c)
        np.testing.assert_allclose(model.means[i], mu, atol=1e-10)
        np.testing.assert_allclose(model.covariances[i], cov, atol=1e-10)
        assert model.priors[i] == pytest.approx(len(group) / 100)


def test_log_density_standard_normal_at_mode():
    # Unit covariance via explicit shrinkage around zero-covariance data.
    d = 3
    pts = [(np.zeros(d), 0)] * 4
    model = gda.fit(pts, shrinkage=1.0)
    expected = -(d / 2) * math.log(2 * math.pi)
    assert gda.log_density(model, np.zeros(d), 0) == pytest.approx(expected, abs=1e-12)


def test_log_density_decreases_along_ray():
    rng = np.random.Generator(np.random.PCG64(2))
    model, _ = random_fitted_model(rng)
    direction = rng.standard_normal(model.dim)
    base = model.means[0]
    vals = [gda.log_density(model, base + t * direction, model.class_ids[0])
            for t in np.linspace(0, 5, 12)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_log_density_matches_dense_inverse_oracle():
    rng = np.random.Generator(np.random.PCG64(3))
    for _ in range(20):
        dim = int(rng.integers(1, 9))
        model, _ = random_fitted_model(rng, n_classes=2, dim=dim, n_per_class=30)
        for c in model.class_ids:
            i = model.class_index(c)
            query = rng.uniform(-4, 4, dim)
            cov = model.covariances[i] + model.shrinkage[i] * np.eye(dim)
            diff = query - model.means[i]
            expected = (math.log(model.priors[i])
                        - 0.5 * (dim * math.log(2 * math.pi)
                                 + math.log(np.linalg.det(cov))
                                 + diff @ np.linalg.inv(cov) @ diff))
            assert gda.log_density(model, query, c) == pytest.approx(expected, abs=1e-8)


def test_log_density_unknown_class():
    rng = np.random.Generator(np.random.PCG64(4))
    model, _ = random_fitted_model(rng)
    with pytest.raises(ValueError, match="unknown class"):
        gda.log_density(model, np.zeros(model.dim), "nope")


def test_screen_at_mode_and_far_away():
    rng = np.random.Generator(np.random.PCG64(5))
    model, _ = random_fitted_model(rng)
    assert gda.screen(model, model.means[0], 1e-12) is False
    far = model.means[0] + 100.0 * np.ones(model.dim)
    assert gda.screen(model, far, 1e-12) is True


def test_screen_equals_per_class_max_oracle():
    rng = np.random.Generator(np.random.PCG64(6))
    model, _ = random_fitted_model(rng)
    for _ in range(200):
        q = rng.uniform(-8, 8, model.dim)
        xi = float(rng.uniform(1e-8, 1e-1))
        oracle = max(math.exp(gda.log_density(model, q, c)) for c in model.class_ids) < xi
        assert gda.screen(model, q, xi) == oracle


@settings(max_examples=60)
@given(st.floats(1e-9, 1e-1), st.floats(1e-9, 1e-1), st.integers(0, 10_000))
def test_screen_monotone_in_threshold(xi1, xi2, salt):
    if xi1 > xi2:
        xi1, xi2 = xi2, xi1
    rng = np.random.Generator(np.random.PCG64(salt))
    model, _ = random_fitted_model(rng, n_classes=2, dim=2, n_per_class=10)
    q = rng.uniform(-6, 6, 2)
    if gda.screen(model, q, xi1):
        assert gda.screen(model, q, xi2)


def test_density_integrates_to_prior_on_grid():
    # Quadrature over a wide grid recovers the class prior within 2%.
    rng = np.random.Generator(np.random.PCG64(7))
    for dim in (1, 2):
        model, _ = random_fitted_model(rng, n_classes=2, dim=dim, n_per_class=80)
        for c in model.class_ids:
            i = model.class_index(c)
            span = 10.0 * math.sqrt(float(np.max(model.covariances[i] + model.shrinkage[i])))
            axes = [np.linspace(model.means[i][j] - span, model.means[i][j] + span, 401)
                    for j in range(dim)]
            step = np.prod([a[1] - a[0] for a in axes])
            grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
            total = float(np.sum(np.exp(gda.log_densities(model, grid)[:, i]))) * step
            assert total == pytest.approx(model.priors[i], rel=0.02)


def test_fit_is_order_invariant():
    rng = np.random.Generator(np.random.PCG64(8))
    pts = [(rng.uniform(-2, 2, 3), int(rng.integers(0, 3))) for _ in range(60)]
    model_a = gda.fit(pts)
    perm = rng.permutation(len(pts))
    model_b = gda.fit([pts[i] for i in perm])
    queries = rng.uniform(-3, 3, (20, 3))
    for c in model_a.class_ids:
        for q in queries:
            assert gda.log_density(model_a, q, c) == pytest.approx(
                gda.log_density(model_b, q, c), abs=1e-12)


def test_threshold_from_quantile_screens_expected_fraction():
    rng = np.random.Generator(np.random.PCG64(9))
    model, samples = random_fitted_model(rng, n_classes=2, dim=3, n_per_class=500)
    vecs = np.stack([v for v, _ in samples])
    xi = gda.threshold_from_quantile(model, vecs, quantile=0.05)
    frac = float(np.mean(gda.screen_batch(model, vecs, xi)))
    assert frac == pytest.approx(0.05, abs=0.01)
