"""Unit tests for advantage estimation."""

import numpy as np
import pytest

from src.core.errors import ConfigError
from src.numerics.gae import GaeInputs, gae_matrix, gae_recursive, discount_matrix


def test_gae_hand_example():
    inputs = GaeInputs([1.0, 1.0], [0.0, 0.0, 0.0], gamma=0.9, lam=0.95)
    np.testing.assert_allclose(gae_recursive(inputs), [1.855, 1.0])
    np.testing.assert_allclose(gae_matrix(inputs), [1.855, 1.0])


def test_lambda_zero_gives_td_residuals():
    rng = np.random.default_rng(0)
    inputs = GaeInputs(rng.normal(size=8), rng.normal(size=9), gamma=0.99, lam=0.0)
    np.testing.assert_allclose(gae_recursive(inputs), inputs.deltas())


def test_linear_in_rewards():
    rng = np.random.default_rng(1)
    r1, r2, values = rng.normal(size=16), rng.normal(size=16), np.zeros(17)
    a1 = gae_recursive(GaeInputs(r1, values, 0.99, 0.95))
    a2 = gae_recursive(GaeInputs(r2, values, 0.99, 0.95))
    both = gae_recursive(GaeInputs(2 * r1 + r2, values, 0.99, 0.95))
    np.testing.assert_allclose(both, 2 * a1 + a2, atol=1e-12)


@pytest.mark.parametrize("horizon", [0, 1, 7, 257])
def test_matrix_matches_recursion(horizon):
    rng = np.random.default_rng(horizon)
    inputs = GaeInputs(
        rng.uniform(-10, 10, horizon), rng.uniform(-10, 10, horizon + 1), gamma=0.99, lam=0.95
    )
    np.testing.assert_allclose(gae_matrix(inputs), gae_recursive(inputs), rtol=1e-10, atol=1e-9)


def test_discount_matrix_shape():
    actual = discount_matrix(3, 0.5)
    expected = np.array([[1.0, 0.5, 0.25], [0.0, 1.0, 0.5], [0.0, 0.0, 1.0]])
    np.testing.assert_array_equal(actual, expected)


def test_shape_and_range_errors():
    with pytest.raises(ConfigError) as exc:
        GaeInputs([1.0, 1.0], [0.0, 0.0])
    assert exc.value.code == "gae.shape"
    with pytest.raises(ConfigError) as exc:
        GaeInputs([1.0], [0.0, 0.0], gamma=1.5)
    assert exc.value.code == "gae.range"
    with pytest.raises(ConfigError):
        GaeInputs(np.zeros((2, 2)), np.zeros(3))
