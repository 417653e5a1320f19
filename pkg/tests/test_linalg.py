"""Dense tensor algebra: fixtures from hand contractions plus algebraic
properties on random inputs."""

import numpy as np
import pytest

from dualvqa.linalg import (
    ShapeError,
    elementwise_product,
    full_bilinear,
    matmul,
    matvec,
    mode_product,
    outer_product,
)


def brute_force_mode_product(t, u, axis):
    d = list(t.shape)
    d[axis - 1] = u.shape[1]
    out = np.zeros(d)
    for i in range(d[0]):
        for j in range(d[1]):
            for k in range(d[2]):
                idx = [i, j, k]
                for c in range(u.shape[0]):
                    src = list(idx)
                    src[axis - 1] = c
                    out[i, j, k] += t[tuple(src)] * u[c, idx[axis - 1]]
    return out


class TestModeProduct:
    def test_identity_leaves_tensor_unchanged(self):
        rng = np.random.default_rng(0)
        t = rng.standard_normal((2, 2, 2))
        for axis in (1, 2, 3):
            np.testing.assert_array_equal(mode_product(t, np.eye(2), axis), t)

    def test_all_ones_collapse(self):
        t = np.ones((2, 2, 2))
        u = np.ones((2, 1))
        out = mode_product(t, u, 1)
        assert out.shape == (1, 2, 2)
        np.testing.assert_allclose(out, 2.0)

    def test_weighted_collapse_hand_value(self):
        # t[d1, :, :] = d1 + 1 (values 1 and 2); column (2, 3) -> 1*2 + 2*3 = 8
        t = np.ones((2, 2, 2))
        t[1] = 2.0
        u = np.array([[2.0], [3.0]])
        np.testing.assert_allclose(mode_product(t, u, 1), 8.0)

    @pytest.mark.parametrize("axis", [1, 2, 3])
    def test_matches_brute_force(self, axis):
        rng = np.random.default_rng(axis)
        t = rng.standard_normal((3, 4, 2))
        u = rng.standard_normal((t.shape[axis - 1], 3))
        np.testing.assert_allclose(
            mode_product(t, u, axis), brute_force_mode_product(t, u, axis), atol=1e-12
        )

    def test_linearity_in_matrix(self):
        rng = np.random.default_rng(1)
        t = rng.standard_normal((3, 3, 3))
        u, v = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        a, b = 0.7, -1.3
        np.testing.assert_allclose(
            mode_product(t, a * u + b * v, 2),
            a * mode_product(t, u, 2) + b * mode_product(t, v, 2),
            atol=1e-12,
        )

    def test_linearity_in_tensor(self):
        rng = np.random.default_rng(11)
        s, t = rng.standard_normal((3, 3, 3)), rng.standard_normal((3, 3, 3))
        u = rng.standard_normal((3, 2))
        a, b = 2.5, -0.4
        np.testing.assert_allclose(
            mode_product(a * s + b * t, u, 3),
            a * mode_product(s, u, 3) + b * mode_product(t, u, 3),
            atol=1e-12,
        )

    def test_distinct_axes_commute(self):
        rng = np.random.default_rng(2)
        t = rng.standard_normal((3, 3, 3))
        u, v = rng.standard_normal((3, 2)), rng.standard_normal((3, 4))
        ab = mode_product(mode_product(t, u, 1), v, 2)
        ba = mode_product(mode_product(t, v, 2), u, 1)
        np.testing.assert_allclose(ab, ba, atol=1e-12)

    def test_shape_error_names_axis(self):
        with pytest.raises(ShapeError, match="axis 2"):
            mode_product(np.zeros((2, 3, 2)), np.zeros((4, 2)), 2)
        with pytest.raises(ShapeError, match="axis"):
            mode_product(np.zeros((2, 2, 2)), np.zeros((2, 2)), 4)


class TestOuterProduct:
    def test_unit_vectors(self):
        np.testing.assert_array_equal(
            outer_product(np.array([1.0, 0.0]), np.array([0.0, 1.0])),
            [[0.0, 1.0], [0.0, 0.0]],
        )

    def test_column_case(self):
        np.testing.assert_array_equal(
            outer_product(np.array([2.0, 3.0]), np.array([5.0])), [[10.0], [15.0]]
        )

    def test_rank_one_by_minors(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            m = outer_product(rng.standard_normal(4), rng.standard_normal(4))
            for i in range(3):
                for j in range(3):
                    minor = m[i, j] * m[i + 1, j + 1] - m[i, j + 1] * m[i + 1, j]
                    assert abs(minor) < 1e-12


class TestFullBilinear:
    def test_zero_tensor(self):
        out = full_bilinear(np.zeros((2, 3, 4)), np.ones(2), np.ones(3))
        np.testing.assert_array_equal(out, np.zeros(4))

    def test_scalar_case(self):
        out = full_bilinear(np.full((1, 1, 1), 2.0), np.array([3.0]), np.array([5.0]))
        np.testing.assert_allclose(out, [30.0])

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(4)
        t = rng.standard_normal((2, 3, 2))
        q, v = rng.standard_normal(2), rng.standard_normal(3)
        expected = np.zeros(2)
        for i in range(2):
            for j in range(3):
                for k in range(2):
                    expected[k] += t[i, j, k] * q[i] * v[j]
        np.testing.assert_allclose(full_bilinear(t, q, v), expected, atol=1e-12)

    def test_bilinear_scaling(self):
        rng = np.random.default_rng(5)
        t = rng.standard_normal((3, 3, 3))
        q, v = rng.standard_normal(3), rng.standard_normal(3)
        np.testing.assert_array_equal(
            full_bilinear(t, 2.0 * q, v), 2.0 * full_bilinear(t, q, v)
        )

    def test_shape_errors(self):
        with pytest.raises(ShapeError, match="axis 1"):
            full_bilinear(np.zeros((2, 2, 2)), np.zeros(3), np.zeros(2))
        with pytest.raises(ShapeError, match="axis 2"):
            full_bilinear(np.zeros((2, 2, 2)), np.zeros(2), np.zeros(3))


class TestPlumbing:
    def test_identity_matvec(self):
        x = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(matvec(np.eye(3), x), x)

    def test_elementwise_fixture(self):
        np.testing.assert_array_equal(
            elementwise_product(np.array([1.0, 2.0, 3.0]), np.array([4.0, 5.0, 6.0])),
            [4.0, 10.0, 18.0],
        )

    def test_matmul_associativity(self):
        rng = np.random.default_rng(6)
        a, b, c = (rng.standard_normal((3, 3)) for _ in range(3))
        np.testing.assert_allclose(
            matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-12
        )

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            matvec(np.zeros((2, 3)), np.zeros(2))
        with pytest.raises(ShapeError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            elementwise_product(np.zeros(2), np.zeros(3))
