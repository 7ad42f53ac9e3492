import numpy as np
import pytest

from penmig.terms import (
    SplineBasis,
    TermError,
    TermSpec,
    bspline_design,
    difference_penalty,
    factor_design,
    mrf_precision,
    null_dim,
    path_adjacency,
    pspline_term,
    random_intercept_design,
    row_kron,
    tensor_penalty,
    tensor_spline,
    varying_coefficient,
)


class TestBsplineDesign:
    def test_partition_of_unity(self):
        x = np.linspace(-2, 2, 100)
        B = bspline_design(x, 20, 3)
        assert B.shape == (100, 20)
        np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)

    def test_point_at_knot_has_local_support(self):
        x = np.linspace(0, 1, 50)
        basis = SplineBasis.from_data(x, 10, 3)
        knot = basis.knots[6]
        row = basis(np.array([knot]))
        assert np.count_nonzero(np.abs(row) > 1e-14) <= 4

    def test_degenerate_input(self):
        with pytest.raises(TermError, match="degenerate"):
            bspline_design(np.full(5, 1.3), 20, 3)

    def test_new_points_extrapolate_with_training_knots(self):
        x = np.linspace(0, 1, 40)
        basis = SplineBasis.from_data(x, 8)
        np.testing.assert_allclose(basis(x), bspline_design(x, 8))
        np.testing.assert_allclose(basis(np.array([0.25, 0.5])).sum(axis=1), 1.0)

    @pytest.mark.parametrize("degree", [0, 1, 2, 3])
    def test_degrees(self, degree):
        x = np.random.default_rng(0).uniform(size=200)
        B = bspline_design(x, 12, degree)
        np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)


class TestDifferencePenalty:
    def test_first_order_small(self):
        np.testing.assert_array_equal(
            difference_penalty(1, 3), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]]
        )

    def test_rank_and_null_space(self):
        P = difference_penalty(2, 20)
        assert np.linalg.matrix_rank(P) == 18
        assert null_dim(P) == 2
        t = np.arange(1, 21, dtype=float)
        np.testing.assert_allclose(P @ np.ones(20), 0, atol=1e-12)
        np.testing.assert_allclose(P @ t, 0, atol=1e-12)

    @pytest.mark.parametrize("k,D", [(1, 5), (2, 10), (3, 12), (4, 9)])
    def test_annihilates_low_degree_polynomials_only(self, k, D):
        P = difference_penalty(k, D)
        t = np.linspace(-1, 1, D)
        V = np.vander(t, k + 1, increasing=True)
        np.testing.assert_allclose(P @ V[:, :k], 0, atol=1e-10)
        assert np.linalg.norm(P @ V[:, k]) > 1e-6
        assert null_dim(P) == k

    def test_invalid_order(self):
        with pytest.raises(TermError):
            difference_penalty(5, 5)
        with pytest.raises(TermError):
            difference_penalty(0, 5)


class TestMrf:
    def test_path_equals_rw1(self):
        np.testing.assert_array_equal(
            mrf_precision(path_adjacency(10)), difference_penalty(1, 10)
        )

    def test_components_give_null_dim(self):
        A = np.zeros((4, 4))
        A[0, 1] = A[1, 0] = A[2, 3] = A[3, 2] = 1
        P = mrf_precision(A)
        assert null_dim(P) == 2
        np.testing.assert_allclose(P.sum(axis=1), 0)

    def test_complete_graph(self):
        A = np.ones((3, 3)) - np.eye(3)
        np.testing.assert_array_equal(mrf_precision(A), [[2, -1, -1], [-1, 2, -1], [-1, -1, 2]])

    @pytest.mark.parametrize(
        "A",
        [
            [[0, 1], [0, 0]],  # asymmetric
            [[1, 1], [1, 0]],  # diagonal
            [[0, 0], [0, 0]],  # no edges
        ],
    )
    def test_invalid(self, A):
        with pytest.raises(TermError):
            mrf_precision(np.array(A, dtype=float))


class TestRandomIntercept:
    def test_indicator_coding(self):
        raw = random_intercept_design(["a", "a", "b"])
        np.testing.assert_array_equal(raw.Z, [[1, 0], [1, 0], [0, 1]])
        np.testing.assert_array_equal(raw.P, np.eye(2))
        assert raw.null_dim == 0

    def test_balanced(self):
        g = np.repeat(np.arange(4), 5)
        raw = random_intercept_design(g)
        np.testing.assert_array_equal(raw.Z.T @ raw.Z, 5 * np.eye(4))

    def test_single_group(self):
        with pytest.raises(TermError):
            random_intercept_design(["a"] * 4)


class TestVaryingCoefficient:
    def test_identity_and_zero(self):
        base = pspline_term(np.linspace(0, 1, 30), 8)
        np.testing.assert_array_equal(varying_coefficient(np.ones(30), base).Z, base.Z)
        np.testing.assert_array_equal(varying_coefficient(np.zeros(30), base).Z, 0.0)
        np.testing.assert_array_equal(varying_coefficient(np.ones(30), base).P, base.P)

    def test_interval_modifier_with_mrf_base(self):
        # PEM time-varying effect: indicator of each interval times covariate
        from penmig.terms import RawTerm

        interval = np.array([0, 1, 2, 0, 1, 3])
        Z = np.eye(4)[interval]
        base = RawTerm(Z=Z, P=mrf_precision(path_adjacency(4)), null_dim=1)
        u = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
        vc = varying_coefficient(u, base)
        np.testing.assert_array_equal(vc.Z[3:], 0.0)
        np.testing.assert_array_equal(vc.Z[:3], Z[:3])

    def test_length_mismatch(self):
        base = pspline_term(np.linspace(0, 1, 30), 8)
        with pytest.raises(TermError):
            varying_coefficient(np.ones(10), base)


class TestTensorSpline:
    def test_dimensions_and_null_space(self):
        rng = np.random.default_rng(1)
        raw = tensor_spline(rng.uniform(size=200), rng.uniform(size=200), 8, 8)
        assert raw.Z.shape == (200, 64)
        ev = np.linalg.eigvalsh(raw.P)
        assert np.sum(ev < 1e-10 * ev.max()) == 4
        assert raw.null_dim == 4
        np.testing.assert_allclose(raw.Z.sum(axis=1), 1.0, atol=1e-12)

    def test_constant_margin(self):
        with pytest.raises(TermError, match="degenerate"):
            tensor_spline(np.full(50, 2.0), np.linspace(0, 1, 50))

    def test_kronecker_sum(self):
        P = tensor_penalty(4, 5, 1)
        expected = np.kron(difference_penalty(1, 4), np.eye(5)) + np.kron(
            np.eye(4), difference_penalty(1, 5)
        )
        np.testing.assert_array_equal(P, expected)

    def test_row_kron(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        B = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]])
        np.testing.assert_array_equal(row_kron(A, B)[0], np.kron(A[0], B[0]))
        np.testing.assert_array_equal(row_kron(A, B)[1], np.kron(A[1], B[1]))


class TestTermSpec:
    def test_defaults(self):
        t = TermSpec("f", "pspline", "x")
        assert (t.num_basis, t.spline_degree, t.penalty_order) == (20, 3, 2)
        assert t.covariates == ["x"]
        assert TermSpec("g", "tensor_spline", ["a", "b"]).num_basis == 8
        assert TermSpec("h", "mrf", "r").penalty_order == 1

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(label="f", kind="spline", covariates=["x"]),
            dict(label="f", kind="pspline", covariates=["x"], num_basis=4),
            dict(label="f", kind="pspline", covariates=["x"], penalty_order=20),
            dict(label="", kind="linear", covariates=["x"]),
            dict(label="f", kind="linear", covariates=[]),
            dict(label="f", kind="tensor_spline", covariates=["x"]),
            dict(label="f", kind="varying_coefficient", covariates=["x"]),
            dict(label="f", kind="mrf", covariates=["r"], adjacency=[[0, 1], [0, 0]]),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(TermError):
            TermSpec(**kwargs)

    def test_equality_with_adjacency(self):
        A = path_adjacency(3)
        assert TermSpec("r", "mrf", "r", adjacency=A) == TermSpec("r", "mrf", "r", adjacency=A.copy())
        assert TermSpec("r", "mrf", "r", adjacency=A) != TermSpec("r", "mrf", "r")


def test_factor_design_treatment_coding():
    X = factor_design(np.array(["b", "a", "c", "a"]))
    np.testing.assert_array_equal(X, [[1, 0], [0, 0], [0, 1], [0, 0]])
