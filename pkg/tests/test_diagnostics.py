from fractions import Fraction as F

import numpy as np
import pytest

from mrlt.diagnostics import (
    AmplificationPoly,
    RunMetrics,
    ZeroDenominatorError,
    amplification_polynomial,
    compression_timeseries,
    cost_mu,
    gain_lambda,
    interface_error_terms,
    l1_error,
    numeric_interface_update,
    self_convergence_order,
)
from mrlt.models import get_problem
from mrlt.stepping import run_mr, run_uniform
from mrlt.time_schemes import SchemeKind
from mrlt.tree_mesh import uniform_tree


class TestNorms:
    def test_identical(self):
        a = np.random.default_rng(0).random(16)
        assert l1_error(a, a, 4, 1)[0] == 0

    def test_single_cell(self):
        a = np.zeros(4)
        b = a.copy()
        b[2] = 0.4
        assert l1_error(a, b, 2, 1)[0] == pytest.approx(0.1)

    def test_homogeneous(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((2, 3, 8, 8))
        assert np.allclose(l1_error(-3 * a, -3 * b, 3, 2), 3 * l1_error(a, b, 3, 2))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_error(np.zeros(4), np.zeros(8))


class TestOrder:
    @pytest.mark.parametrize("ratio, p", [(8.0, 3.0), (4.0, 2.0)])
    def test_manufactured(self, ratio, p):
        e = np.array([1.0, -2.0, 0.5])
        assert self_convergence_order(ratio * e + e, e, 0 * e) == pytest.approx(p)

    def test_affine_invariance(self):
        rng = np.random.default_rng(2)
        a, b, c = rng.random((3, 20))
        p = self_convergence_order(a, b, c)
        assert self_convergence_order(2.5 * a - 1, 2.5 * b - 1, 2.5 * c - 1) == pytest.approx(p)

    def test_zero_denominator(self):
        with pytest.raises(ZeroDenominatorError):
            self_convergence_order(np.ones(3), np.zeros(3), np.zeros(3))


class TestCost:
    def test_mu(self):
        assert cost_mu(1e-2, 30, 60) == pytest.approx(5e-3)

    def test_self_gain(self):
        assert gain_lambda(0.3, 0.3) == 1.0

    def test_burgers_table_gain(self):
        mu_mr = cost_mu(1.2890e-2, 14.7, 100.0)
        mu_lt = cost_mu(1.0740e-2, 6.7, 100.0)
        assert gain_lambda(mu_mr, mu_lt) == pytest.approx(2.63, abs=0.01)

    def test_gain_time_scale_invariant(self):
        a = gain_lambda(cost_mu(0.1, 3, 9), cost_mu(0.2, 1, 9))
        b = gain_lambda(cost_mu(0.1, 30, 90), cost_mu(0.2, 10, 90))
        assert a == pytest.approx(b)

    def test_zero_division(self):
        with pytest.raises(ZeroDivisionError):
            cost_mu(1, 1, 0)
        with pytest.raises(ZeroDivisionError):
            gain_lambda(1, 0)

    def test_metrics_nonnegative(self):
        with pytest.raises(ValueError):
            RunMetrics("fv-rk2", 4, e_l1={"q": -1.0})


class TestCompression:
    def test_uniform_run(self):
        res = run_uniform(get_problem("burgers1d"), 2, 5, 0.5, 0.05)
        assert compression_timeseries(res)["mean"] == 100.0

    def test_constant_field_floor(self):
        m = get_problem("burgers1d")
        tree = uniform_tree(1, 6, 1, m.bounds, m.boundary)
        for slot in tree.data:
            for arr in tree.data[slot]:
                arr[:] = 0.5
        res = run_mr(m, SchemeKind.MR_RK2, tree, 0.5, 0.05, 0.01)
        stats = compression_timeseries(res)
        assert stats["final"] == pytest.approx(100.0 / 64)


class TestAmplification:
    def test_uniform_rk3(self):
        assert amplification_polynomial(SchemeKind.FV_RK3) == [1, 1, F(1, 2), F(1, 6)]

    @pytest.mark.parametrize("kind", list(SchemeKind))
    def test_uniform_truncated_exponential(self, kind):
        coeffs = amplification_polynomial(kind).coeffs
        expected = [F(1), F(1), F(1, 2), F(1, 6)][: kind.order + 1]
        assert list(coeffs) == expected

    def test_fine_side(self):
        assert amplification_polynomial("mrlt-nerk3", "fine-side") == [1, 1, F(1, 2), F(1, 12), F(1, 24)]

    def test_coarse_side(self):
        assert amplification_polynomial("mrlt-nerk3", "coarse-side") == [1, 1, F(1, 2), F(1, 8), F(1, 144), F(1, 576)]

    def test_nerk2_sides(self):
        assert amplification_polynomial("mrlt-nerk2", "fine-side") == [1, 1, F(1, 2)]
        assert amplification_polynomial("mrlt-nerk2", "coarse-side") == [1, 1, F(1, 2), F(1, 8)]

    def test_error_terms(self):
        eps = interface_error_terms()
        assert eps["eps1"].is_zero()
        assert eps["eps2"] == [0, 0, F(-1, 4)]
        assert eps["eps3"] == [0, 0, F(1, 8), F(-1, 16)]
        assert eps["eps4"] == [0, 0, F(1, 8), F(-1, 96), F(-1, 384)]

    @pytest.mark.parametrize("side", ["fine-side", "coarse-side", "uniform"])
    @pytest.mark.parametrize("kind", ["mrlt-nerk2", "mrlt-nerk3"])
    def test_float_replay_agrees(self, kind, side):
        z = -0.1
        assert numeric_interface_update(kind, side, z) == pytest.approx(amplification_polynomial(kind, side)(z), abs=1e-12)

    def test_global_scheme_has_no_interface(self):
        with pytest.raises(ValueError):
            amplification_polynomial("mr-rk2", "fine-side")

    def test_poly_value(self):
        p = AmplificationPoly((F(1), F(2)))
        assert p(0.5) == 2.0
