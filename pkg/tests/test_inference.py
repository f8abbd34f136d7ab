import numpy as np
import pytest
from numpy.testing import assert_allclose

from sievemd.basis import BasisSpec, build_design, fit_projector
from sievemd.criterion import (
    OptimizerConfig,
    WeightFunction,
    gd_optimize,
    make_md_loss,
    qn,
)
from sievemd.data import LagFrame
from sievemd.functionals import (
    CorrectedFunctional,
    CorrectionWeights,
    ExpectationFunctional,
)
from sievemd.inference import (
    CHI2_CRIT_95,
    LongRunVarianceConfig,
    auto_bandwidth,
    chi2_p,
    invert_ci,
    newey_west,
    qlr_known,
    qlr_unknown,
)
from sievemd.models import NpivModel
from sievemd.sieves import LinearSieve


class TestNeweyWest:
    def test_bandwidth_zero_is_sample_variance(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(200)
        expected = float(np.mean((x - x.mean()) ** 2))
        assert newey_west(x, 0) == pytest.approx(expected, abs=1e-12)

    def test_constant_series_returns_zero(self):
        assert newey_west(np.full(50, 3.7), 5) == 0.0

    def test_ma1_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(1)
        e = rng.standard_normal(21)
        x = e[1:] + 0.5 * e[:-1]  # MA(1), n = 20
        B = 2
        xc = x - x.mean()
        n = len(x)
        expected = float(xc @ xc) / n
        for j in range(1, B + 1):
            gamma_j = float(np.sum(xc[j:] * xc[:-j])) / n
            expected += 2.0 * (1.0 - j / (B + 1.0)) * gamma_j
        assert newey_west(x, B) == pytest.approx(expected, abs=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal(100)
        assert abs(newey_west(x, 4) - newey_west(x + 1000.0, 4)) < 1e-10

    def test_auto_bandwidth_rule(self):
        assert auto_bandwidth(100) == 4
        assert auto_bandwidth(5000) == 9
        cfg = LongRunVarianceConfig()
        assert cfg.lags(5000) == 9
        fixed = LongRunVarianceConfig(bandwidth=3, rule="fixed")
        assert fixed.lags(5000) == 3

    def test_validation(self):
        with pytest.raises(ValueError):
            newey_west([1.0], 0)
        with pytest.raises(ValueError):
            LongRunVarianceConfig(rule="fixed")


class TestChi2:
    def test_at_zero(self):
        assert chi2_p(0.0) == 1.0

    def test_at_critical_value(self):
        # independent check: 3.841 is the 95% quantile of chi-square(1)
        assert chi2_p(3.841) == pytest.approx(0.05, abs=5e-4)

    def test_limits_and_monotonicity(self):
        assert chi2_p(1e6) < 1e-100
        grid = np.linspace(0, 20, 100)
        ps = [chi2_p(s) for s in grid]
        assert np.all(np.diff(ps) <= 0)
        assert all(0.0 <= p <= 1.0 for p in ps)

    def test_negative_clamped(self):
        assert chi2_p(-3.0) == 1.0

    def test_matches_numeric_integration(self):
        from scipy.integrate import quad

        density = lambda x: np.exp(-x / 2) / np.sqrt(2 * np.pi * x)
        for s in (0.5, 2.0, 3.841):
            p_num, _ = quad(density, s, np.inf)
            assert chi2_p(s) == pytest.approx(p_num, rel=1e-8)


def linear_qlr_problem(seed=0, n=60):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    w = 0.7 * x + 0.4 * rng.standard_normal(n)
    y = 0.8 * w + 0.3 * rng.standard_normal(n)
    frame = LagFrame(X=x[:, None], W=w[:, None], Y=y, r=0, x_names=["x"], w_names=["w"])
    _, Psi = build_design(frame.X, [BasisSpec(5)])
    proj = fit_projector(Psi, ridge=0.0)
    design, B = build_design(frame.W, [BasisSpec(4)])
    h0 = LinearSieve(design)
    return frame, proj, h0, B


def fit_unrestricted(frame, proj, h0, w, cfg):
    model = NpivModel()
    loss = make_md_loss(model, h0.clone(), proj, frame, w)
    fit = gd_optimize(loss, h0, cfg)
    fit.q_n = qn(model, fit.h_hat, proj, frame, w)
    return model, fit


class TestQlrKnown:
    def test_null_at_optimum_statistic_near_zero(self):
        frame, proj, h0, _ = linear_qlr_problem()
        w = WeightFunction.identity(frame.n)
        cfg = OptimizerConfig(learning_rate=0.3, epochs=30000)
        model, fit = fit_unrestricted(frame, proj, h0, w, cfg)
        fn = ExpectationFunctional(a=1.0)
        phi_opt = fn.value(fit.h_hat, frame)
        res = qlr_known(model, frame, proj, w, fn, phi_opt, cfg, fitted=fit)
        assert res.statistic <= frame.n * 1e-6
        assert res.statistic >= -frame.n * 1e-6
        assert res.p_value > 0.9
        assert not res.slack_flag

    def test_matches_closed_form_kkt_statistic(self):
        frame, proj, h0, B = linear_qlr_problem(seed=3)
        w = WeightFunction.identity(frame.n)
        cfg = OptimizerConfig(learning_rate=0.3, epochs=30000)
        model, fit = fit_unrestricted(frame, proj, h0, w, cfg)
        fn = ExpectationFunctional(a=1.0)
        phi0 = fn.value(fit.h_hat, frame) + 0.25
        res = qlr_known(model, frame, proj, w, fn, phi0, cfg, fitted=fit,
                        mu_schedule=(10.0,) * 8, gap_tol=1e-8)
        # closed form: constrained vs unconstrained quadratic minima
        PB = proj.project(B)
        Py = proj.project(frame.Y)
        n = frame.n
        A = PB.T @ PB / n
        b = PB.T @ Py / n
        c_u = np.linalg.solve(A, b)
        g = B.mean(axis=0)
        K = np.block([[2 * A, g[:, None]], [g[None, :], np.zeros((1, 1))]])
        sol = np.linalg.solve(K, np.concatenate([2 * b, [phi0]]))
        c_r = sol[:-1]
        yty = Py @ Py / n

        def q_of(c):
            return yty - 2 * b @ c + c @ A @ c

        s_oracle = n * (q_of(c_r) - q_of(c_u))
        assert res.statistic == pytest.approx(s_oracle, rel=1e-3)
        assert res.p_value == pytest.approx(chi2_p(s_oracle), rel=1e-3)

    def test_statistic_convex_in_phi0_on_linear_problem(self):
        frame, proj, h0, _ = linear_qlr_problem(seed=4)
        w = WeightFunction.identity(frame.n)
        cfg = OptimizerConfig(learning_rate=0.3, epochs=20000)
        model, fit = fit_unrestricted(frame, proj, h0, w, cfg)
        fn = ExpectationFunctional(a=1.0)
        center = fn.value(fit.h_hat, frame)
        grid = center + np.linspace(-0.4, 0.4, 5)
        stats = [
            qlr_known(model, frame, proj, w, fn, p0, cfg, fitted=fit,
                      mu_schedule=(10.0,) * 6, gap_tol=1e-6).statistic
            for p0 in grid
        ]
        second_diffs = np.diff(stats, 2)
        assert np.all(second_diffs > -1e-3)


class TestQlrUnknown:
    def test_null_at_estimate(self):
        frame, proj, h0, _ = linear_qlr_problem(seed=5)
        w = WeightFunction.identity(frame.n)
        cfg = OptimizerConfig(learning_rate=0.3, epochs=30000)
        model, fit = fit_unrestricted(frame, proj, h0, w, cfg)
        perobs = ExpectationFunctional(a=1.0)
        gamma = CorrectionWeights.disabled(frame.n)
        corrected = CorrectedFunctional(perobs, gamma, model)
        gamma_hat_val = corrected.value(fit.h_hat, frame)
        res = qlr_unknown(model, frame, proj, w, corrected, gamma_hat_val, cfg,
                          fitted=fit, sigma2=0.5)
        assert abs(res.statistic) <= frame.n * 1e-6
        assert res.p_value > 0.9

    def test_degenerate_rho_reduces_to_penalty_term(self):
        # y generated exactly on the sieve: Q_n stays ~0 and the statistic is
        # essentially the normalized squared distance phi0 - gamma_hat
        frame, proj, h0, B = linear_qlr_problem(seed=6)
        coef = np.linalg.lstsq(B, frame.Y, rcond=None)[0]
        y_exact = B @ coef
        frame2 = LagFrame(X=frame.X, W=frame.W, Y=y_exact, r=0,
                          x_names=frame.x_names, w_names=frame.w_names)
        w = WeightFunction.identity(frame2.n)
        cfg = OptimizerConfig(learning_rate=0.3, epochs=30000)
        model, fit = fit_unrestricted(frame2, proj, h0, w, cfg)
        perobs = ExpectationFunctional(a=1.0)
        corrected = CorrectedFunctional(perobs, CorrectionWeights.disabled(frame2.n), model)
        center = corrected.value(fit.h_hat, frame2)
        sigma2 = 0.3
        phi0 = center + 0.05
        res = qlr_unknown(model, frame2, proj, w, corrected, phi0, cfg,
                          fitted=fit, sigma2=sigma2)
        # direct evaluation oracle: minimize q(c) + (mean(Bc) - phi0)^2/s2
        PB = proj.project(B)
        Py = proj.project(frame2.Y)
        n = frame2.n
        A2 = 2 * PB.T @ PB / n
        g = B.mean(axis=0)
        K = A2 + 2 * np.outer(g, g) / sigma2
        rhs = 2 * PB.T @ Py / n + 2 * g * phi0 / sigma2
        c_star = np.linalg.solve(K, rhs)
        q_star = float(np.mean((Py - PB @ c_star) ** 2))
        l_star = q_star + (g @ c_star - phi0) ** 2 / sigma2
        s_oracle = n * (l_star - fit.q_n)
        assert res.statistic == pytest.approx(s_oracle, rel=1e-3, abs=1e-6)

    def test_sigma2_floor_error(self):
        frame, proj, h0, _ = linear_qlr_problem(seed=7)
        w = WeightFunction.identity(frame.n)
        cfg = OptimizerConfig(learning_rate=0.3, epochs=100)
        model, fit = fit_unrestricted(frame, proj, h0, w, cfg)
        corrected = CorrectedFunctional(ExpectationFunctional(),
                                        CorrectionWeights.disabled(frame.n), model)
        with pytest.raises(ValueError, match="below floor"):
            qlr_unknown(model, frame, proj, w, corrected, 0.0, cfg,
                        fitted=fit, sigma2=0.0)


class TestInvertCi:
    def test_quadratic_toy_closed_form(self):
        n, v, phi_hat = 400, 2.0, 1.3

        def stat(phi0):
            return n * (phi0 - phi_hat) ** 2 / v

        ci = invert_ci(stat, center=phi_hat, initial_step=0.01)
        half = np.sqrt(CHI2_CRIT_95 * v / n)
        assert ci.lo == pytest.approx(phi_hat - half, abs=1e-3)
        assert ci.hi == pytest.approx(phi_hat + half, abs=1e-3)
        assert ci.level == 0.95
        assert ci.covers(phi_hat)
        assert ci.monotone

    def test_level_uses_chi2_quantile(self):
        from scipy.stats import chi2

        n, v, phi_hat = 400, 2.0, 0.0

        def stat(phi0):
            return n * phi0**2 / v

        ci = invert_ci(stat, center=0.0, level=0.90, initial_step=0.01)
        crit = chi2.ppf(0.90, 1)
        assert ci.critical_value == pytest.approx(crit)
        assert ci.hi == pytest.approx(np.sqrt(crit * v / n), abs=1e-3)

    def test_flat_statistic_raises(self):
        with pytest.raises(ValueError, match="no crossing"):
            invert_ci(lambda p: 0.0, center=0.0, initial_step=0.1, max_doublings=8)

    def test_center_already_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            invert_ci(lambda p: 100.0, center=0.0)

    def test_nonmonotone_flagged(self):
        def bumpy(phi0):
            # dips between the first and second expansion probes
            return 3.2 * np.cos(12 * phi0) ** 2 + 60 * phi0**2

        ci = invert_ci(bumpy, center=0.0, initial_step=0.05)
        assert not ci.monotone


class TestResultContract:
    def test_p_value_matches_clamped_statistic(self):
        frame, proj, h0, _ = linear_qlr_problem(seed=8)
        w = WeightFunction.identity(frame.n)
        cfg = OptimizerConfig(learning_rate=0.3, epochs=5000)
        model, fit = fit_unrestricted(frame, proj, h0, w, cfg)
        fn = ExpectationFunctional(a=1.0)
        res = qlr_known(model, frame, proj, w, fn, fn.value(fit.h_hat, frame),
                        cfg, fitted=fit)
        assert res.p_value == chi2_p(max(res.statistic, 0.0))
        d = res.to_dict()
        assert set(d) >= {"statistic", "p_value", "phi0", "q_unrestricted",
                          "q_restricted", "constraint_gap", "slack_flag"}
