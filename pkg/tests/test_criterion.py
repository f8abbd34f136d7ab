import numpy as np
import pytest
from numpy.testing import assert_allclose

from sievemd.basis import BasisSpec, build_design, fit_projector
from sievemd.criterion import (
    EstimationResult,
    OptimizationError,
    OptimizerConfig,
    WeightFunction,
    estimate_sigma,
    gd_optimize,
    make_md_loss,
    mhat,
    qn,
    restricted_estimate,
    two_step_estimate,
)
from sievemd.data import LagFrame
from sievemd.functionals import ExpectationFunctional
from sievemd.models import NpivModel, NpqivModel, SmoothingConfig
from sievemd.sieves import LinearSieve, MlpSieve


def linear_problem(seed=0, n=40, k_tilde=4, n_w_basis=4):
    """Small NPIV problem with a linear sieve, solvable in closed form."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    w = 0.8 * x + 0.3 * rng.standard_normal(n)
    y = np.sin(w) + 0.2 * rng.standard_normal(n)
    frame = LagFrame(X=x[:, None], W=w[:, None], Y=y, r=0, x_names=["x"], w_names=["w"])
    _, Psi = build_design(frame.X, [BasisSpec(k_tilde)])
    proj = fit_projector(Psi, ridge=0.0)
    design, B = build_design(frame.W, [BasisSpec(n_w_basis)])
    h = LinearSieve(design)
    return frame, proj, h, B


def gls_solution(frame, proj, B, weights):
    """Closed-form minimizer of mean((P(y - Bc))^2 / Sigma)."""
    PB = proj.project(B)
    Py = proj.project(frame.Y)
    D = 1.0 / weights.values
    A = PB.T @ (PB * D[:, None])
    b = PB.T @ (D * Py)
    return np.linalg.solve(A, b)


class TestWeightFunction:
    def test_identity(self):
        w = WeightFunction.identity(5)
        assert_allclose(w.values, 1.0)

    def test_floor_enforced(self):
        w = WeightFunction.estimated(np.array([0.5, -0.2, 2.0]), floor=1e-3)
        assert w.n_floored == 1
        assert w.values.min() == pytest.approx(1e-3)
        with pytest.raises(ValueError, match="below floor"):
            WeightFunction(kind="identity", values=np.array([0.0, 1.0]), floor=1e-4)

    def test_known_constant(self):
        w = WeightFunction.known_constant(0.25, 3)
        assert_allclose(w.values, 0.25)
        with pytest.raises(ValueError):
            WeightFunction.known_constant(-1.0, 3)


class TestOptimizerConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            OptimizerConfig(learning_rate=0.0, epochs=10)
        with pytest.raises(ValueError):
            OptimizerConfig(learning_rate=0.1, epochs=0)
        with pytest.raises(ValueError):
            OptimizerConfig(learning_rate=0.1, epochs=10, gradient_clip=0.0)


class TestMhatAndQn:
    def test_zero_residual_gives_zero(self):
        frame, proj, h, B = linear_problem()
        model = NpivModel()
        # make y exactly h(W): residual identically zero
        coef = np.linalg.lstsq(B, frame.Y, rcond=None)[0]
        h.set_params(coef)
        y_exact = B @ coef
        frame2 = LagFrame(X=frame.X, W=frame.W, Y=y_exact, r=0,
                          x_names=frame.x_names, w_names=frame.w_names)
        assert np.max(np.abs(mhat(model, h, proj, frame2))) < 1e-10
        assert qn(model, h, proj, frame2, WeightFunction.identity(frame.n)) < 1e-20

    def test_rho_in_span_projects_to_itself(self):
        frame, proj, h, _ = linear_problem()
        model = NpivModel()
        h.set_params(np.zeros(h.n_params))
        # replace Y by something in span(Psi): the intercept column
        frame2 = LagFrame(X=frame.X, W=frame.W, Y=np.ones(frame.n), r=0,
                          x_names=frame.x_names, w_names=frame.w_names)
        assert_allclose(mhat(model, h, proj, frame2), 1.0, atol=1e-10)

    def test_mhat_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(1)
        Psi = np.column_stack([np.ones(4), np.array([0.0, 1.0, 2.0, 3.0])])
        proj = fit_projector(Psi, ridge=0.0)
        frame = LagFrame(X=Psi[:, [1]], W=np.zeros((4, 1)), Y=rng.standard_normal(4),
                         r=0, x_names=["x"], w_names=["w"])
        h = MlpSieve(1, [2], rng=0)
        h.set_params(np.zeros(h.n_params))
        beta = np.linalg.solve(Psi.T @ Psi, Psi.T @ frame.Y)
        assert_allclose(mhat(NpivModel(), h, proj, frame), Psi @ beta, atol=1e-12)

    def test_npqiv_constant_weight_scales_criterion(self):
        frame, proj, h, _ = linear_problem()
        model = NpqivModel(0.5, SmoothingConfig(0.1))
        h.set_params(np.zeros(h.n_params))
        w_const = WeightFunction.known_constant(0.25, frame.n)
        w_one = WeightFunction.identity(frame.n)
        q_weighted = qn(model, h, proj, frame, w_const)
        q_plain = qn(model, h, proj, frame, w_one)
        assert q_weighted == pytest.approx(4.0 * q_plain, rel=1e-12)

    def test_qn_hand_example(self):
        # intercept-only design: projection = mean; hand arithmetic
        Psi = np.ones((4, 1))
        proj = fit_projector(Psi, ridge=0.0)
        y = np.array([1.0, 2.0, 3.0, 6.0])
        frame = LagFrame(X=Psi, W=np.zeros((4, 1)), Y=y, r=0, x_names=["c"], w_names=["w"])
        h = MlpSieve(1, [2], rng=0)
        h.set_params(np.zeros(h.n_params))
        # mhat = mean(y) = 3 at every t; Q_n = mean(9 / 2)
        w = WeightFunction(kind="known_constant", values=np.full(4, 2.0), floor=1e-4)
        assert qn(NpivModel(), h, proj, frame, w) == pytest.approx(4.5)


class TestEstimateSigma:
    def test_constant_squared_residuals_recovered_exactly(self):
        frame, proj, h, _ = linear_problem()
        model = NpivModel()
        h.set_params(np.zeros(h.n_params))
        c = 2.5
        frame2 = LagFrame(X=frame.X, W=frame.W, Y=np.full(frame.n, np.sqrt(c)), r=0,
                          x_names=frame.x_names, w_names=frame.w_names)
        w = estimate_sigma(model, h, proj, frame2)
        assert_allclose(w.values, c, atol=1e-10)
        assert w.n_floored == 0

    def test_homoskedastic_band(self):
        rng = np.random.default_rng(2)
        n = 5000
        x = rng.standard_normal(n)
        y = rng.standard_normal(n)  # pure unit-variance noise
        frame = LagFrame(X=x[:, None], W=x[:, None], Y=y, r=0, x_names=["x"], w_names=["w"])
        _, Psi = build_design(frame.X, [BasisSpec(5)])
        proj = fit_projector(Psi)
        h = MlpSieve(1, [3], rng=0)
        h.set_params(np.zeros(h.n_params))
        w = estimate_sigma(NpivModel(), h, proj, frame)
        inner = np.abs(x) < 2.0  # spline tails are noisy by construction
        assert np.all(w.values[inner] > 0.5) and np.all(w.values[inner] < 1.5)


class TestGdOptimize:
    def test_quadratic_contraction(self):
        def loss(theta):
            return float((theta[0] - 3.0) ** 2), np.array([2.0 * (theta[0] - 3.0)])

        h = MlpSieve(1, [1], rng=0)  # parameter carrier; only theta[0] matters
        h.set_params(np.zeros(h.n_params))

        def wrapped(theta):
            v, g = loss(theta)
            full = np.zeros_like(theta)
            full[0] = g[0]
            return v, full

        res = gd_optimize(wrapped, h, OptimizerConfig(learning_rate=0.1, epochs=200))
        assert res.h_hat.get_params()[0] == pytest.approx(3.0, abs=1e-6)
        assert res.epochs_run == 200
        assert len(res.loss_path) == 200

    def test_truncation_rule(self):
        # gradient coordinate 5 with clip 0.001: step is exactly lr * 0.001
        steps = []

        def loss(theta):
            steps.append(theta.copy())
            return 0.0, np.array([5.0, -5.0, 1e-5])

        h = MlpSieve(2, [1], rng=0)
        theta0 = np.zeros(h.n_params)[:3]

        class Carrier:
            def __init__(self):
                self._p = theta0.copy()

            def clone(self):
                c = Carrier()
                c._p = self._p.copy()
                return c

            def get_params(self):
                return self._p.copy()

            def set_params(self, t):
                self._p = np.asarray(t, dtype=float).copy()

        res = gd_optimize(loss, Carrier(), OptimizerConfig(
            learning_rate=0.1, epochs=1, gradient_clip=0.001))
        final = res.h_hat.get_params()
        assert final[0] == pytest.approx(-0.1 * 0.001)
        assert final[1] == pytest.approx(+0.1 * 0.001)
        assert final[2] == pytest.approx(-0.1 * 1e-5)  # below the clip: plain step

    def test_nonfinite_loss_aborts(self):
        def loss(theta):
            return np.inf, np.zeros_like(theta)

        h = MlpSieve(1, [1], rng=0)
        with pytest.raises(OptimizationError, match="non-finite"):
            gd_optimize(loss, h, OptimizerConfig(learning_rate=0.1, epochs=5))

    def test_early_stop_tolerance(self):
        def loss(theta):
            return 1.0, np.zeros_like(theta)  # flat

        h = MlpSieve(1, [1], rng=0)
        res = gd_optimize(loss, h, OptimizerConfig(learning_rate=0.1, epochs=100,
                                                   tolerance=1e-12))
        assert res.epochs_run == 2

    def test_gd_matches_gls_oracle(self):
        frame, proj, h, B = linear_problem(seed=3)
        model = NpivModel()
        w = WeightFunction.identity(frame.n)
        loss = make_md_loss(model, h.clone(), proj, frame, w)
        res = gd_optimize(loss, h, OptimizerConfig(learning_rate=0.4, epochs=60000,
                                                   tolerance=1e-16))
        oracle = gls_solution(frame, proj, B, w)
        assert np.max(np.abs(res.h_hat.get_params() - oracle)) < 1e-4

    def test_monotone_loss_path_below_critical_lr(self):
        frame, proj, h, B = linear_problem(seed=4)
        model = NpivModel()
        w = WeightFunction.identity(frame.n)
        # power iteration for the largest Hessian eigenvalue of the quadratic
        PB = proj.project(B)
        H = 2.0 / frame.n * PB.T @ PB
        lam_max = np.linalg.eigvalsh(H)[-1]
        loss = make_md_loss(model, h.clone(), proj, frame, w)
        res = gd_optimize(loss, h, OptimizerConfig(learning_rate=0.9 / lam_max, epochs=500))
        assert np.all(np.diff(res.loss_path) <= 1e-12)


class TestTwoStep:
    def test_known_constant_collapses_to_single_fit(self):
        frame, proj, h, _ = linear_problem(seed=5)
        model = NpqivModel(0.5, SmoothingConfig(0.1))
        cfg = OptimizerConfig(learning_rate=0.2, epochs=100)
        ts = two_step_estimate(model, frame, h, proj, cfg)
        assert ts.pilot is None
        assert ts.weights.kind == "known_constant"
        assert_allclose(ts.weights.values, 0.25)

    def test_estimated_weights_two_steps(self):
        frame, proj, h, _ = linear_problem(seed=6)
        model = NpivModel()
        cfg = OptimizerConfig(learning_rate=0.02, epochs=600)
        # small-sample sigma fits overshoot below zero in the tails; keep the
        # inverse weights bounded so the fixed learning rate stays stable
        ts = two_step_estimate(model, frame, h, proj, cfg, floor=0.05)
        assert ts.pilot is not None
        assert ts.weights.kind == "sieve_estimated"
        assert ts.final.q_n >= 0.0

    def test_matches_direct_gd_without_penalty(self):
        frame, proj, h, _ = linear_problem(seed=7)
        model = NpqivModel(0.5, SmoothingConfig(0.1))
        cfg = OptimizerConfig(learning_rate=0.2, epochs=150)
        ts = two_step_estimate(model, frame, h, proj, cfg)
        w = WeightFunction.known_constant(0.25, frame.n)
        loss = make_md_loss(model, h.clone(), proj, frame, w)
        direct = gd_optimize(loss, h, cfg)
        assert_allclose(ts.final.h_hat.get_params(), direct.h_hat.get_params(), atol=0)


class TestRestricted:
    def test_constraint_already_satisfied(self):
        frame, proj, h, B = linear_problem(seed=8)
        model = NpivModel()
        w = WeightFunction.identity(frame.n)
        cfg = OptimizerConfig(learning_rate=0.4, epochs=40000, tolerance=1e-16)
        loss = make_md_loss(model, h.clone(), proj, frame, w)
        fit = gd_optimize(loss, h, cfg)
        fn = ExpectationFunctional(a=1.0)
        phi_at_opt = fn.value(fit.h_hat, frame)
        res = restricted_estimate(model, frame, proj, fn, phi_at_opt, cfg, w, fit.h_hat)
        q_opt = qn(model, fit.h_hat, proj, frame, w)
        assert res.est.q_n <= q_opt + 1e-6
        assert res.gap < 1e-4 * (1 + abs(phi_at_opt))

    def test_matches_kkt_oracle(self):
        frame, proj, h, B = linear_problem(seed=9)
        model = NpivModel()
        w = WeightFunction.identity(frame.n)
        cfg = OptimizerConfig(learning_rate=0.4, epochs=30000)
        fn = ExpectationFunctional(a=1.0)
        # constrain the sample mean of h to phi0; multiplier rounds at
        # moderate mu make the KKT point exact (each stage runs its full
        # budget: a loss-change tolerance would stop the slow soft
        # directions at the floating-point plateau)
        phi0 = 0.3
        res = restricted_estimate(
            model, frame, proj, fn, phi0, cfg, w, h,
            mu_schedule=(10.0,) * 8,  # small mu keeps the step size usable
            gap_tol=1e-9,
        )
        # KKT: minimize (Py - PB c)'D(Py - PB c)/n s.t. g'c = phi0, g = mean basis row
        PB = proj.project(B)
        Py = proj.project(frame.Y)
        g = B.mean(axis=0)
        A = 2.0 / frame.n * PB.T @ PB
        b = 2.0 / frame.n * PB.T @ Py
        K = np.block([[A, g[:, None]], [g[None, :], np.zeros((1, 1))]])
        sol = np.linalg.solve(K, np.concatenate([b, [phi0]]))
        c_oracle = sol[:-1]
        assert np.max(np.abs(res.est.h_hat.get_params() - c_oracle)) < 1e-4

    def test_unreachable_constraint_raises(self):
        frame, proj, h, _ = linear_problem(seed=10)
        model = NpivModel()
        w = WeightFunction.identity(frame.n)
        cfg = OptimizerConfig(learning_rate=0.01, epochs=3)
        fn = ExpectationFunctional(a=1.0)
        with pytest.raises(OptimizationError, match="constraint"):
            restricted_estimate(model, frame, proj, fn, 1e6, cfg, w, h,
                                mu_schedule=(1e-9,))
