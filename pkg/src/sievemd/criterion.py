"""Minimum-distance criterion, weighting, and the penalized GD optimizer.

The sample criterion is Q_n(alpha) = (1/n) sum_t mhat(X_t, alpha)^2 / Sigma_t,
where mhat projects the residual vector onto the instrument sieve and
Sigma_t is the conditional-variance weighting (identity for the pilot step,
a known constant, or a sieve estimate from squared pilot residuals).
Optimization is full-batch vanilla gradient descent, optionally with the
elementwise gradient truncation step lr * min(|g|, clip) * sign(g).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import InstrumentProjector
from .data import LagFrame
from .models import ResidualModel
from .sieves import PenaltyConfig, SieveFunction, penalty

#: documented optimizer slack used by the QLR sign contracts
EPSILON_OPT = 1e-6

#: default lower bound for estimated conditional variances
WEIGHT_FLOOR = 1e-4


class OptimizationError(RuntimeError):
    """Raised when the loss or gradient stops being finite."""


@dataclass
class WeightFunction:
    """Per-observation weighting Sigma_t with a positivity floor."""

    kind: str  # identity | known_constant | sieve_estimated
    values: np.ndarray
    floor: float = WEIGHT_FLOOR
    n_floored: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.floor <= 0:
            raise ValueError("weight floor must be positive")
        if np.any(self.values < self.floor):
            raise ValueError("weight values below floor")

    @classmethod
    def identity(cls, n: int) -> "WeightFunction":
        return cls(kind="identity", values=np.ones(n), floor=WEIGHT_FLOOR)

    @classmethod
    def known_constant(cls, c: float, n: int) -> "WeightFunction":
        if c <= 0:
            raise ValueError("known weight must be positive")
        return cls(kind="known_constant", values=np.full(n, float(c)), floor=min(WEIGHT_FLOOR, c))

    @classmethod
    def estimated(cls, raw: np.ndarray, floor: float = WEIGHT_FLOOR) -> "WeightFunction":
        raw = np.asarray(raw, dtype=np.float64)
        n_floored = int(np.sum(raw < floor))
        return cls(kind="sieve_estimated", values=np.maximum(raw, floor), floor=floor,
                   n_floored=n_floored)


@dataclass
class OptimizerConfig:
    """Full-batch gradient descent settings."""

    learning_rate: float
    epochs: int
    gradient_clip: float | None = None
    seed: int = 0
    tolerance: float | None = None  # early stop on absolute loss change

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.gradient_clip is not None and self.gradient_clip <= 0:
            raise ValueError("gradient_clip must be positive")


@dataclass
class EstimationResult:
    """A fitted sieve with its criterion value and optimizer diagnostics."""

    h_hat: SieveFunction
    q_n: float
    loss_path: np.ndarray
    weight: WeightFunction | None
    grad_norm: float
    epochs_run: int


def mhat(model: ResidualModel, h: SieveFunction, proj: InstrumentProjector,
         frame: LagFrame) -> np.ndarray:
    """Projected residuals mhat(X_t, alpha) = (P rho)_t on the exact path."""
    return proj.project(model.rho(frame, h))


def qn(model, h, proj, frame, w: WeightFunction) -> float:
    """Criterion value (1/n) sum mhat_t^2 / Sigma_t on the exact path."""
    if np.any(w.values < w.floor):
        raise ValueError("weight values below floor: degenerate Sigma fit")
    m = mhat(model, h, proj, frame)
    return float(np.mean(m * m / w.values))


def estimate_sigma(model, h_pilot, proj, frame, floor: float = WEIGHT_FLOOR) -> WeightFunction:
    """Conditional-variance weights: squared pilot residuals projected onto
    the instrument sieve, floored at `floor`."""
    rho = model.rho(frame, h_pilot)
    return WeightFunction.estimated(proj.project(rho * rho), floor=floor)


def weights_for_model(model: ResidualModel, n: int) -> WeightFunction:
    """The optimal-weighting policy the model declares (constant models only)."""
    if model.weight_kind == "known_constant":
        return WeightFunction.known_constant(model.known_weight, n)
    return WeightFunction.identity(n)


def make_md_loss(model, h, proj, frame, w: WeightFunction,
                 penalty_cfg: PenaltyConfig | None = None):
    """Differentiable objective theta -> (Q_n + lambda_n * P_en, gradient).

    Uses the model's optimization-path residuals (smoothed for NPQIV).  The
    gradient follows from symmetry of the projector: with u = P(mhat/Sigma),
    dQ_n/dtheta = (2/n) * u' drho/dtheta.
    """
    n = frame.n
    inv_sigma = 1.0 / w.values
    lam = penalty_cfg.lambda_n if penalty_cfg is not None else 0.0

    def loss(theta):
        h.set_params(theta)
        rho = model.rho_optim(frame, h)
        m = proj.project(rho)
        value = float(np.mean(m * m * inv_sigma))
        u = proj.project(m * inv_sigma) * (2.0 / n)
        grad = model.rho_param_vjp(frame, h, u)
        if lam > 0.0:
            pval, pgrad = penalty(h, penalty_cfg, frame.W)
            value += lam * pval
            grad = grad + lam * pgrad
        return value, grad

    return loss


def gd_optimize(loss, h0: SieveFunction, cfg: OptimizerConfig) -> EstimationResult:
    """Minimize a differentiable objective over the sieve parameters.

    Runs `epochs` full-batch steps from h0's current parameters, stopping
    early when the loss change drops below `tolerance`.  With gradient_clip
    set, each coordinate's step is lr * min(|g|, clip) * sign(g).
    """
    h = h0.clone()
    theta = h.get_params()
    lr, clip = cfg.learning_rate, cfg.gradient_clip
    loss_path = []
    prev = None
    for k in range(cfg.epochs):
        value, grad = loss(theta)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise OptimizationError(
                f"non-finite loss or gradient at epoch {k}: value={value}"
            )
        loss_path.append(value)
        if prev is not None and cfg.tolerance is not None and abs(prev - value) <= cfg.tolerance:
            break
        prev = value
        if clip is not None:
            theta = theta - lr * np.minimum(np.abs(grad), clip) * np.sign(grad)
        else:
            theta = theta - lr * grad
    value, grad = loss(theta)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise OptimizationError(f"non-finite loss or gradient at exit: value={value}")
    h.set_params(theta)
    return EstimationResult(
        h_hat=h,
        q_n=value,
        loss_path=np.asarray(loss_path),
        weight=None,
        grad_norm=float(np.max(np.abs(grad))),
        epochs_run=len(loss_path),
    )


@dataclass
class TwoStepResult:
    """Pilot (identity-weighted) and final (optimally weighted) fits."""

    final: EstimationResult
    pilot: EstimationResult | None
    weights: WeightFunction


def two_step_estimate(model, frame, h0, proj, cfg: OptimizerConfig, *,
                      penalty_cfg: PenaltyConfig | None = None,
                      floor: float = WEIGHT_FLOOR) -> TwoStepResult:
    """Identity-weighted pilot fit, then the optimally weighted refit.

    Models with a known constant optimal weight skip the pilot: constant
    weighting is proportional to identity weighting, so one fit suffices.
    Otherwise the conditional variance is estimated from the pilot and the
    second step warm-starts at the pilot parameters.
    """
    n = frame.n
    if model.weight_kind == "known_constant":
        w = WeightFunction.known_constant(model.known_weight, n)
        final = _fit(model, frame, h0, proj, cfg, w, penalty_cfg)
        return TwoStepResult(final=final, pilot=None, weights=w)
    w1 = WeightFunction.identity(n)
    pilot = _fit(model, frame, h0, proj, cfg, w1, penalty_cfg)
    w2 = estimate_sigma(model, pilot.h_hat, proj, frame, floor=floor)
    final = _fit(model, frame, pilot.h_hat, proj, cfg, w2, penalty_cfg)
    return TwoStepResult(final=final, pilot=pilot, weights=w2)


def _fit(model, frame, h0, proj, cfg, w, penalty_cfg) -> EstimationResult:
    loss = make_md_loss(model, h0.clone(), proj, frame, w, penalty_cfg)
    res = gd_optimize(loss, h0, cfg)
    res.weight = w
    res.q_n = qn(model, res.h_hat, proj, frame, w)  # exact-path criterion
    return res


#: default quadratic-penalty homotopy: mu0=10, six stages growing tenfold
DEFAULT_MU_SCHEDULE = tuple(10.0 * 10.0**j for j in range(6))


@dataclass
class RestrictedResult:
    """Constrained fit with the achieved functional gap."""

    est: EstimationResult
    gap: float
    phi_value: float
    mu_used: float
    stages_run: int
    multiplier: float = 0.0


def restricted_estimate(model, frame, proj, functional, phi0: float,
                        cfg: OptimizerConfig, w: WeightFunction, h0, *,
                        mu_schedule=DEFAULT_MU_SCHEDULE,
                        gap_tol: float | None = None,
                        penalty_cfg: PenaltyConfig | None = None,
                        raise_on_gap: bool = True) -> RestrictedResult:
    """Minimize the weighted criterion subject to functional(alpha) = phi0.

    Augmented-Lagrangian homotopy: each stage minimizes Q_n + lambda_n P_en
    + lam (phi - phi0) + mu (phi - phi0)^2 by warm-started gradient descent,
    then updates the multiplier lam += 2 mu (phi - phi0) and grows mu along
    the schedule.  The multiplier updates drive the constraint gap to zero
    without needing mu -> infinity (a pure quadratic penalty stalls: for
    large mu the stable step size collapses and the directions orthogonal to
    the constraint freeze at their small-mu values).  The stage learning
    rate is capped at a quarter of the stability limit of the stiff
    constraint direction.
    """
    if gap_tol is None:
        gap_tol = 1e-4 * (1.0 + abs(phi0))
    h_work = h0.clone()  # shared by the criterion and the functional term
    base = make_md_loss(model, h_work, proj, frame, w, penalty_cfg)
    current = h0.clone()
    est = None
    mu_used = mu_schedule[0]
    lam = 0.0
    stages = 0
    for mu in mu_schedule:
        def stage_loss(theta, mu=mu, lam=lam):
            value, grad = base(theta)  # leaves h_work at theta
            pv = functional.value(h_work, frame)
            pg = functional.param_gradient(h_work, frame)
            diff = pv - phi0
            value += lam * diff + mu * diff * diff
            grad = grad + (lam + 2.0 * mu * diff) * pg
            return value, grad

        g_phi = functional.param_gradient(current, frame)
        stiff = mu * float(g_phi @ g_phi)
        stage_lr = min(cfg.learning_rate, 0.25 / stiff) if stiff > 0 else cfg.learning_rate
        stage_cfg = OptimizerConfig(
            learning_rate=stage_lr,
            epochs=cfg.epochs,
            gradient_clip=cfg.gradient_clip,
            seed=cfg.seed,
            tolerance=cfg.tolerance,
        )
        est = gd_optimize(stage_loss, current, stage_cfg)
        current = est.h_hat
        mu_used = mu
        stages += 1
        diff = functional.value(current, frame) - phi0
        lam += 2.0 * mu * diff
        if abs(diff) < gap_tol:
            break
    phi_val = functional.value(current, frame)
    gap = abs(phi_val - phi0)
    if gap >= gap_tol and raise_on_gap:
        raise OptimizationError(
            f"restricted fit missed the constraint: |phi - phi0| = {gap:.3e} "
            f"(tolerance {gap_tol:.3e}, final mu {mu_used:g})"
        )
    est.weight = w
    est.q_n = qn(model, current, proj, frame, w)
    return RestrictedResult(est=est, gap=gap, phi_value=phi_val, mu_used=mu_used,
                            stages_run=stages, multiplier=lam)
