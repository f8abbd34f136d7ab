"""Functionals of the fitted function and their efficient estimation.

Two per-observation functionals cover the estimands here: weighted average
partial derivatives (the per-observation contribution is a directional input
gradient) and expectation functionals E l(h(W_t)) with l linear.  Under
endogeneity the plug-in sample mean is corrected by the projection
coefficient Gamma_t of the contribution onto the residual, giving the
forward-filtered series W_t whose mean is the corrected estimate and whose
long-run variance feeds the QLR machinery.  The RL value functional (the
policy-averaged Q at a given state) is a known functional evaluated exactly
for finite action sets or by fixed-seed Monte Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import InstrumentProjector
from .criterion import WeightFunction
from .data import LagFrame
from .models import ResidualModel, RlModel
from .sieves import SieveFunction


class PerObsFunctional:
    """A functional of the form phi(h) = mean_t of a per-observation term."""

    def contributions(self, h: SieveFunction, frame: LagFrame) -> np.ndarray:
        raise NotImplementedError

    def contributions_param_vjp(self, h, frame, v: np.ndarray) -> np.ndarray:
        """Gradient of sum_t v_t * contribution_t with respect to parameters."""
        raise NotImplementedError

    def value(self, h, frame) -> float:
        return float(np.mean(self.contributions(h, frame)))

    def param_gradient(self, h, frame) -> np.ndarray:
        n = frame.n
        return self.contributions_param_vjp(h, frame, np.full(n, 1.0 / n))


class AvgPartialDerivative(PerObsFunctional):
    """phi(h) = mean_t omega(W_t) * dh/dw_j (W_t) for a coordinate j.

    `coordinate` may be a W-column index or name; `omega` an optional
    per-observation weight function of W (default 1).
    """

    def __init__(self, coordinate=0, omega=None):
        self.coordinate = coordinate
        self.omega = omega

    def _col(self, frame) -> int:
        if isinstance(self.coordinate, str):
            return frame.w_col(self.coordinate)
        return int(self.coordinate)

    def _weights(self, frame) -> np.ndarray:
        if self.omega is None:
            return np.ones(frame.n)
        return np.asarray(self.omega(frame.W), dtype=np.float64)

    def _constant_derivative(self, h, frame):
        getter = getattr(h, "constant_derivative", None)
        return getter(self._col(frame)) if getter is not None else None

    def contributions(self, h, frame):
        j = self._col(frame)
        const = self._constant_derivative(h, frame)
        if const is not None:  # derivative is the scaled bypass coefficient
            idx, scale = const
            return self._weights(frame) * (scale * h.get_params()[idx])
        return self._weights(frame) * h.batch_input_gradient(frame.W)[:, j]

    def contributions_param_vjp(self, h, frame, v):
        j = self._col(frame)
        const = self._constant_derivative(h, frame)
        if const is not None:
            idx, scale = const
            out = np.zeros(h.n_params)
            out[idx] = scale * float(np.asarray(v) @ self._weights(frame))
            return out
        direction = np.zeros(frame.W.shape[1])
        direction[j] = 1.0
        return h.input_grad_param_vjp(frame.W, np.asarray(v) * self._weights(frame), direction)


class ExpectationFunctional(PerObsFunctional):
    """phi(h) = mean_t l(h(W_t)) with the linear map l(x) = a*x + b."""

    def __init__(self, a: float = 1.0, b: float = 0.0):
        self.a = float(a)
        self.b = float(b)

    def l(self, x):
        return self.a * x + self.b

    def contributions(self, h, frame):
        return self.l(h.values(frame.W))

    def contributions_param_vjp(self, h, frame, v):
        return self.a * h.param_vjp(frame.W, np.asarray(v, dtype=np.float64))


def avg_partial_derivative(h, frame, omega_or_coordinate=0) -> float:
    """Sample average of the weighted partial derivative of h."""
    if isinstance(omega_or_coordinate, (int, str)):
        return AvgPartialDerivative(coordinate=omega_or_coordinate).value(h, frame)
    return AvgPartialDerivative(coordinate=0, omega=omega_or_coordinate).value(h, frame)


@dataclass
class CorrectionWeights:
    """Per-observation efficiency-correction coefficients Gamma_t."""

    gamma: np.ndarray

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if not np.all(np.isfinite(self.gamma)):
            raise ValueError("non-finite correction weights")

    @classmethod
    def disabled(cls, n: int) -> "CorrectionWeights":
        return cls(np.zeros(n))


def gamma_hat(h_hat, model: ResidualModel, proj: InstrumentProjector, frame,
              w: WeightFunction, perobs: PerObsFunctional) -> CorrectionWeights:
    """Estimate Gamma_t: project contribution*residual onto the instrument
    sieve and divide by the variance weights.

    For models flagged exogenous the population coefficient vanishes and the
    correction is disabled.
    """
    if model.exogenous:
        return CorrectionWeights.disabled(frame.n)
    rho = model.rho(frame, h_hat)
    contrib = perobs.contributions(h_hat, frame)
    return CorrectionWeights(proj.project(contrib * rho) / w.values)


def phi_hat(h, frame, model, gamma: CorrectionWeights, perobs) -> float:
    """Corrected functional estimate: mean of contribution_t - Gamma_t rho_t."""
    return float(np.mean(forward_filtered_residuals(h, frame, model, gamma, perobs)))


def forward_filtered_residuals(h, frame, model, gamma: CorrectionWeights,
                               perobs) -> np.ndarray:
    """Influence series W_t = contribution_t - Gamma_t * rho_t; its mean is
    the corrected estimate and it feeds the long-run variance estimator."""
    return perobs.contributions(h, frame) - gamma.gamma * model.rho(frame, h)


class CorrectedFunctional:
    """The estimated functional phi(alpha) with frozen correction weights.

    value/param_gradient implement mean(contribution_t - Gamma_t rho_t) and
    its parameter gradient; the `optim` path uses the model's smoothed
    residuals so the restricted optimization stays differentiable.
    """

    def __init__(self, perobs: PerObsFunctional, gamma: CorrectionWeights,
                 model: ResidualModel):
        self.perobs = perobs
        self.gamma = gamma
        self.model = model

    def value(self, h, frame, optim: bool = False) -> float:
        rho = self.model.rho_optim(frame, h) if optim else self.model.rho(frame, h)
        return float(np.mean(self.perobs.contributions(h, frame) - self.gamma.gamma * rho))

    def param_gradient(self, h, frame) -> np.ndarray:
        n = frame.n
        ones = np.full(n, 1.0 / n)
        g = self.perobs.contributions_param_vjp(h, frame, ones)
        return g - self.model.rho_param_vjp(frame, h, self.gamma.gamma / n)


class ValueFunctional:
    """State-specific policy value phi_s(Q) = E_{a ~ pi(.|s)} Q(s, a).

    Exact for finite action sets; Monte Carlo with a fixed seed otherwise.
    A known functional: the lag frame is ignored.
    """

    def __init__(self, state: int, rl: RlModel):
        self.state = int(state)
        self.rl = rl
        self._draws = None

    def _terms(self):
        rl = self.rl
        if rl.finite_actions:
            probs = rl.policy[self.state]
            if abs(probs.sum() - 1.0) > 1e-8:
                raise ValueError("policy weights at the state do not sum to 1")
            s = np.full(len(probs), self.state)
            return probs, rl.encoding.inputs(s, np.arange(len(probs)))
        if self._draws is None:
            rng = np.random.default_rng(rl.seed)
            s = np.full(rl.n_mc, self.state)
            self._draws = np.asarray(rl.policy(rng, s))
        s = np.full(rl.n_mc, self.state)
        return np.full(rl.n_mc, 1.0 / rl.n_mc), self.rl.encoding.inputs(s, self._draws)

    def value(self, h, frame=None) -> float:
        probs, inputs = self._terms()
        return float(probs @ h.values(inputs))

    def param_gradient(self, h, frame=None) -> np.ndarray:
        probs, inputs = self._terms()
        return h.param_vjp(inputs, probs)


def value_functional(Q: SieveFunction, state: int, rl: RlModel) -> float:
    """Policy value of Q at a state: exact sum over finite actions, or the
    fixed-seed Monte Carlo average over sampled actions."""
    return ValueFunctional(state, rl).value(Q)
