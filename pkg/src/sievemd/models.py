"""Residual models: NPIV, NPQIV, and the Bellman / off-policy-evaluation model.

Each model maps a lag frame and a candidate sieve function to the residual
vector rho_t and provides the chain-rule hook (a vector-Jacobian product)
that pulls residual sensitivities back to the sieve parameters.  NPQIV keeps
two paths: the exact indicator residual for reported criterion values, and a
logistic-smoothed surrogate for gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LagFrame
from .sieves import SieveFunction


@dataclass
class SmoothingConfig:
    """Temperature of the logistic surrogate for indicator residuals."""

    tau: float

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("smoothing temperature must be positive")


def default_tau(y: np.ndarray) -> SmoothingConfig:
    """Reference-rule temperature 0.1 * sd(y) * n^(-1/5)."""
    y = np.asarray(y, dtype=np.float64)
    return SmoothingConfig(0.1 * float(np.std(y)) * len(y) ** (-0.2))


class ResidualModel:
    """Interface shared by all residual maps."""

    weight_kind: str = "sieve_estimated"  # identity | known_constant | sieve_estimated
    known_weight: float | None = None
    exogenous: bool = False

    def rho(self, frame: LagFrame, h: SieveFunction) -> np.ndarray:
        """Exact residuals, used for every reported criterion value."""
        raise NotImplementedError

    def rho_optim(self, frame: LagFrame, h: SieveFunction) -> np.ndarray:
        """Residuals on the optimization path (smoothed where needed)."""
        return self.rho(frame, h)

    def rho_param_vjp(self, frame: LagFrame, h: SieveFunction, u: np.ndarray) -> np.ndarray:
        """Gradient of sum_t u_t * rho_optim_t with respect to sieve parameters."""
        raise NotImplementedError


class NpivModel(ResidualModel):
    """Nonparametric IV regression residual rho = y_{t+1} - h(W_t)."""

    weight_kind = "sieve_estimated"

    def rho(self, frame, h):
        return frame.Y - h.values(frame.W)

    def rho_param_vjp(self, frame, h, u):
        return -h.param_vjp(frame.W, u)


class NpqivModel(ResidualModel):
    """Quantile IV residual rho = 1{y <= h(W)} - varpi.

    The conditional variance is known: Sigma(X) = varpi * (1 - varpi).
    Gradients use the logistic surrogate logistic((h - y)/tau) - varpi;
    reported values always use the exact indicator.
    """

    def __init__(self, varpi: float, smoothing: SmoothingConfig):
        if not 0.0 < varpi < 1.0:
            raise ValueError("varpi must be in (0, 1)")
        self.varpi = varpi
        self.smoothing = smoothing
        self.weight_kind = "known_constant"
        self.known_weight = varpi * (1.0 - varpi)

    def rho(self, frame, h):
        return (frame.Y <= h.values(frame.W)).astype(np.float64) - self.varpi

    def rho_optim(self, frame, h):
        z = (h.values(frame.W) - frame.Y) / self.smoothing.tau
        return _logistic(z) - self.varpi

    def rho_param_vjp(self, frame, h, u):
        z = (h.values(frame.W) - frame.Y) / self.smoothing.tau
        s = _logistic(z)
        dens = s * (1.0 - s) / self.smoothing.tau
        return h.param_vjp(frame.W, u * dens)


def _logistic(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class TabularEncoding:
    """Maps discrete (state, action) pairs to sieve input rows.

    style 'onehot' concatenates one-hot state and action indicators
    (input_dim = n_states + n_actions); style 'cell' uses the single flat
    cell index s * n_actions + a.
    """

    n_states: int
    n_actions: int
    style: str = "onehot"

    def __post_init__(self):
        if self.style not in ("onehot", "cell"):
            raise ValueError(f"unknown encoding style {self.style!r}")

    @property
    def input_dim(self) -> int:
        return self.n_states + self.n_actions if self.style == "onehot" else 1

    def inputs(self, s: np.ndarray, a) -> np.ndarray:
        s = np.asarray(s, dtype=np.int64)
        a = np.broadcast_to(np.asarray(a, dtype=np.int64), s.shape)
        if self.style == "cell":
            return (s * self.n_actions + a).astype(np.float64)[:, None]
        out = np.zeros((len(s), self.n_states + self.n_actions))
        out[np.arange(len(s)), s] = 1.0
        out[np.arange(len(s)), self.n_states + a] = 1.0
        return out


@dataclass
class RlModel:
    """Off-policy-evaluation configuration: target policy and discounting.

    `policy` is a finite (n_states, n_actions) table of action probabilities
    (rows must sum to one) or, for continuous action spaces, a callable
    sampler rng, states -> actions used with n_mc Monte Carlo draws per
    observation under a fixed seed (common random numbers keep the
    optimization objective stable across epochs).
    """

    gamma: float
    policy: np.ndarray | object
    encoding: TabularEncoding | None = None
    n_mc: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("discount factor must be in [0, 1)")
        if isinstance(self.policy, np.ndarray) or isinstance(self.policy, list):
            self.policy = np.asarray(self.policy, dtype=np.float64)
            rowsum = self.policy.sum(axis=1)
            if np.any(np.abs(rowsum - 1.0) > 1e-8):
                raise ValueError("policy rows must sum to 1 within 1e-8")

    @property
    def finite_actions(self) -> bool:
        return isinstance(self.policy, np.ndarray)


def transition_frame(trajectories, rl: RlModel) -> LagFrame:
    """Assemble (S_t, A_t, R_t, S_{t+1}) tuples into a lag frame.

    `trajectories` is a list of (states, actions, rewards) triples with
    len(states) = len(actions) + 1; transitions never cross trajectory
    boundaries.  The frame has W = encoded (S_t, A_t) inputs, instruments
    X = the flat cell index of (S_t, A_t), Y = R_t, and the next states in
    extra.  Note the long-run variance machinery treats the concatenation
    of trajectories as a single series, ignoring dependence breaks at the
    seams.
    """
    enc = rl.encoding
    s_list, a_list, r_list, s_next_list = [], [], [], []
    for states, actions, rewards in trajectories:
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        rewards = np.asarray(rewards, dtype=np.float64)
        if len(states) != len(actions) + 1 or len(actions) != len(rewards):
            raise ValueError("trajectory needs len(states) = len(actions)+1 = len(rewards)+1")
        s_list.append(states[:-1])
        a_list.append(actions)
        r_list.append(rewards)
        s_next_list.append(states[1:])
    s = np.concatenate(s_list)
    a = np.concatenate(a_list)
    r = np.concatenate(r_list)
    s_next = np.concatenate(s_next_list)
    W = enc.inputs(s, a)
    cell = (s * enc.n_actions + a).astype(np.float64)
    frame = LagFrame(
        X=cell[:, None],
        W=W,
        Y=r,
        r=0,
        x_names=["cell"],
        w_names=[f"w{j}" for j in range(W.shape[1])],
        extra={"next_state": s_next},
    )
    return frame


class BellmanModel(ResidualModel):
    """Bellman-equation residual for off-policy evaluation.

    rho_t = R_t - h(S_t, A_t) + gamma * E_{a ~ pi(.|S_{t+1})} h(S_{t+1}, a),
    a conditional moment restriction with instruments X_t = (S_t, A_t).
    The action integral is exact for finite action sets and Monte Carlo
    (fixed seed) otherwise.
    """

    weight_kind = "sieve_estimated"

    def __init__(self, rl: RlModel):
        self.rl = rl
        self._terms_cache: dict[int, tuple] = {}

    def _next_terms(self, frame):
        """Pairs (probability weights, encoded inputs) for the next-state
        integral; memoized per frame so evaluation and VJP share arrays."""
        hit = self._terms_cache.get(id(frame))
        if hit is not None and hit[0] is frame:
            return hit[1]
        s_next = frame.extra["next_state"]
        enc = self.rl.encoding
        if self.rl.finite_actions:
            probs = self.rl.policy[s_next]  # (n, A)
            terms = [(probs[:, x], enc.inputs(s_next, x)) for x in range(probs.shape[1])]
        else:
            rng = np.random.default_rng(self.rl.seed)
            draws = np.stack([self.rl.policy(rng, s_next) for _ in range(self.rl.n_mc)])
            wgt = np.full(len(s_next), 1.0 / self.rl.n_mc)
            terms = [(wgt, enc.inputs(s_next, draws[m])) for m in range(self.rl.n_mc)]
        if len(self._terms_cache) > 4:
            self._terms_cache.clear()
        self._terms_cache[id(frame)] = (frame, terms)
        return terms

    def continuation(self, frame, h):
        """gamma-discounted policy average of h at the next state."""
        cont = np.zeros(frame.n)
        for wgt, inputs in self._next_terms(frame):
            cont += wgt * h.values(inputs)
        return self.rl.gamma * cont

    def rho(self, frame, h):
        return frame.Y - h.values(frame.W) + self.continuation(frame, h)

    def rho_param_vjp(self, frame, h, u):
        g = -h.param_vjp(frame.W, u)
        for wgt, inputs in self._next_terms(frame):
            g += self.rl.gamma * h.param_vjp(inputs, u * wgt)
        return g
