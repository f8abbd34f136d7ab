"""General nonlinear sieve families for the unknown function.

Three families share one interface: a fully-connected ReLU network with an
optional linear bypass (for partially linear specifications), a Gaussian
radial-basis network, and a linear B-spline sieve.  Every family supports
batched evaluation, exact reverse-mode parameter gradients (as
vector-Jacobian products), input gradients, and the mixed
input-gradient/parameter VJP used by derivative functionals.

The ReLU subgradient at exactly zero is fixed to zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .basis import InstrumentDesign

SQRT2PI = np.sqrt(2.0 * np.pi)


class SieveFunction:
    """Common interface of all sieve families."""

    input_dim: int

    # -- parameter vector ------------------------------------------------
    @property
    def n_params(self) -> int:
        raise NotImplementedError

    def get_params(self) -> np.ndarray:
        raise NotImplementedError

    def set_params(self, theta: np.ndarray) -> None:
        raise NotImplementedError

    # -- evaluation and gradients ----------------------------------------
    def values(self, W: np.ndarray) -> np.ndarray:
        """Evaluate on a batch, W of shape (n, input_dim) -> (n,)."""
        raise NotImplementedError

    def param_vjp(self, W: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Gradient of sum_t v_t * h(W_t) with respect to all parameters."""
        raise NotImplementedError

    def batch_input_gradient(self, W: np.ndarray) -> np.ndarray:
        """Gradients of h with respect to the inputs, shape (n, input_dim)."""
        raise NotImplementedError

    def input_grad_param_vjp(self, W: np.ndarray, v: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Gradient of sum_t v_t * c'grad_w h(W_t) with respect to parameters."""
        raise NotImplementedError

    # -- single-point conveniences ---------------------------------------
    def _check_point(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64).ravel()
        if w.size != self.input_dim:
            raise ValueError(f"dimension mismatch: expected {self.input_dim}, got {w.size}")
        return w.reshape(1, -1)

    def eval(self, w) -> float:
        return float(self.values(self._check_point(w))[0])

    def param_gradient(self, w) -> np.ndarray:
        return self.param_vjp(self._check_point(w), np.ones(1))

    def input_gradient(self, w) -> np.ndarray:
        return self.batch_input_gradient(self._check_point(w))[0]

    # -- forward-state cache ----------------------------------------------
    # Evaluation and its VJP are usually called back to back on the same
    # input batch; caching the forward state by array identity halves the
    # work.  Parameter updates invalidate the cache.
    _CACHE_MAX = 16

    def _cache_init(self):
        self._cache = {}

    def _cache_clear(self):
        self._cache = {}

    def _cached(self, W, compute):
        key = id(W)
        hit = self._cache.get(key)
        if hit is not None and hit[0] is W:
            return hit[1]
        state = compute()
        if len(self._cache) >= self._CACHE_MAX:
            self._cache.clear()
        self._cache[key] = (W, state)
        return state

    def clone(self) -> "SieveFunction":
        import copy

        cache = self.__dict__.pop("_cache", None)
        ws = self.__dict__.pop("_ws", None)
        out = copy.deepcopy(self)
        if cache is not None:
            self._cache = cache
        if ws is not None:
            self._ws = ws
        out._cache_init()
        if ws is not None:
            out._ws = {}
        return out

    def to_config(self) -> dict:
        raise NotImplementedError

    def to_json(self) -> str:
        cfg = self.to_config()
        cfg["params"] = self.get_params().tolist()
        return json.dumps(cfg)


class MlpSieve(SieveFunction):
    """Fully-connected ReLU network with scalar output and optional bypass.

    `net_cols` selects the input coordinates fed to the network and
    `bypass_cols` the coordinates entering linearly (h = theta'w_bypass +
    net(w_net)), which houses the parametric part of a partially linear
    model.  Parameters are stored per layer as (weights, bias); the flat
    layout is row-major per layer, bypass coefficients last.

    `bypass_scale` is a fixed preconditioner: the bypass term is
    (scale * theta)'w_bypass, so under a single global learning rate the
    parametric direction converges at a rate comparable to the network
    directions (scale^2 times faster than unscaled).  Reported values and
    input gradients always refer to the original inputs.
    """

    def __init__(self, input_dim, hidden, *, bypass_cols=None, net_cols=None,
                 bypass_scale=1.0, rng=None):
        self.input_dim = int(input_dim)
        self.bypass_cols = list(bypass_cols) if bypass_cols else []
        self.bypass_scale = np.broadcast_to(
            np.asarray(bypass_scale, dtype=np.float64), (len(self.bypass_cols),)
        ).copy()
        if net_cols is None:
            net_cols = [j for j in range(input_dim) if j not in self.bypass_cols]
        self.net_cols = list(net_cols)
        if not self.net_cols:
            raise ValueError("network needs at least one input column")
        if not list(hidden):
            raise ValueError("need at least one hidden layer")
        widths = [len(self.net_cols)] + list(hidden) + [1]
        self.widths = widths
        rng = np.random.default_rng(rng)
        self.weights, self.biases = [], []
        for l in range(1, len(widths)):
            fan_in = widths[l - 1]
            if l < len(widths) - 1:
                bound = np.sqrt(6.0 / fan_in)
                Wl = rng.uniform(-bound, bound, size=(widths[l], fan_in))
            else:
                Wl = np.zeros((widths[l], fan_in))  # zero output layer: h starts at 0
            self.weights.append(Wl)
            self.biases.append(np.zeros(widths[l]))
        self.bypass = np.zeros(len(self.bypass_cols))
        self._sync_transposes()
        self._cache_init()
        self._ws = {}

    def _sync_transposes(self):
        # forward uses A @ W^T; keep a contiguous transposed copy per layer
        self._weights_t = [np.ascontiguousarray(w.T) for w in self.weights]

    def _workspace(self, W):
        """Per-input-batch scratch buffers, reused across parameter updates."""
        key = id(W)
        hit = self._ws.get(key)
        if hit is not None and hit[0] is W:
            return hit[1]
        n = W.shape[0]
        ws = {
            "A0": np.empty((n, len(self.net_cols))),
            "Z": [np.empty((n, k)) for k in self.widths[1:-1]],
            "mask": [np.empty((n, k), dtype=bool) for k in self.widths[1:-1]],
            "out": np.empty((n, 1)),
            "delta": [np.empty((n, k)) for k in self.widths[1:-1]],
        }
        if len(self._ws) >= 8:
            self._ws.clear()
        self._ws[key] = (W, ws)
        return ws

    # -- parameters -------------------------------------------------------
    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases)) + self.bypass.size

    def get_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        parts.append(self.bypass)
        return np.concatenate(parts)

    def set_params(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        pos = 0
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[l] = theta[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[l] = theta[pos : pos + b.size].copy()
            pos += b.size
        self.bypass = theta[pos:].copy()
        self._sync_transposes()
        self._cache_clear()

    # -- forward / backward -----------------------------------------------
    def _forward(self, W):
        return self._cached(W, lambda: self._forward_compute(W))

    def _forward_compute(self, W):
        ws = self._workspace(W)
        A0 = ws["A0"]
        for j, col in enumerate(self.net_cols):
            A0[:, j] = W[:, col]
        activations = [A0]
        masks = ws["mask"]
        for l in range(len(self.weights) - 1):
            Z = ws["Z"][l]
            np.matmul(activations[-1], self._weights_t[l], out=Z)
            Z += self.biases[l]
            np.maximum(Z, 0.0, out=Z)
            np.greater(Z, 0.0, out=masks[l])
            activations.append(Z)
        out = ws["out"]
        np.matmul(activations[-1], self._weights_t[-1], out=out)
        out += self.biases[-1]
        return out[:, 0], activations, masks

    def values(self, W: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(W)
        out, _, _ = self._forward(W)
        if self.bypass_cols:
            return out + W[:, self.bypass_cols] @ (self.bypass_scale * self.bypass)
        return out.copy()  # detach from the reused workspace buffer

    def param_vjp(self, W: np.ndarray, v: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(W)
        v = np.asarray(v, dtype=np.float64)
        _, activations, masks = self._forward(W)
        ws = self._workspace(W)
        nlayers = len(self.weights)
        grads_w = [None] * nlayers
        grads_b = [None] * nlayers
        grads_w[-1] = (v @ activations[-1])[None, :]
        grads_b[-1] = np.array([v.sum()])
        delta = None
        for l in range(nlayers - 2, -1, -1):
            buf = ws["delta"][l]
            if delta is None:
                np.multiply(v[:, None], self.weights[-1][0], out=buf)
            else:
                np.matmul(delta, self.weights[l + 1], out=buf)
            buf *= masks[l]
            delta = buf
            grads_w[l] = delta.T @ activations[l]
            grads_b[l] = delta.sum(axis=0)
        parts = []
        for gw, gb in zip(grads_w, grads_b):
            parts.append(gw.ravel())
            parts.append(gb)
        if self.bypass_cols:
            parts.append((v @ W[:, self.bypass_cols]) * self.bypass_scale)
        else:
            parts.append(np.empty(0))
        return np.concatenate(parts)

    def batch_input_gradient(self, W: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(W)
        _, _, masks = self._forward(W)
        delta = np.ones((W.shape[0], 1))
        for l in range(len(self.weights) - 1, 0, -1):
            delta = (delta @ self.weights[l]) * masks[l - 1]
        g_net = delta @ self.weights[0]
        out = np.zeros_like(W)
        out[:, self.net_cols] = g_net
        if self.bypass_cols:
            out[:, self.bypass_cols] += self.bypass_scale * self.bypass
        return out

    def input_grad_param_vjp(self, W: np.ndarray, v: np.ndarray, c: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(W)
        v = np.asarray(v, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        n = W.shape[0]
        _, _, masks = self._forward(W)
        c_net = c[self.net_cols]
        nlayers = len(self.weights)

        # forward pass of the direction c through the mask-linearized net
        U = [None] * nlayers  # U[l] has shape (n, widths[l+1]) for hidden l
        cur = np.broadcast_to(c_net, (n, c_net.size))
        for l in range(nlayers - 1):
            cur = (cur @ self._weights_t[l]) * masks[l]
            U[l] = cur
        # backward sensitivities T[l] = D_l s_l of the output wrt layer-l activations
        T = [None] * (nlayers - 1)
        cur = np.broadcast_to(self.weights[-1][0], (n, self.widths[-2])) * masks[-1]
        T[nlayers - 2] = cur
        for l in range(nlayers - 2, 0, -1):
            cur = (cur @ self.weights[l]) * masks[l - 1]
            T[l - 1] = cur

        grads_w = []
        for l in range(nlayers - 1):
            vT = T[l] * v[:, None]
            if l == 0:
                grads_w.append(np.outer(vT.sum(axis=0), c_net))
            else:
                grads_w.append(vT.T @ U[l - 1])
        grads_w.append((v @ U[nlayers - 2])[None, :])  # output layer
        parts = []
        for l in range(nlayers):
            parts.append(grads_w[l].ravel())
            parts.append(np.zeros(self.widths[l + 1]))  # biases do not enter the input gradient
        if self.bypass_cols:
            parts.append(v.sum() * c[self.bypass_cols] * self.bypass_scale)
        else:
            parts.append(np.empty(0))
        return np.concatenate(parts)

    def constant_derivative(self, col: int) -> tuple[int, float] | None:
        """(flat parameter index, scale) for an input entering only through
        the linear bypass, where dh/dw_col = scale * theta identically;
        None when the derivative is not constant in the inputs."""
        if col in self.bypass_cols and col not in self.net_cols:
            net_params = sum(w.size + b.size for w, b in zip(self.weights, self.biases))
            pos = self.bypass_cols.index(col)
            return net_params + pos, float(self.bypass_scale[pos])
        return None

    def to_config(self) -> dict:
        return {
            "family": "mlp",
            "input_dim": self.input_dim,
            "hidden": self.widths[1:-1],
            "bypass_cols": self.bypass_cols,
            "net_cols": self.net_cols,
            "bypass_scale": self.bypass_scale.tolist(),
        }


class RbfSieve(SieveFunction):
    """Gaussian radial-basis network h(x) = a0 + sum_j a_j G(|x-c_j|/s_j).

    G is the standard normal density; bandwidths are stored as log(s_j) so
    unconstrained gradient steps keep them positive.  Flat parameter layout:
    [a0, amplitudes, centers row-major, log bandwidths].
    """

    def __init__(self, input_dim, n_units, *, rng=None):
        self.input_dim = int(input_dim)
        self.n_units = int(n_units)
        rng = np.random.default_rng(rng)
        self.a0 = 0.0
        self.amps = np.zeros(n_units)
        self.centers = rng.standard_normal((n_units, input_dim))
        self.log_sigma = np.zeros(n_units)
        self._cache_init()

    @property
    def n_params(self) -> int:
        return 1 + self.n_units * (2 + self.input_dim)

    def get_params(self) -> np.ndarray:
        return np.concatenate([[self.a0], self.amps, self.centers.ravel(), self.log_sigma])

    def set_params(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        J, d = self.n_units, self.input_dim
        self.a0 = float(theta[0])
        self.amps = theta[1 : 1 + J].copy()
        self.centers = theta[1 + J : 1 + J + J * d].reshape(J, d).copy()
        self.log_sigma = theta[1 + J + J * d :].copy()
        self._cache_clear()

    def _parts(self, W):
        return self._cached(W, lambda: self._parts_compute(np.atleast_2d(W)))

    def _parts_compute(self, W):
        diff = W[:, None, :] - self.centers[None, :, :]  # (n, J, d)
        dist2 = np.einsum("njd,njd->nj", diff, diff)
        sigma = np.exp(self.log_sigma)
        u2 = dist2 / sigma**2
        G = np.exp(-0.5 * u2) / SQRT2PI
        return diff, u2, sigma, G

    def values(self, W: np.ndarray) -> np.ndarray:
        _, _, _, G = self._parts(W)
        return self.a0 + G @ self.amps

    def param_vjp(self, W: np.ndarray, v: np.ndarray) -> np.ndarray:
        diff, u2, sigma, G = self._parts(W)
        v = np.asarray(v, dtype=np.float64)
        g_a0 = v.sum()
        g_amp = v @ G
        # d h / d center_j = a_j G (x - c_j) / sigma_j^2
        common = (v[:, None] * G) * (self.amps / sigma**2)  # (n, J)
        g_cent = np.einsum("nj,njd->jd", common, diff)
        # d h / d log sigma_j = a_j u^2 G
        g_ls = np.einsum("n,nj->j", v, u2 * G) * self.amps
        return np.concatenate([[g_a0], g_amp, g_cent.ravel(), g_ls])

    def batch_input_gradient(self, W: np.ndarray) -> np.ndarray:
        diff, _, sigma, G = self._parts(W)
        coef = G * (self.amps / sigma**2)  # (n, J)
        return -np.einsum("nj,njd->nd", coef, diff)

    def input_grad_param_vjp(self, W: np.ndarray, v: np.ndarray, c: np.ndarray) -> np.ndarray:
        diff, u2, sigma, G = self._parts(W)
        v = np.asarray(v, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        s2 = sigma**2
        T = np.einsum("njd,d->nj", diff, c)  # c'(x - c_j)
        g_a0 = 0.0
        g_amp = -np.einsum("n,nj->j", v, G * T / s2)
        # d/d center_j of (-a G T / s^2) = -a G [ (x-c) T / s^4 - c / s^2 ]
        vG = v[:, None] * G
        term1 = np.einsum("nj,njd->jd", vG * T / s2**2, diff)
        term2 = np.einsum("nj,d->jd", vG / s2, c)
        g_cent = -self.amps[:, None] * (term1 - term2)
        # d/d log sigma_j of (-a G T / s^2) = -a T G (u^2 - 2) / s^2
        g_ls = -self.amps * np.einsum("nj->j", vG * T * (u2 - 2.0) / s2)
        return np.concatenate([[g_a0], g_amp, g_cent.ravel(), g_ls])

    def to_config(self) -> dict:
        return {"family": "rbf", "input_dim": self.input_dim, "n_units": self.n_units}


class LinearSieve(SieveFunction):
    """Linear sieve h(w) = design(w)'coef over per-dimension B-splines."""

    def __init__(self, design: InstrumentDesign, coef=None):
        self.design = design
        self.input_dim = len(design.bases)
        self.coef = np.zeros(design.k_n) if coef is None else np.asarray(coef, dtype=np.float64)
        if self.coef.size != design.k_n:
            raise ValueError(f"coefficient length {self.coef.size} != basis count {design.k_n}")
        self._cache_init()

    @property
    def n_params(self) -> int:
        return self.coef.size

    def get_params(self) -> np.ndarray:
        return self.coef.copy()

    def set_params(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.coef.size:
            raise ValueError(f"expected {self.coef.size} parameters, got {theta.size}")
        self.coef = theta.copy()
        # cached features depend only on the inputs, not on coefficients

    def features(self, W) -> np.ndarray:
        return self._cached(W, lambda: self.design.evaluate(W))

    def values(self, W: np.ndarray) -> np.ndarray:
        return self.features(W) @ self.coef

    def param_vjp(self, W: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) @ self.features(W)

    def batch_input_gradient(self, W: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(W)
        out = np.empty_like(W)
        for j in range(self.input_dim):
            out[:, j] = self.design.evaluate_derivative(W, j) @ self.coef
        return out

    def input_grad_param_vjp(self, W: np.ndarray, v: np.ndarray, c: np.ndarray) -> np.ndarray:
        W = np.atleast_2d(W)
        v = np.asarray(v, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        out = np.zeros(self.n_params)
        for j in range(self.input_dim):
            if c[j] != 0.0:
                out += c[j] * (v @ self.design.evaluate_derivative(W, j))
        return out

    def to_config(self) -> dict:
        return {
            "family": "linear",
            "bases": [
                {
                    "degree": b.degree,
                    "interior_knots": b.interior_knots.tolist(),
                    "lo": b.lo,
                    "hi": b.hi,
                }
                for b in self.design.bases
            ],
        }


def sieve_from_json(doc: str) -> SieveFunction:
    """Rebuild a sieve function from its JSON document."""
    cfg = json.loads(doc)
    family = cfg["family"]
    if family == "mlp":
        h = MlpSieve(
            cfg["input_dim"],
            cfg["hidden"],
            bypass_cols=cfg["bypass_cols"],
            net_cols=cfg["net_cols"],
            bypass_scale=cfg.get("bypass_scale", 1.0),
        )
    elif family == "rbf":
        h = RbfSieve(cfg["input_dim"], cfg["n_units"])
    elif family == "linear":
        from .basis import BSplineBasis1D

        bases = [
            BSplineBasis1D(
                degree=b["degree"],
                interior_knots=np.asarray(b["interior_knots"]),
                lo=b["lo"],
                hi=b["hi"],
            )
            for b in cfg["bases"]
        ]
        h = LinearSieve(InstrumentDesign(bases))
    else:
        raise ValueError(f"unknown sieve family {family!r}")
    h.set_params(np.asarray(cfg["params"], dtype=np.float64))
    return h


@dataclass
class PenaltyConfig:
    """Penalty on the sieve: none, squared parameter norm, or an empirical
    smooth-max of the weighted sup-norm |h(w)| (1+|w|^2)^(-omega/2)."""

    lambda_n: float = 0.0
    omega: float = 0.0
    kind: str = "none"  # none | param_l2 | weighted_sup_empirical
    temperature: float = 1e-2

    def __post_init__(self):
        if self.lambda_n < 0:
            raise ValueError("lambda_n must be nonnegative")
        if self.kind not in ("none", "param_l2", "weighted_sup_empirical"):
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def penalty(h: SieveFunction, cfg: PenaltyConfig, sample=None):
    """Penalty value and its gradient with respect to the sieve parameters.

    The weighted sup-norm is approximated over the sample by a log-sum-exp
    smooth max; as temperature -> 0 it converges to the empirical maximum.
    """
    theta = h.get_params()
    if cfg.kind == "none":
        return 0.0, np.zeros_like(theta)
    if cfg.kind == "param_l2":
        return float(theta @ theta), 2.0 * theta
    if sample is None:
        raise ValueError("weighted_sup_empirical penalty needs a sample")
    W = np.atleast_2d(sample)
    vals = h.values(W)
    wgt = (1.0 + np.einsum("nd,nd->n", W, W)) ** (-cfg.omega / 2.0)
    g = np.abs(vals) * wgt
    tau = cfg.temperature
    value = float(tau * logsumexp(g / tau))
    soft = np.exp(g / tau - logsumexp(g / tau))
    grad = h.param_vjp(W, soft * np.sign(vals) * wgt)
    return value, grad
