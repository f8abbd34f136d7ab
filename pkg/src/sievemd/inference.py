"""Long-run variance estimation and GN-QLR inference.

The QLR statistic is n times the gap between the restricted and
unrestricted criterion minima; under the null it is asymptotically
chi-square with one degree of freedom, so confidence sets come from test
inversion without standard errors (and without the Riesz representer).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .criterion import (
    EPSILON_OPT,
    EstimationResult,
    OptimizerConfig,
    WeightFunction,
    gd_optimize,
    make_md_loss,
    qn,
    restricted_estimate,
)

#: chi-square(1) critical value at the 95% level
CHI2_CRIT_95 = 3.841

#: smallest usable long-run variance
SIGMA2_FLOOR = 1e-12


@dataclass
class LongRunVarianceConfig:
    """Bartlett-kernel bandwidth choice: fixed lag count or the automatic
    rule floor(4 (n/100)^(2/9))."""

    bandwidth: int | None = None
    rule: str = "auto"  # auto | fixed

    def __post_init__(self):
        if self.rule not in ("auto", "fixed"):
            raise ValueError(f"unknown bandwidth rule {self.rule!r}")
        if self.rule == "fixed":
            if self.bandwidth is None or self.bandwidth < 0:
                raise ValueError("fixed rule needs a nonnegative bandwidth")

    def lags(self, n: int) -> int:
        if self.rule == "fixed":
            return int(self.bandwidth)
        return auto_bandwidth(n)


def auto_bandwidth(n: int) -> int:
    return int(math.floor(4.0 * (n / 100.0) ** (2.0 / 9.0)))


def newey_west(series, cfg: LongRunVarianceConfig | int | None = None) -> float:
    """Bartlett long-run variance: gamma_0 + 2 sum_j (1 - j/(B+1)) gamma_j.

    Autocovariances are taken about the sample mean with divisor n.  A
    constant series returns exactly 0; otherwise the result is floored at
    1e-12 so downstream inverses stay finite.
    """
    x = np.asarray(series, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise ValueError("need at least 2 observations")
    if isinstance(cfg, (int, np.integer)):
        B = int(cfg)
    else:
        B = (cfg or LongRunVarianceConfig()).lags(n)
    if B < 0:
        raise ValueError("bandwidth must be nonnegative")
    if np.all(x == x[0]):
        return 0.0
    xc = x - x.mean()
    value = float(xc @ xc) / n
    for j in range(1, min(B, n - 1) + 1):
        gamma_j = float(xc[j:] @ xc[:-j]) / n
        value += 2.0 * (1.0 - j / (B + 1.0)) * gamma_j
    return max(value, SIGMA2_FLOOR)


def chi2_p(statistic: float) -> float:
    """Survival function of chi-square(1): p = erfc(sqrt(max(s, 0)/2))."""
    return math.erfc(math.sqrt(max(statistic, 0.0) / 2.0))


def chi2_crit(level: float) -> float:
    if abs(level - 0.95) < 1e-12:
        return CHI2_CRIT_95
    from scipy.stats import chi2

    return float(chi2.ppf(level, df=1))


@dataclass
class QLRTestResult:
    """A GN-QLR test outcome with its inputs and diagnostics."""

    statistic: float
    p_value: float
    phi0: float
    q_unrestricted: float
    q_restricted: float
    constraint_gap: float
    slack_flag: bool
    diagnostics: dict = field(default_factory=dict)
    restricted_h = None  # fitted restricted sieve, for warm starts; not serialized

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "phi0": self.phi0,
            "q_unrestricted": self.q_unrestricted,
            "q_restricted": self.q_restricted,
            "constraint_gap": self.constraint_gap,
            "slack_flag": self.slack_flag,
            "diagnostics": self.diagnostics,
        }


def _result(statistic, phi0, q_u, q_r, gap, n, epsilon_opt, diagnostics) -> QLRTestResult:
    return QLRTestResult(
        statistic=float(statistic),
        p_value=chi2_p(statistic),
        phi0=float(phi0),
        q_unrestricted=float(q_u),
        q_restricted=float(q_r),
        constraint_gap=float(gap),
        slack_flag=bool(statistic < -n * epsilon_opt),
        diagnostics=diagnostics,
    )


def qlr_known(model, frame, proj, w: WeightFunction, functional, phi0, cfg: OptimizerConfig,
              h0=None, *, fitted: EstimationResult | None = None, penalty_cfg=None,
              mu_schedule=None, gap_tol=None, restricted_h0=None,
              epsilon_opt=EPSILON_OPT) -> QLRTestResult:
    """GN-QLR statistic for a known functional: S_n = n (Q_n^R - Q_n).

    The unrestricted fit may be supplied via `fitted` (criterion value on
    the exact path under the same weights); the restricted fit runs the
    quadratic-penalty homotopy warm-started from it (or from
    `restricted_h0`, e.g. a neighbouring restricted fit during test
    inversion).
    """
    if fitted is None:
        if h0 is None:
            raise ValueError("need either a fitted result or a starting sieve h0")
        loss = make_md_loss(model, h0.clone(), proj, frame, w, penalty_cfg)
        fitted = gd_optimize(loss, h0, cfg)
        fitted.q_n = qn(model, fitted.h_hat, proj, frame, w)
    kwargs = {"penalty_cfg": penalty_cfg, "gap_tol": gap_tol}
    if mu_schedule is not None:
        kwargs["mu_schedule"] = mu_schedule
    h_start = restricted_h0 if restricted_h0 is not None else fitted.h_hat
    restricted = restricted_estimate(
        model, frame, proj, functional, phi0, cfg, w, h_start, **kwargs
    )
    statistic = frame.n * (restricted.est.q_n - fitted.q_n)
    out = _result(
        statistic, phi0, fitted.q_n, restricted.est.q_n, restricted.gap, frame.n,
        epsilon_opt,
        {
            "mu_used": restricted.mu_used,
            "stages_run": restricted.stages_run,
            "restricted_epochs": restricted.est.epochs_run,
            "restricted_grad_norm": restricted.est.grad_norm,
        },
    )
    out.restricted_h = restricted.est.h_hat
    return out


def qlr_unknown(model, frame, proj, w: WeightFunction, corrected, phi0,
                cfg: OptimizerConfig, *, fitted: EstimationResult, sigma2: float,
                penalty_cfg=None, restricted_h0=None, baseline_q=None,
                epsilon_opt=EPSILON_OPT) -> QLRTestResult:
    """GN-QLR statistic for an expectation functional with estimated
    correction weights.

    The augmented loss L_n(alpha, gamma) = Q_n + (phi_hat(alpha) - gamma)^2
    / Sigma_2 is minimized at gamma = phi_hat(alpha), so the unrestricted
    value equals Q_n(alpha_hat); the restricted stage fixes gamma = phi0 and
    re-minimizes over alpha by gradient descent (no hard constraint).  Both
    stage values entering the statistic use the exact residual path.

    `baseline_q` replaces the unrestricted criterion value in the statistic;
    pass the value of an unrestricted fit continued for the same number of
    epochs as the restricted stage, so both sides of the difference carry
    the same optimization budget and the slow shared descent directions
    cancel instead of biasing the statistic.
    """
    if sigma2 < SIGMA2_FLOOR:
        raise ValueError(f"long-run variance {sigma2:.3e} below floor {SIGMA2_FLOOR:.0e}")
    n = frame.n
    h_start = restricted_h0 if restricted_h0 is not None else fitted.h_hat
    h_work = h_start.clone()  # shared by the criterion and the functional term
    base = make_md_loss(model, h_work, proj, frame, w, penalty_cfg)
    inv_s2 = 1.0 / sigma2

    def loss(theta):
        value, grad = base(theta)  # leaves h_work at theta
        pv = corrected.value(h_work, frame, optim=True)
        pg = corrected.param_gradient(h_work, frame)
        value += (pv - phi0) ** 2 * inv_s2
        grad = grad + (2.0 * inv_s2 * (pv - phi0)) * pg
        return value, grad

    g_phi = corrected.param_gradient(h_start, frame)
    stiff = inv_s2 * float(g_phi @ g_phi)
    lr = min(cfg.learning_rate, 0.25 / stiff) if stiff > 0 else cfg.learning_rate
    stage_cfg = OptimizerConfig(
        learning_rate=lr, epochs=cfg.epochs, gradient_clip=cfg.gradient_clip,
        seed=cfg.seed, tolerance=cfg.tolerance,
    )
    rest = gd_optimize(loss, h_start, stage_cfg)
    h_r = rest.h_hat
    phi_r = corrected.value(h_r, frame)
    q_r = qn(model, h_r, proj, frame, w)
    l_restricted = q_r + (phi_r - phi0) ** 2 * inv_s2
    q_u = fitted.q_n if baseline_q is None else float(baseline_q)
    statistic = n * (l_restricted - q_u)
    out = _result(
        statistic, phi0, q_u, l_restricted, abs(phi_r - phi0), n, epsilon_opt,
        {
            "sigma2": sigma2,
            "phi_restricted": phi_r,
            "q_restricted_raw": q_r,
            "restricted_epochs": rest.epochs_run,
            "restricted_grad_norm": rest.grad_norm,
            "learning_rate_used": lr,
        },
    )
    out.restricted_h = h_r
    return out


@dataclass
class ConfidenceInterval:
    lo: float
    hi: float
    level: float
    critical_value: float
    n_evals: int
    monotone: bool

    def covers(self, value: float) -> bool:
        return self.lo <= value <= self.hi

    def to_dict(self) -> dict:
        return {
            "lo": self.lo,
            "hi": self.hi,
            "level": self.level,
            "critical_value": self.critical_value,
            "n_evals": self.n_evals,
            "monotone": self.monotone,
        }


def invert_ci(test, center: float, level: float = 0.95, *, initial_step=None,
              max_doublings: int = 30, xtol=None) -> ConfidenceInterval:
    """Confidence interval by inverting the QLR test around the estimate.

    Expands outward from `center` by doubling until the statistic crosses
    the chi-square critical value, then bisects the crossing on each side.
    Raises when no crossing is found within the scanned range; flags the
    interval when the statistic is not monotone along the expansion path.
    """
    crit = chi2_crit(level)
    if initial_step is None:
        initial_step = 0.25 * (1.0 + abs(center))
    if xtol is None:
        xtol = 1e-2 * initial_step
    evals = 0
    monotone = True

    def stat_at(phi0):
        nonlocal evals
        evals += 1
        res = test(phi0)
        return res.statistic if hasattr(res, "statistic") else float(res)

    s_center = stat_at(center)
    if s_center >= crit:
        raise ValueError(
            f"statistic at the center {s_center:.3f} already exceeds the critical value"
        )

    def find_crossing(side):
        nonlocal monotone
        inside, step = center, initial_step
        s_prev = s_center
        for _ in range(max_doublings):
            x = center + side * step
            s = stat_at(x)
            if s < s_prev - 1e-9 * (1.0 + abs(s_prev)):
                monotone = False
            s_prev = s
            if s >= crit:
                lo_x, hi_x = inside, x
                while abs(hi_x - lo_x) > xtol:
                    mid = 0.5 * (lo_x + hi_x)
                    if stat_at(mid) >= crit:
                        hi_x = mid
                    else:
                        lo_x = mid
                return 0.5 * (lo_x + hi_x)
            inside = x
            step *= 2.0
        raise ValueError(
            f"no crossing of the critical value within {center + side * step:+.4g}"
        )

    hi = find_crossing(+1.0)
    lo = find_crossing(-1.0)
    return ConfidenceInterval(lo=lo, hi=hi, level=level, critical_value=crit,
                              n_evals=evals, monotone=monotone)
