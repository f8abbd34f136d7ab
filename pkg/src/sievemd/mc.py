"""Monte Carlo harness: synthetic DGPs, replication runs, and reporting.

The main study simulates a partially linear nonlinear-AR outcome with an
endogenous regressor and ARCH noise, fits the partially linear ReLU sieve by
the two-step minimum-distance procedure, applies the forward-filter
correction to the average-derivative functional, and tests H0 via the
GN-QLR statistic.  A tabular MDP simulator and exact Q oracle support the
off-policy-evaluation validation path.
"""

from __future__ import annotations

import concurrent.futures
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .basis import BasisSpec, build_design, fit_projector
from .criterion import (
    OptimizerConfig,
    gd_optimize,
    make_md_loss,
    qn,
    two_step_estimate,
)
from .data import LagFrame, TimeSeriesDataset, build_lag_frame
from .functionals import (
    AvgPartialDerivative,
    CorrectedFunctional,
    ValueFunctional,
    forward_filtered_residuals,
    gamma_hat,
)
from .inference import (
    CHI2_CRIT_95,
    LongRunVarianceConfig,
    invert_ci,
    newey_west,
    qlr_known,
    qlr_unknown,
)
from .models import (
    BellmanModel,
    NpivModel,
    NpqivModel,
    RlModel,
    SmoothingConfig,
    TabularEncoding,
    default_tau,
    transition_frame,
)
from .sieves import MlpSieve


# ---------------------------------------------------------------------------
# data generating process
# ---------------------------------------------------------------------------

@dataclass
class DgpConfig:
    """Partially linear AR outcome with endogenous regressor and ARCH noise.

    Y_t = Z_t * theta0 + f(sum_l lag_base^l Y_{t-l}) + e_t with
    f(x) = (1 - exp(-x)) / (1 + exp(-x)), Z_t an AR(1) driven by u_t,
    e_t = sigma_t eps_t with sigma_t^2 = arch_c0 + arch_c1 Z_{t-1}^2, and
    (u_t, eps_t) jointly normal with correlation rho_endog.  The default
    arch_c1 = 0.5 (1 - ar_z^2) keeps E[e_t^2] = 1.
    """

    n: int
    L: int = 3
    lag_base: float = 0.4
    theta0: float = 1.0
    ar_z: float = 0.3
    rho_endog: float = 0.5
    arch_c0: float = 0.5
    arch_c1: float | None = None
    burn_in: int = 500
    seed: int = 0

    def __post_init__(self):
        if abs(self.ar_z) >= 1:
            raise ValueError("|ar_z| must be < 1")
        if self.arch_c1 is None:
            self.arch_c1 = 0.5 * (1.0 - self.ar_z**2)
        if self.arch_c0 < 0 or self.arch_c1 < 0:
            raise ValueError("ARCH coefficients must be nonnegative")

    @property
    def lag_weights(self) -> np.ndarray:
        return self.lag_base ** np.arange(1, self.L + 1)


def bounded_map(x):
    """The DGP nonlinearity (1 - e^-x) / (1 + e^-x) = tanh(x/2); odd, bounded."""
    return np.tanh(np.asarray(x, dtype=np.float64) / 2.0)


def simulate_dgp(cfg: DgpConfig, rng=None) -> TimeSeriesDataset:
    """Simulate the study DGP, discarding the burn-in period.

    Initial conditions are Z_0 = 0 and Y_{-L..0} = 0; identical seeds give
    identical datasets.
    """
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    total = cfg.burn_in + cfg.n
    raw = rng.standard_normal((total, 2))
    u = raw[:, 0]
    eps = cfg.rho_endog * raw[:, 0] + math.sqrt(1.0 - cfg.rho_endog**2) * raw[:, 1]
    b = cfg.lag_weights
    y = np.zeros(total)
    z = np.zeros(total)
    z_prev = 0.0
    y_hist = np.zeros(cfg.L)  # y_hist[l-1] = Y_{t-l}
    for t in range(total):
        sigma2 = cfg.arch_c0 + cfg.arch_c1 * z_prev**2
        e = math.sqrt(sigma2) * eps[t]
        z_t = cfg.ar_z * z_prev + u[t]
        y_t = z_t * cfg.theta0 + math.tanh(0.5 * float(b @ y_hist)) + e
        z[t] = z_t
        y[t] = y_t
        z_prev = z_t
        y_hist[1:] = y_hist[:-1]
        y_hist[0] = y_t
    keep = slice(cfg.burn_in, total)
    return TimeSeriesDataset(
        t_index=np.arange(cfg.n),
        columns={"y": y[keep], "z": z[keep]},
        roles={"y": "outcome", "z": "endogenous"},
    )


def build_study_frame(ds: TimeSeriesDataset, L: int = 3) -> LagFrame:
    """Lag frame for the study: instruments (Z_{t-1}, Y_{t-1}, ..., Y_{t-L}),
    function inputs (Z_t, Y_{t-1}, ..., Y_{t-L})."""
    y = ds.columns["y"]
    z = ds.columns["z"]
    n = len(y) - L
    if n < 1:
        raise ValueError("series too short for the requested lag count")
    t = np.arange(L, L + n)
    columns = {"y": y[t], "z": z[t], "zlag1": z[t - 1]}
    roles = {"y": "outcome", "z": "endogenous", "zlag1": "instrument"}
    ylag_names = []
    for lag in range(1, L + 1):
        name = f"ylag{lag}"
        columns[name] = y[t - lag]
        roles[name] = "instrument"
        ylag_names.append(name)
    derived = TimeSeriesDataset(t_index=np.arange(n), columns=columns, roles=roles)
    return build_lag_frame(derived, r=0, outcome_lead=0, h_instrument_cols=ylag_names)


# ---------------------------------------------------------------------------
# study configuration and estimation pipeline
# ---------------------------------------------------------------------------

@dataclass
class StudyConfig:
    """One Table-style setting of the simulation study."""

    model: str = "npiv"  # npiv | npqiv
    n: int = 5000
    depth: int = 3        # hidden layers J
    width: int = 10       # hidden width K
    k_tilde: int = 5      # per-dimension B-spline count; k_n = 4 k_tilde - 3
    learning_rate: float = 0.01
    epochs: int = 10000
    gradient_clip: float | None = None
    varpi: float = 0.5
    tau: float | None = None      # NPQIV smoothing temperature; None = reference rule
    phi0: float = 1.0
    rho_endog: float = 0.5
    burn_in: int = 500
    knot_rule: str = "quantile"
    spline_degree: int = 3
    # None fits the endogenous input through the network only (fully
    # nonparametric); a number adds the preconditioned linear bypass in the
    # endogenous input on top of the network, which sees all inputs
    bypass_scale: float | None = 4.0
    # sigma-hat is a spline fit of squared residuals and can overshoot below
    # zero in the tails; flooring well above the library default keeps the
    # inverse weights (and the GD curvature) bounded
    weight_floor: float = 0.05
    tolerance: float | None = None
    bandwidth: LongRunVarianceConfig = field(default_factory=LongRunVarianceConfig)

    def __post_init__(self):
        if self.model not in ("npiv", "npqiv"):
            raise ValueError(f"unknown study model {self.model!r}")

    @property
    def k_n(self) -> int:
        return 4 * (self.k_tilde - 1) + 1

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            gradient_clip=self.gradient_clip,
            tolerance=self.tolerance,
        )

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "bandwidth"}
        out["bandwidth_rule"] = self.bandwidth.rule
        out["bandwidth"] = self.bandwidth.bandwidth
        return out


def _study_model(cfg: StudyConfig, frame: LagFrame):
    if cfg.model == "npiv":
        return NpivModel()
    smoothing = SmoothingConfig(cfg.tau) if cfg.tau is not None else default_tau(frame.Y)
    return NpqivModel(cfg.varpi, smoothing)


@dataclass
class StudyAnalysis:
    """Fitted pipeline state: estimate, correction, and test entry points."""

    cfg: StudyConfig
    frame: LagFrame
    model: object
    proj: object
    weights: object
    fitted: object           # final EstimationResult (exact-path q_n)
    pilot: object            # pilot EstimationResult or None
    perobs: AvgPartialDerivative
    gamma: object
    wseries: np.ndarray      # forward-filtered residuals
    phi_hat: float
    phi_plugin: float
    sigma2: float
    corrected: CorrectedFunctional
    _synced: object = None

    def synced_baseline(self):
        """Unrestricted fit continued for the restricted-stage budget.

        The sieve keeps descending slowly along directions shared by the
        restricted and unrestricted problems; comparing the restricted stage
        against an equally-budgeted continuation isolates the cost of the
        constraint from that shared descent.
        """
        if self._synced is None:
            opt = self.cfg.optimizer()
            loss = make_md_loss(self.model, self.fitted.h_hat.clone(), self.proj,
                                self.frame, self.weights)
            cont = gd_optimize(loss, self.fitted.h_hat, opt)
            cont.q_n = qn(self.model, cont.h_hat, self.proj, self.frame, self.weights)
            cont.weight = self.weights
            self._synced = cont
        return self._synced

    def test(self, phi0: float, restricted_h0=None):
        synced = self.synced_baseline()
        return qlr_unknown(
            self.model, self.frame, self.proj, self.weights, self.corrected,
            phi0, self.cfg.optimizer(), fitted=self.fitted, sigma2=self.sigma2,
            restricted_h0=restricted_h0, baseline_q=synced.q_n,
        )

    def confidence_interval(self, level: float = 0.95, probe_epochs=None):
        """Invert the QLR test around phi_hat, warm-starting each probe."""
        opt = self.cfg.optimizer()
        if probe_epochs is not None:
            opt = replace(opt, epochs=probe_epochs)
        warm = {"h": self.fitted.h_hat}
        synced = self.synced_baseline()

        def probe(phi0):
            res = qlr_unknown(
                self.model, self.frame, self.proj, self.weights, self.corrected,
                phi0, opt, fitted=self.fitted, sigma2=self.sigma2,
                restricted_h0=warm["h"], baseline_q=synced.q_n,
            )
            warm["h"] = res.restricted_h
            return res

        scale = math.sqrt(self.sigma2 / self.frame.n)
        return invert_ci(probe, center=self.phi_hat, level=level,
                         initial_step=max(2.0 * scale, 1e-3 * (1.0 + abs(self.phi_hat))))


def analyze_frame(cfg: StudyConfig, frame: LagFrame, init_seed=0) -> StudyAnalysis:
    """Fit the study pipeline on a prepared frame.

    Steps: instrument design and projector, two-step minimum-distance fit of
    the partially linear ReLU sieve, correction weights, forward-filtered
    residuals, and the Newey-West long-run variance.
    """
    specs = [BasisSpec(cfg.k_tilde, cfg.spline_degree, cfg.knot_rule)] * frame.X.shape[1]
    _, Psi = build_design(frame.X, specs)
    proj = fit_projector(Psi)

    model = _study_model(cfg, frame)
    d_w = frame.W.shape[1]
    if cfg.bypass_scale is None:
        h0 = MlpSieve(d_w, [cfg.width] * cfg.depth, rng=np.random.default_rng(init_seed))
    else:
        h0 = MlpSieve(
            d_w,
            [cfg.width] * cfg.depth,
            bypass_cols=[0],
            bypass_scale=cfg.bypass_scale,
            rng=np.random.default_rng(init_seed),
        )
    ts = two_step_estimate(model, frame, h0, proj, cfg.optimizer(), floor=cfg.weight_floor)

    perobs = AvgPartialDerivative(coordinate=0)
    h_hat = ts.final.h_hat
    gamma = gamma_hat(h_hat, model, proj, frame, ts.weights, perobs)
    wser = forward_filtered_residuals(h_hat, frame, model, gamma, perobs)
    sigma2 = newey_west(wser, cfg.bandwidth)
    return StudyAnalysis(
        cfg=cfg,
        frame=frame,
        model=model,
        proj=proj,
        weights=ts.weights,
        fitted=ts.final,
        pilot=ts.pilot,
        perobs=perobs,
        gamma=gamma,
        wseries=wser,
        phi_hat=float(np.mean(wser)),
        phi_plugin=perobs.value(h_hat, frame),
        sigma2=sigma2,
        corrected=CorrectedFunctional(perobs, gamma, model),
    )


def run_single(cfg: StudyConfig, seed) -> dict:
    """One replication: simulate, fit, correct, and test H0: phi = phi0.

    `seed` may be any value np.random.SeedSequence accepts; the DGP draw
    and the network initialization use separate spawned children.
    """
    ss = np.random.SeedSequence(seed)
    dgp_child, init_child = ss.spawn(2)
    dgp = DgpConfig(n=cfg.n + 3, rho_endog=cfg.rho_endog, burn_in=cfg.burn_in)
    ds = simulate_dgp(dgp, rng=np.random.default_rng(dgp_child))
    frame = build_study_frame(ds, L=3)
    analysis = analyze_frame(cfg, frame, init_seed=init_child)
    test = analysis.test(cfg.phi0)
    return {
        "phi_hat": analysis.phi_hat,
        "phi_plugin": analysis.phi_plugin,
        "statistic": test.statistic,
        "p_value": test.p_value,
        "q_unrestricted": test.q_unrestricted,
        "q_restricted": test.q_restricted,
        "constraint_gap": test.constraint_gap,
        "slack_flag": test.slack_flag,
        "sigma2": analysis.sigma2,
        "n_floored": analysis.weights.n_floored,
        "pilot_phi": (
            analysis.perobs.value(analysis.pilot.h_hat, frame)
            if analysis.pilot is not None
            else None
        ),
        "grad_norm": analysis.fitted.grad_norm,
        "epochs_run": analysis.fitted.epochs_run,
    }


# ---------------------------------------------------------------------------
# replication orchestration
# ---------------------------------------------------------------------------

@dataclass
class ReplicationSummary:
    """Aggregates of a replication study (Table-style row)."""

    estimates: np.ndarray
    statistics: np.ndarray
    mean: float
    std: float
    stat_mean: float
    stat_std: float
    q95: float
    size: float
    n_failed: int
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "stat_mean": self.stat_mean,
            "stat_std": self.stat_std,
            "q95": self.q95,
            "size": self.size,
            "n_reps": len(self.statistics),
            "n_failed": self.n_failed,
            "config": self.config,
        }


def rep_seed(master_seed: int, rep: int) -> tuple:
    """Documented per-replication seed: SeedSequence entropy (master, rep)."""
    return (master_seed, rep)


def _one_rep(args):
    cfg, seed = args
    try:
        return run_single(cfg, seed)
    except Exception as exc:  # noqa: BLE001 - per-rep failures are data
        return {"error": f"{type(exc).__name__}: {exc}"}


def summarize(records, config=None, max_failure_rate: float = 0.05) -> ReplicationSummary:
    """Aggregate per-replication records into the Table-style summary."""
    ok = [r for r in records if "error" not in r]
    n_failed = len(records) - len(ok)
    if records and n_failed / len(records) > max_failure_rate:
        errors = [r["error"] for r in records if "error" in r][:5]
        raise RuntimeError(f"{n_failed}/{len(records)} replications failed: {errors}")
    if not ok:
        raise ValueError("nothing to report")
    est = np.asarray([r["phi_hat"] for r in ok])
    stats = np.asarray([r["statistic"] for r in ok])
    return ReplicationSummary(
        estimates=est,
        statistics=stats,
        mean=float(np.mean(est)),
        std=float(np.std(est, ddof=1)) if len(est) > 1 else 0.0,
        stat_mean=float(np.mean(stats)),
        stat_std=float(np.std(stats, ddof=1)) if len(stats) > 1 else 0.0,
        q95=float(np.quantile(stats, 0.95)),  # type-7 empirical quantile
        size=float(np.mean(stats > CHI2_CRIT_95)),
        n_failed=n_failed,
        records=records,
        config=config or {},
    )


def run_replications(cfg: StudyConfig, R: int, workers: int = 1,
                     master_seed: int = 0) -> ReplicationSummary:
    """Run R independent replications with deterministic per-rep seeds.

    Replications run in a process pool when workers > 1; each owns its
    dataset, sieve, and optimizer state.  A failure rate above 5% aborts.
    """
    if R < 1:
        raise ValueError("need at least one replication")
    jobs = [(cfg, rep_seed(master_seed, rep)) for rep in range(R)]
    if workers <= 1:
        records = [_one_rep(job) for job in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_one_rep, jobs, chunksize=1))
    config = cfg.to_dict() | {"R": R, "master_seed": master_seed, "workers": workers}
    return summarize(records, config=config)


def report(summary: ReplicationSummary, fmt: str = "text") -> str:
    """Render the summary as an aligned text table or CSV."""
    if summary.statistics.size == 0:
        raise ValueError("nothing to report")
    cols = [
        ("mean", summary.mean),
        ("std", summary.std),
        ("stat_mean", summary.stat_mean),
        ("stat_std", summary.stat_std),
        ("q95", summary.q95),
        ("size", summary.size),
        ("n_reps", len(summary.statistics)),
        ("n_failed", summary.n_failed),
    ]
    if fmt == "csv":
        header = ",".join(name for name, _ in cols)
        row = ",".join(f"{val:.6g}" if isinstance(val, float) else str(val) for _, val in cols)
        return header + "\n" + row + "\n"
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    widths = [max(len(name), 10) for name, _ in cols]
    head = "  ".join(name.rjust(w) for (name, _), w in zip(cols, widths))
    vals = "  ".join(
        (f"{val:10.4f}" if isinstance(val, float) else str(val)).rjust(w)
        for (_, val), w in zip(cols, widths)
    )
    return head + "\n" + vals + "\n"


# ---------------------------------------------------------------------------
# tabular MDP oracle and off-policy-evaluation pipeline
# ---------------------------------------------------------------------------

def tabular_q_oracle(P: np.ndarray, r: np.ndarray, pi: np.ndarray,
                     gamma: float) -> np.ndarray:
    """Exact Q of a policy on a finite MDP by solving Q = r + gamma P Pi Q.

    P has shape (S, A, S') with rows summing to one, r and pi shape (S, A).
    """
    P = np.asarray(P, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    S, A = r.shape
    if not 0.0 <= gamma < 1.0:
        raise ValueError("discount factor must be in [0, 1)")
    if np.any(np.abs(P.sum(axis=2) - 1.0) > 1e-10):
        raise ValueError("transition rows must sum to 1")
    M = np.einsum("sat,tb->satb", P, pi).reshape(S * A, S * A)
    system = np.eye(S * A) - gamma * M
    try:
        q = np.linalg.solve(system, r.ravel())
    except np.linalg.LinAlgError as exc:  # unreachable for gamma < 1; guarded anyway
        raise ValueError("singular Bellman system") from exc
    return q.reshape(S, A)


def simulate_mdp(P, r, behavior_pi, T: int, seed=0, s0: int = 0):
    """Roll a behavior-policy trajectory: states (T+1,), actions and rewards (T,)."""
    P = np.asarray(P, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    behavior_pi = np.asarray(behavior_pi, dtype=np.float64)
    rng = np.random.default_rng(seed)
    S = P.shape[0]
    states = np.empty(T + 1, dtype=np.int64)
    actions = np.empty(T, dtype=np.int64)
    rewards = np.empty(T)
    states[0] = s0
    for t in range(T):
        s = states[t]
        a = rng.choice(len(behavior_pi[s]), p=behavior_pi[s])
        actions[t] = a
        rewards[t] = r[s, a]
        states[t + 1] = rng.choice(S, p=P[s, a])
    return states, actions, rewards


def random_mdp(n_states: int, n_actions: int, seed=0):
    """A random dense MDP: Dirichlet transitions, uniform rewards on [0, 1],
    and a random target policy."""
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    pi = rng.dirichlet(np.ones(n_actions), size=n_states)
    return P, r, pi


@dataclass
class RlStudyConfig:
    """Off-policy-evaluation fit settings."""

    gamma: float = 0.9
    T: int = 10000
    width: int = 8
    depth: int = 2
    learning_rate: float = 0.05
    epochs: int = 2000
    tolerance: float | None = 1e-12
    weight_floor: float = 1e-4
    ci_state: int = 0


def run_rl_ope(P, r_table, behavior_pi, target_pi, cfg: RlStudyConfig, seed,
               with_ci: bool = True) -> dict:
    """Fit Q from one behavior trajectory and evaluate the target policy.

    Returns the per-state value estimates, the exact tabular oracle values,
    and (optionally) the QLR confidence interval for the configured state.
    """
    ss = np.random.SeedSequence(seed)
    traj_child, init_child = ss.spawn(2)
    S, A = np.asarray(r_table).shape
    states, actions, rewards = simulate_mdp(
        P, r_table, behavior_pi, cfg.T, seed=traj_child
    )
    enc = TabularEncoding(S, A, style="onehot")
    rl = RlModel(gamma=cfg.gamma, policy=np.asarray(target_pi, dtype=np.float64),
                 encoding=enc)
    model = BellmanModel(rl)
    frame = transition_frame([(states, actions, rewards)], rl)

    n_cells = S * A
    _, Psi = build_design(frame.X, [BasisSpec(n_cells, degree=0, rule="uniform")])
    proj = fit_projector(Psi)
    h0 = MlpSieve(enc.input_dim, [cfg.width] * cfg.depth,
                  rng=np.random.default_rng(init_child))
    opt = OptimizerConfig(learning_rate=cfg.learning_rate, epochs=cfg.epochs,
                          tolerance=cfg.tolerance)
    ts = two_step_estimate(model, frame, h0, proj, opt, floor=cfg.weight_floor)
    h_hat = ts.final.h_hat

    q_oracle = tabular_q_oracle(P, r_table, target_pi, cfg.gamma)
    values, oracle_values = [], []
    for s in range(S):
        func = ValueFunctional(s, rl)
        values.append(func.value(h_hat))
        oracle_values.append(float(np.asarray(target_pi)[s] @ q_oracle[s]))
    out = {
        "values": values,
        "oracle_values": oracle_values,
        "q_unrestricted": ts.final.q_n,
        "n_floored": ts.weights.n_floored,
    }
    if with_ci:
        s = cfg.ci_state
        func = ValueFunctional(s, rl)
        warm = {"h": h_hat}
        probe_cfg = replace(opt, epochs=max(200, cfg.epochs // 4))

        def test(phi0):
            res = qlr_known(
                model, frame, proj, ts.weights, func, phi0, probe_cfg,
                fitted=ts.final, gap_tol=1e-3 * (1.0 + abs(phi0)),
                restricted_h0=warm["h"],
            )
            warm["h"] = res.restricted_h
            return res

        ci = invert_ci(test, center=values[s],
                       initial_step=0.1 * (1.0 + abs(values[s])))
        out["ci"] = ci
        out["ci_state"] = s
    return out
