"""Linear sieve space for the instrument projection.

Per-dimension clamped B-spline bases (Cox-de Boor recursion), the
concatenated design matrix used to approximate conditional expectations
given the instruments, and the least-squares projector built on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


@dataclass
class BSplineBasis1D:
    """Clamped B-spline basis on [lo, hi] with strictly increasing interior knots.

    The full knot vector repeats each boundary knot degree+1 times, so the
    basis has len(interior_knots) + degree + 1 functions and sums to one on
    [lo, hi].  Inputs outside [lo, hi] are clamped to the boundary before
    evaluation.
    """

    degree: int
    interior_knots: np.ndarray
    lo: float
    hi: float

    def __post_init__(self):
        self.interior_knots = np.asarray(self.interior_knots, dtype=np.float64)
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if self.interior_knots.size:
            if not np.all(np.diff(self.interior_knots) > 0):
                raise ValueError("interior knots must be strictly increasing")
            if self.interior_knots[0] <= self.lo or self.interior_knots[-1] >= self.hi:
                raise ValueError("interior knots must lie strictly inside (lo, hi)")
        if not self.lo < self.hi:
            raise ValueError("need lo < hi")

    @property
    def n_basis(self) -> int:
        return len(self.interior_knots) + self.degree + 1

    @property
    def knots(self) -> np.ndarray:
        reps = self.degree + 1
        return np.concatenate(
            [np.full(reps, self.lo), self.interior_knots, np.full(reps, self.hi)]
        )


def _cox_de_boor(basis: BSplineBasis1D, x: np.ndarray, degree: int) -> np.ndarray:
    """All B-spline values of the given degree on basis.knots, rows = points."""
    t = basis.knots
    x = np.clip(np.asarray(x, dtype=np.float64), basis.lo, basis.hi)
    m = len(t)
    N = np.zeros((len(x), m - 1))
    for i in range(m - 1):
        if t[i] < t[i + 1]:
            N[:, i] = (x >= t[i]) & (x < t[i + 1])
    # right boundary point belongs to the last nonempty interval
    last = max(i for i in range(m - 1) if t[i] < t[i + 1])
    N[x == t[-1], last] = 1.0
    for k in range(1, degree + 1):
        Nk = np.zeros((len(x), m - 1 - k))
        for i in range(m - 1 - k):
            if t[i + k] > t[i]:
                Nk[:, i] += (x - t[i]) / (t[i + k] - t[i]) * N[:, i]
            if t[i + k + 1] > t[i + 1]:
                Nk[:, i] += (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * N[:, i + 1]
        N = Nk
    return N


def bspline_design(basis: BSplineBasis1D, x) -> np.ndarray:
    """Design matrix of all basis values at the points x, shape (n, n_basis)."""
    return _cox_de_boor(basis, np.atleast_1d(x), basis.degree)


def bspline_eval(basis: BSplineBasis1D, x: float) -> np.ndarray:
    """Basis values at a single point."""
    return bspline_design(basis, [x])[0]


def bspline_derivative_design(basis: BSplineBasis1D, x) -> np.ndarray:
    """First-derivative design matrix; zero outside [lo, hi] (clamped eval)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    n_basis = basis.n_basis
    if basis.degree == 0:
        return np.zeros((len(x), n_basis))
    t = basis.knots
    k = basis.degree
    lower = _cox_de_boor(basis, x, k - 1)  # one extra column vs n_basis
    D = np.zeros((len(x), n_basis))
    for i in range(n_basis):
        if t[i + k] > t[i]:
            D[:, i] += k * lower[:, i] / (t[i + k] - t[i])
        if t[i + k + 1] > t[i + 1]:
            D[:, i] -= k * lower[:, i + 1] / (t[i + k + 1] - t[i + 1])
    inside = (x >= basis.lo) & (x <= basis.hi)
    D[~inside] = 0.0
    return D


@dataclass
class BasisSpec:
    """Configuration of one per-dimension basis: size, degree, knot rule."""

    n_bases: int
    degree: int = 3
    rule: str = "quantile"  # quantile | uniform

    def __post_init__(self):
        if self.n_bases < self.degree + 1:
            raise ValueError("n_bases must be at least degree + 1")
        if self.rule not in ("quantile", "uniform"):
            raise ValueError(f"unknown knot rule {self.rule!r}")


def make_basis(column: np.ndarray, spec: BasisSpec) -> BSplineBasis1D:
    """Fit a 1-D basis to a data column, placing interior knots by the rule."""
    column = np.asarray(column, dtype=np.float64)
    lo, hi = float(np.min(column)), float(np.max(column))
    if not lo < hi:
        raise ValueError("constant column: cannot build a basis")
    n_interior = spec.n_bases - spec.degree - 1
    if n_interior == 0:
        interior = np.empty(0)
    elif spec.rule == "uniform":
        interior = np.linspace(lo, hi, n_interior + 2)[1:-1]
    else:
        probs = np.arange(1, n_interior + 1) / (n_interior + 1)
        interior = np.quantile(column, probs)
        eps = 1e-9 * (hi - lo)
        interior = np.clip(interior, lo + eps, hi - eps)
        if np.any(np.diff(interior) <= 0):
            raise ValueError("tied quantile knots; use rule='uniform' or fewer bases")
    return BSplineBasis1D(degree=spec.degree, interior_knots=interior, lo=lo, hi=hi)


@dataclass
class InstrumentDesign:
    """Concatenated per-dimension B-spline design with a global intercept.

    Each dimension contributes its basis minus the last (highest-knot)
    function; since every per-dimension basis sums to one, dropping one
    function per dimension and appending the intercept keeps the design
    full rank.  With d dimensions of k_tilde bases each,
    k_n = d*(k_tilde - 1) + 1.
    """

    bases: list[BSplineBasis1D] = field(default_factory=list)

    @property
    def k_n(self) -> int:
        return sum(b.n_basis - 1 for b in self.bases) + 1

    def evaluate(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != len(self.bases):
            raise ValueError(f"design expects {len(self.bases)} columns, got {X.shape[1]}")
        blocks = [bspline_design(b, X[:, j])[:, :-1] for j, b in enumerate(self.bases)]
        blocks.append(np.ones((X.shape[0], 1)))
        return np.column_stack(blocks)

    def evaluate_derivative(self, X, dim: int) -> np.ndarray:
        """d(design)/dx_dim; only that dimension's block is nonzero."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        blocks = []
        for j, b in enumerate(self.bases):
            if j == dim:
                blocks.append(bspline_derivative_design(b, X[:, j])[:, :-1])
            else:
                blocks.append(np.zeros((X.shape[0], b.n_basis - 1)))
        blocks.append(np.zeros((X.shape[0], 1)))
        return np.column_stack(blocks)


def build_design(X, specs: list[BasisSpec]) -> tuple[InstrumentDesign, np.ndarray]:
    """Fit per-dimension bases on the columns of X and assemble the design.

    Returns the reusable design object and its matrix at X.  No interaction
    terms between dimensions are included.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("empty sample")
    if len(specs) != X.shape[1]:
        raise ValueError(f"need one BasisSpec per dimension ({X.shape[1]}), got {len(specs)}")
    design = InstrumentDesign([make_basis(X[:, j], spec) for j, spec in enumerate(specs)])
    Psi = design.evaluate(X)
    degenerate = np.where(~Psi.any(axis=0))[0]
    if degenerate.size:
        raise ValueError(f"degenerate all-zero design columns: {degenerate.tolist()}")
    return design, Psi


def default_ridge(Psi: np.ndarray) -> float:
    """Ridge guard for near-singular Gram matrices: 1e-8 * trace(Psi'Psi)/k_n."""
    return 1e-8 * float(np.einsum("ij,ij->", Psi, Psi)) / Psi.shape[1]


@dataclass
class InstrumentProjector:
    """Least-squares projector onto the instrument sieve span.

    Holds the Cholesky factorization of Psi'Psi + ridge*I; project(v)
    returns Psi (Psi'Psi + ridge I)^{-1} Psi' v.  With ridge=0 this is the
    orthogonal projection: symmetric, idempotent, and a contraction.
    """

    Psi: np.ndarray
    ridge: float
    _cho: tuple = field(repr=False, default=None)
    effective_rank: int = 0
    _PsiT: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self._PsiT is None:
            self._PsiT = np.ascontiguousarray(self.Psi.T)

    @property
    def n(self) -> int:
        return self.Psi.shape[0]

    @property
    def k_n(self) -> int:
        return self.Psi.shape[1]

    def coefficients(self, v: np.ndarray) -> np.ndarray:
        """Regression coefficients of v on the design columns."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.n:
            raise ValueError(f"length mismatch: projector has n={self.n}, v has {v.shape[0]}")
        return scipy.linalg.cho_solve(self._cho, self._PsiT @ v, check_finite=False)

    def project(self, v: np.ndarray) -> np.ndarray:
        """Fitted values of the least-squares regression of v on the design."""
        return self.Psi @ self.coefficients(v)


def fit_projector(Psi: np.ndarray, ridge: float | None = None) -> InstrumentProjector:
    """Factor the Gram matrix once for repeated projections.

    ridge=None applies the default ridge guard; pass ridge=0.0 for the exact
    orthogonal projection (raises if the Gram matrix is singular).
    """
    Psi = np.ascontiguousarray(np.atleast_2d(Psi), dtype=np.float64)
    if ridge is None:
        ridge = default_ridge(Psi)
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    gram = Psi.T @ Psi + ridge * np.eye(Psi.shape[1])
    try:
        cho = scipy.linalg.cho_factor(gram)
    except scipy.linalg.LinAlgError as exc:
        raise ValueError(
            "singular Gram matrix with ridge=0; refit with ridge > 0"
        ) from exc
    # LAPACK can return a rounding-level pivot instead of failing outright
    diag = np.abs(np.diag(cho[0]))
    if (diag.min() / diag.max()) ** 2 < 1e-12:
        raise ValueError("singular Gram matrix with ridge=0; refit with ridge > 0")
    rank = int(np.linalg.matrix_rank(Psi))
    return InstrumentProjector(Psi=Psi, ridge=float(ridge), _cho=cho, effective_rank=rank)
