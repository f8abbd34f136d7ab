"""Time-series ingestion, variable roles, and Markov lag-frame construction.

A :class:`TimeSeriesDataset` holds named, equal-length numeric columns in
time order, each tagged with a role (outcome, endogenous, instrument, or the
RL roles state/action/reward).  :func:`build_lag_frame` turns a dataset into
the aligned arrays used by the estimation machinery: the stacked instrument
matrix ``X`` (conditioning information), the function-input matrix ``W`` and
the outcome vector ``Y``.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

ROLES = ("outcome", "endogenous", "instrument", "state", "action", "reward")


@dataclass
class TimeSeriesDataset:
    """Aligned time-indexed numeric columns with declared variable roles."""

    t_index: np.ndarray
    columns: dict[str, np.ndarray]
    roles: dict[str, str]
    n_dropped: int = 0

    def __post_init__(self):
        self.t_index = np.asarray(self.t_index, dtype=np.int64)
        self.columns = {k: np.asarray(v, dtype=np.float64) for k, v in self.columns.items()}
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) != 1:
            raise ValueError(f"columns have unequal lengths: {sorted(lengths)}")
        n = lengths.pop()
        if len(self.t_index) != n:
            raise ValueError("t_index length does not match columns")
        if n > 1 and not np.all(np.diff(self.t_index) > 0):
            raise ValueError("time index must be strictly increasing")
        for name, col in self.columns.items():
            if not np.all(np.isfinite(col)):
                raise ValueError(f"column {name!r} contains non-finite values")
        for name, role in self.roles.items():
            if name not in self.columns:
                raise ValueError(f"unknown column {name!r} in role map")
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r} for column {name!r}")

    @property
    def n(self) -> int:
        return len(self.t_index)

    def names_with_role(self, role: str) -> list[str]:
        """Column names carrying `role`, in insertion order."""
        return [name for name in self.columns if self.roles.get(name) == role]

    def column(self, name: str) -> np.ndarray:
        return self.columns[name]


def load_csv(path, role_map: dict[str, str]) -> TimeSeriesDataset:
    """Read a numeric CSV (header row, UTF-8) into a dataset.

    Rows with any cell that is empty, non-numeric, or non-finite are
    dropped; the drop count is recorded on the dataset.  Every key of
    `role_map` must name a column of the file.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"empty file: {path}") from None
        header = [h.strip() for h in header]
        for name in role_map:
            if name not in header:
                raise ValueError(f"unknown column {name!r}: file has {header}")
        rows, kept_idx, dropped = [], [], 0
        for i, raw in enumerate(reader):
            if len(raw) != len(header):
                dropped += 1
                continue
            try:
                vals = [float(cell) for cell in raw]
            except ValueError:
                dropped += 1
                continue
            if any(math.isnan(v) or math.isinf(v) for v in vals):
                dropped += 1
                continue
            rows.append(vals)
            kept_idx.append(i)
    if not rows:
        raise ValueError(f"zero usable rows in {path} ({dropped} dropped)")
    data = np.asarray(rows, dtype=np.float64)
    columns = {name: data[:, j] for j, name in enumerate(header)}
    return TimeSeriesDataset(
        t_index=np.asarray(kept_idx, dtype=np.int64),
        columns=columns,
        roles=dict(role_map),
        n_dropped=dropped,
    )


def write_csv(ds: TimeSeriesDataset, path) -> None:
    """Write the dataset columns to CSV with full double precision.

    The %.17g format round-trips finite IEEE-754 doubles bit-exactly, so
    load_csv(write_csv(ds)) reproduces the numeric content.
    """
    names = list(ds.columns)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        mat = np.column_stack([ds.columns[m] for m in names])
        for row in mat:
            writer.writerow(["%.17g" % v for v in row])


@dataclass
class LagFrame:
    """Aligned estimation arrays derived from a dataset.

    Row i corresponds to conditioning time t = i + r:

    * ``X[i]`` stacks the instrument columns at lags 0..r (lag-major),
    * ``Y[i]`` is the outcome at time t + outcome_lead,
    * ``W[i]`` holds the function inputs: endogenous columns at time t,
      followed by any instrument columns requested via h_instrument_cols.

    ``extra`` carries model-specific aligned arrays (e.g. next states for
    Bellman residuals).  Arrays are marked read-only; frames are safe to
    share across parallel workers.
    """

    X: np.ndarray
    W: np.ndarray
    Y: np.ndarray
    r: int
    x_names: list[str]
    w_names: list[str]
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.ascontiguousarray(np.atleast_2d(self.X), dtype=np.float64)
        self.W = np.ascontiguousarray(np.atleast_2d(self.W), dtype=np.float64)
        self.Y = np.ascontiguousarray(self.Y, dtype=np.float64)
        if not (self.X.shape[0] == self.W.shape[0] == len(self.Y)):
            raise ValueError("X, W, Y row counts differ")
        if self.n < 1:
            raise ValueError("empty lag frame")
        for arr in (self.X, self.W, self.Y):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return len(self.Y)

    def w_col(self, name: str) -> int:
        """Index of a named column of W."""
        return self.w_names.index(name)


def build_lag_frame(
    ds: TimeSeriesDataset,
    r: int,
    outcome_lead: int = 1,
    h_instrument_cols: list[str] | None = None,
) -> LagFrame:
    """Build the lag frame: instruments stacked at lags 0..r, outcome led.

    `h_instrument_cols` names instrument-role columns whose lag-0 values
    are appended to W after the endogenous columns, for models where
    conditioning variables also enter the unknown function.
    """
    if r < 0:
        raise ValueError("lag order r must be nonnegative")
    if outcome_lead < 0:
        raise ValueError("outcome_lead must be nonnegative")
    outcome_names = ds.names_with_role("outcome")
    if len(outcome_names) != 1:
        raise ValueError(f"need exactly one outcome column, have {outcome_names}")
    inst_names = ds.names_with_role("instrument")
    if not inst_names:
        raise ValueError("no instrument columns declared")
    n = ds.n - r - outcome_lead
    if n < 1:
        raise ValueError(
            f"insufficient rows: n_raw={ds.n} with r={r}, outcome_lead={outcome_lead}"
        )
    t = np.arange(r, r + n)  # conditioning times, one per frame row

    x_blocks, x_names = [], []
    for lag in range(r + 1):
        for name in inst_names:
            x_blocks.append(ds.columns[name][t - lag])
            x_names.append(name if lag == 0 else f"{name}.l{lag}")
    X = np.column_stack(x_blocks)

    w_blocks, w_names = [], []
    for name in ds.names_with_role("endogenous"):
        w_blocks.append(ds.columns[name][t])
        w_names.append(name)
    for name in h_instrument_cols or []:
        if ds.roles.get(name) != "instrument":
            raise ValueError(f"h_instrument_cols entry {name!r} is not an instrument column")
        w_blocks.append(ds.columns[name][t])
        w_names.append(name)
    if not w_blocks:
        # fully exogenous model: the function inputs are the conditioning
        # variables themselves (lag 0)
        for name in inst_names:
            w_blocks.append(ds.columns[name][t])
            w_names.append(name)
    W = np.column_stack(w_blocks)

    Y = ds.columns[outcome_names[0]][t + outcome_lead]
    return LagFrame(X=X, W=W, Y=Y, r=r, x_names=x_names, w_names=w_names)
