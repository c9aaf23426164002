"""Panel data containers and design assembly."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd


class DataValidationError(ValueError):
    """Raised when a dataset violates the panel-data contract."""


@dataclass
class UnitRecord:
    """All observations of one unit, ordered by time."""

    unit_id: object
    time: np.ndarray
    y: np.ndarray
    s: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=int).ravel()
        self.y = np.asarray(self.y, dtype=float).ravel()
        T = self.time.size
        self.s = np.asarray(self.s, dtype=float).reshape(T, -1)
        self.x = np.asarray(self.x, dtype=float).reshape(T, -1)
        if T < 1:
            raise DataValidationError(f"unit {self.unit_id!r} has no observations")
        if self.y.size != T:
            raise DataValidationError(f"unit {self.unit_id!r}: outcome length mismatch")
        if np.any(np.diff(self.time) <= 0):
            raise DataValidationError(
                f"unit {self.unit_id!r}: time indices must be strictly increasing")

    @property
    def n_obs(self) -> int:
        return self.time.size


@dataclass
class PanelDataset:
    units: list
    covariate_names_binary: list = field(default_factory=list)
    covariate_names_positive: list = field(default_factory=list)

    def __post_init__(self):
        m, p = len(self.covariate_names_binary), len(self.covariate_names_positive)
        for u in self.units:
            if u.s.shape[1] != m or u.x.shape[1] != p:
                raise DataValidationError(
                    f"unit {u.unit_id!r}: covariate dimensions {u.s.shape[1]}, "
                    f"{u.x.shape[1]} do not match names ({m}, {p})")

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def n_obs(self) -> int:
        return sum(u.n_obs for u in self.units)

    def outcomes(self) -> np.ndarray:
        if not self.units:
            return np.empty(0)
        return np.concatenate([u.y for u in self.units])

    def with_outcomes(self, y) -> "PanelDataset":
        """Copy of the dataset with the stacked outcome vector replaced."""
        y = np.asarray(y, dtype=float)
        if y.size != self.n_obs:
            raise ValueError("outcome vector has the wrong length")
        units, start = [], 0
        for u in self.units:
            stop = start + u.n_obs
            units.append(UnitRecord(u.unit_id, u.time.copy(), y[start:stop].copy(),
                                    u.s.copy(), u.x.copy()))
            start = stop
        return PanelDataset(units, list(self.covariate_names_binary),
                            list(self.covariate_names_positive))

    @classmethod
    def from_frame(cls, df: pd.DataFrame, binary_cols: Sequence[str],
                   positive_cols: Sequence[str], unit_col="unit_id",
                   time_col="time", y_col="y") -> "PanelDataset":
        """Build a dataset from a long-format frame (one row per unit-time)."""
        missing = [c for c in [unit_col, time_col, y_col, *binary_cols, *positive_cols]
                   if c not in df.columns]
        if missing:
            raise DataValidationError(f"missing columns: {missing}")
        if df.empty:
            raise DataValidationError("dataset is empty")
        units = []
        for uid, g in df.groupby(unit_col, sort=False):
            g = g.sort_values(time_col, kind="stable")
            units.append(UnitRecord(uid, g[time_col].to_numpy(), g[y_col].to_numpy(),
                                    g[list(binary_cols)].to_numpy(dtype=float),
                                    g[list(positive_cols)].to_numpy(dtype=float)))
        return cls(units, list(binary_cols), list(positive_cols))

    def to_frame(self, unit_col="unit_id", time_col="time", y_col="y") -> pd.DataFrame:
        """Long-format frame; covariates shared by both blocks appear once."""
        rows = []
        names = list(dict.fromkeys(self.covariate_names_binary
                                   + self.covariate_names_positive))
        for u in self.units:
            cols = {n: u.s[:, j] for j, n in enumerate(self.covariate_names_binary)}
            cols.update({n: u.x[:, j]
                         for j, n in enumerate(self.covariate_names_positive)})
            frame = pd.DataFrame({unit_col: [u.unit_id] * u.n_obs, time_col: u.time,
                                  y_col: u.y, **{n: cols[n] for n in names}})
            rows.append(frame)
        return pd.concat(rows, ignore_index=True)


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _standardize(M, names, block):
    if M.shape[1] == 0:
        return M, np.zeros(0), np.ones(0)
    center = M.mean(axis=0)
    scale = M.std(axis=0)
    flat = scale <= 1e-12 * np.maximum(1.0, np.abs(center))
    if np.any(flat):
        bad = [names[j] for j in np.flatnonzero(flat)]
        raise DataValidationError(
            f"constant {block} covariates {bad} are not identifiable next to the "
            "component intercepts")
    return (M - center) / scale, center, scale


@dataclass(frozen=True)
class PreparedData:
    """Stacked, immutable arrays consumed by the fitters.

    ``d`` flags zero outcomes, ``y_log`` holds ``log(y)`` on positive rows and
    NaN elsewhere. ``S`` and ``X`` are the (standardized) covariate blocks;
    ``unit_index`` maps rows to units ``0 .. n_units - 1``.
    """

    d: np.ndarray
    y_log: np.ndarray
    S: np.ndarray
    X: np.ndarray
    unit_index: np.ndarray
    n_units: int
    unit_ids: tuple
    times: np.ndarray
    names_binary: tuple = ()
    names_positive: tuple = ()
    s_center: np.ndarray = field(default_factory=lambda: np.zeros(0))
    s_scale: np.ndarray = field(default_factory=lambda: np.ones(0))
    x_center: np.ndarray = field(default_factory=lambda: np.zeros(0))
    x_scale: np.ndarray = field(default_factory=lambda: np.ones(0))

    @property
    def n_obs(self) -> int:
        return self.d.size

    @property
    def pos(self) -> np.ndarray:
        return ~self.d

    @property
    def n_pos(self) -> int:
        return int(np.count_nonzero(~self.d))

    def subset(self, units) -> "PreparedData":
        """Restrict to the given unit positions, keeping the standardization."""
        units = np.sort(np.asarray(units, dtype=int))
        remap = np.full(self.n_units, -1)
        remap[units] = np.arange(units.size)
        rows = np.flatnonzero(remap[self.unit_index] >= 0)
        return PreparedData(
            d=_readonly(self.d[rows]), y_log=_readonly(self.y_log[rows]),
            S=_readonly(self.S[rows]), X=_readonly(self.X[rows]),
            unit_index=_readonly(remap[self.unit_index[rows]]), n_units=units.size,
            unit_ids=tuple(self.unit_ids[i] for i in units),
            times=_readonly(self.times[rows]), names_binary=self.names_binary,
            names_positive=self.names_positive, s_center=self.s_center,
            s_scale=self.s_scale, x_center=self.x_center, x_scale=self.x_scale)


def prepare(data: PanelDataset, standardize=True, zero_threshold=0.0) -> PreparedData:
    """Split outcomes into zero indicators and log-positive values.

    An outcome counts as zero when it equals 0.0, or when its magnitude is
    below ``zero_threshold`` if that is positive.
    """
    if data.n_units == 0 or data.n_obs == 0:
        raise DataValidationError("dataset is empty")
    y = data.outcomes()
    unit_index = np.repeat(np.arange(data.n_units), [u.n_obs for u in data.units])
    times = np.concatenate([u.time for u in data.units])
    bad = np.flatnonzero(~(y >= 0))
    if bad.size:
        where = [(data.units[unit_index[r]].unit_id, int(times[r])) for r in bad[:20]]
        raise DataValidationError(f"negative or missing outcomes at (unit, time): {where}")
    S = np.vstack([u.s for u in data.units])
    X = np.vstack([u.x for u in data.units])
    for M, block in ((S, "binary"), (X, "positive")):
        if not np.all(np.isfinite(M)):
            r = int(np.flatnonzero(~np.all(np.isfinite(M), axis=1))[0])
            raise DataValidationError(
                f"non-finite {block} covariate at unit "
                f"{data.units[unit_index[r]].unit_id!r}, time {int(times[r])}")

    d = (y == 0.0) | (np.abs(y) < zero_threshold)
    y_log = np.full(y.shape, np.nan)
    y_log[~d] = np.log(y[~d])

    names_b, names_p = tuple(data.covariate_names_binary), tuple(data.covariate_names_positive)
    if standardize:
        S, s_center, s_scale = _standardize(S, names_b, "binary")
        X, x_center, x_scale = _standardize(X, names_p, "positive")
    else:
        s_center, s_scale = np.zeros(S.shape[1]), np.ones(S.shape[1])
        x_center, x_scale = np.zeros(X.shape[1]), np.ones(X.shape[1])

    return PreparedData(
        d=_readonly(d), y_log=_readonly(y_log), S=_readonly(S), X=_readonly(X),
        unit_index=_readonly(unit_index), n_units=data.n_units,
        unit_ids=tuple(u.unit_id for u in data.units), times=_readonly(times),
        names_binary=names_b, names_positive=names_p,
        s_center=_readonly(s_center), s_scale=_readonly(s_scale),
        x_center=_readonly(x_center), x_scale=_readonly(x_scale))


def zero_fraction(data: PanelDataset) -> float:
    """Share of observations with a zero outcome."""
    y = data.outcomes()
    if y.size == 0:
        raise DataValidationError("dataset is empty")
    return float(np.mean(y == 0.0))
