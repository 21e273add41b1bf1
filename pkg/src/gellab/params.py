"""Model parameters, grids, and sampled fields.

The whole package works with the product kernel K(x,y) = (x y)^{lam/2} for
1 < lam < 2.  Everything downstream hangs off the derived exponents

    r     = (lam - 1) / 2          scaling exponent of the local time
    p_bar = (3 + lam) / 2 + delta_bar   weighted-sup weight for remainders

and the two smallness parameters delta > delta_bar > 0 used in tail bounds.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError

__all__ = [
    "ModelParams",
    "LogGrid",
    "Field",
    "Trajectory",
    "write_field_csv",
    "write_trajectory_csv",
    "read_trajectory_csv",
]

## ---------------------------------------------------------------- params


@dataclass(frozen=True)
class ModelParams:
    """Kernel exponent and the constants entering the initial data.

    delta / delta_bar default to safe fractions of their allowed ranges:
    delta < min{r, (2-lam)/2} and delta_bar < min{r, delta}.
    """

    lam: float = 1.5
    sigma: float = 1.5
    D1: float = 1.0
    D2: float = 1.0
    B: float = 1.0
    T: float = 0.05
    delta: float = None  # type: ignore[assignment]
    delta_bar: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if not (1.0 < self.lam < 2.0):
            raise ConfigError(
                "params.lam",
                f"kernel exponent must lie in the open interval (1, 2), got {self.lam}",
            )
        if not (1.0 < self.sigma < 2.0):
            raise ConfigError(
                "params.sigma",
                f"regularity order must lie in (1, 2), got {self.sigma}",
            )
        if self.T <= 0:
            raise ConfigError("params.T", f"horizon must be positive, got {self.T}")
        if self.D1 <= 0:
            raise ConfigError("params.D1", f"leading amplitude must be positive, got {self.D1}")
        if self.B < 0:
            raise ConfigError("params.B", f"remainder bound must be nonnegative, got {self.B}")
        dmax = min(self.r, (2.0 - self.lam) / 2.0)
        if self.delta is None:
            object.__setattr__(self, "delta", 0.5 * dmax)
        if not (0.0 < self.delta < dmax):
            raise ConfigError(
                "params.delta",
                f"must lie in (0, min{{r, (2-lam)/2}}) = (0, {dmax:.6g}), got {self.delta}",
            )
        if self.delta_bar is None:
            object.__setattr__(self, "delta_bar", 0.5 * min(self.r, self.delta))
        if not (0.0 < self.delta_bar < min(self.r, self.delta)):
            raise ConfigError(
                "params.delta_bar",
                f"must lie in (0, min{{r, delta}}), got {self.delta_bar}",
            )

    @property
    def r(self) -> float:
        return (self.lam - 1.0) / 2.0

    @property
    def p_bar(self) -> float:
        return (3.0 + self.lam) / 2.0 + self.delta_bar

    @property
    def power_main(self) -> float:
        """Exponent of the leading power-law profile."""
        return (3.0 + self.lam) / 2.0

    def with_(self, **kw) -> "ModelParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["r"] = self.r
        d["p_bar"] = self.p_bar
        return d


## ------------------------------------------------------------------ grid


@dataclass(frozen=True)
class LogGrid:
    """Geometric grid on [x_min, x_max] with n nodes.

    The node ratio is constant to 1e-12 by construction.  x_min must sit
    below the lower cutoff foot (1/8) and x_max above the upper one (4) so
    both transition regions of the localizers are resolved.
    """

    x_min: float = 2.0 ** -6
    x_max: float = 2.0 ** 14
    n: int = 2048

    def __post_init__(self):
        if self.n < 8:
            raise ConfigError("grid.n", f"need at least 8 nodes, got {self.n}")
        if not (0.0 < self.x_min < self.x_max):
            raise ConfigError("grid.x_min", "need 0 < x_min < x_max")
        if self.x_min >= 0.125:
            raise ConfigError(
                "grid.x_min", f"must be < 1/8 to resolve the lower cutoff, got {self.x_min}"
            )
        if self.x_max <= 4.0:
            raise ConfigError(
                "grid.x_max", f"must be > 4 to resolve the upper cutoff, got {self.x_max}"
            )

    @property
    def nodes(self) -> np.ndarray:
        # geomspace keeps the ratio constant to ~1 ulp
        return np.geomspace(self.x_min, self.x_max, self.n)

    @property
    def log_nodes(self) -> np.ndarray:
        return np.log(self.nodes)

    @property
    def decades(self) -> float:
        return float(np.log10(self.x_max / self.x_min))

    def refined(self, factor: int = 2) -> "LogGrid":
        return LogGrid(self.x_min, self.x_max, (self.n - 1) * factor + 1)

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "n": self.n}


## ----------------------------------------------------------------- field


@dataclass
class Field:
    """Values of a scalar field sampled on a LogGrid."""

    grid: LogGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n,):
            raise ConfigError(
                "field.values",
                f"shape {self.values.shape} does not match grid size {self.grid.n}",
            )

    @property
    def x(self) -> np.ndarray:
        return self.grid.nodes

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())

    def weighted_sup(self, q: float, p: float) -> float:
        """sup_{x<=1} x^q |f| + sup_{x>1} x^p |f| on the grid."""
        x = self.x
        v = np.abs(self.values)
        lo = x <= 1.0
        s1 = float(np.max(x[lo] ** q * v[lo])) if lo.any() else 0.0
        s2 = float(np.max(x[~lo] ** p * v[~lo])) if (~lo).any() else 0.0
        return s1 + s2


@dataclass
class Trajectory:
    """Time-indexed family of fields on a common grid.

    values has shape (len(times), grid.n); times[0] == 0 by convention.
    """

    grid: LogGrid
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.times.size, self.grid.n):
            raise ConfigError(
                "trajectory.values",
                f"shape {self.values.shape} inconsistent with "
                f"({self.times.size}, {self.grid.n})",
            )
        if self.times.size and abs(self.times[0]) > 1e-15:
            raise ConfigError("trajectory.times", "first time must be 0")

    def at(self, i: int) -> Field:
        return Field(self.grid, self.values[i].copy())

    def interp(self, t: float) -> Field:
        """Linear-in-time interpolant (fields vary smoothly in time)."""
        ts = self.times
        if t <= ts[0]:
            return self.at(0)
        if t >= ts[-1]:
            return self.at(len(ts) - 1)
        j = int(np.searchsorted(ts, t, side="right") - 1)
        th = (t - ts[j]) / (ts[j + 1] - ts[j])
        return Field(self.grid, (1 - th) * self.values[j] + th * self.values[j + 1])


## ------------------------------------------------------------------- io

_FMT = "%.17g"


def write_field_csv(path, f: Field, tau: float = 0.0) -> None:
    write_trajectory_csv(path, Trajectory(f.grid, np.array([0.0]), f.values[None, :]), tau0=tau)


def write_trajectory_csv(path, traj: Trajectory, tau0: float = 0.0) -> None:
    """CSV with header tau,x,f — one row per (time, node), 17 significant digits."""
    x = traj.grid.nodes
    buf = io.StringIO()
    buf.write("tau,x,f\n")
    for i, t in enumerate(traj.times):
        ts = _FMT % (t + tau0)
        row = traj.values[i]
        for j in range(x.size):
            buf.write(f"{ts},{_FMT % x[j]},{_FMT % row[j]}\n")
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_trajectory_csv(path) -> Trajectory:
    taus, xs, vals = [], [], []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if [h.strip() for h in header] != ["tau", "x", "f"]:
            raise ConfigError("csv.header", f"expected tau,x,f got {header}")
        for row in rd:
            taus.append(float(row[0]))
            xs.append(float(row[1]))
            vals.append(float(row[2]))
    taus = np.asarray(taus)
    xs = np.asarray(xs)
    vals = np.asarray(vals)
    t_unique = np.unique(taus)
    x_unique = xs[taus == t_unique[0]]
    n = x_unique.size
    grid = LogGrid(float(x_unique[0]), float(x_unique[-1]), n)
    values = vals.reshape(t_unique.size, n)
    return Trajectory(grid, t_unique - t_unique[0], values)


def dump_manifest(path, payload: dict) -> None:
    """Write the resolved-configuration manifest next to run outputs."""

    def _default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(f"not JSON-serializable: {type(o)}")

    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_default)
        fh.write("\n")
