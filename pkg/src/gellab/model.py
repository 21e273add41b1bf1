"""Initial data for the gelling box: smooth cutoffs, the power-law core,
and the decaying remainder.

The reference profile is

    f0(x) = D1 xi(x) x^(-(3+lam)/2) + D2 xi(x) x^(-((3+lam)/2+r)) + f3(x)

with xi a smooth switch that vanishes for x <= 1/2 and equals 1 for x >= 1,
and f3 a smooth bounded remainder decaying like x^(-((3+lam)/2+r+delta)).
h0 = f0 - f1 collects everything below the leading power.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError
from .fieldmath import gauss_legendre
from .params import Field, LogGrid, ModelParams

__all__ = [
    "smoothstep",
    "cutoff_xi",
    "cutoff_eta",
    "initial_data",
    "pure_power_field",
    "check_initial_data",
    "InitialData",
]


## ------------------------------------------------------------ smoothstep


def _bump(s):
    out = np.zeros_like(s)
    inside = (s > 0.0) & (s < 1.0)
    si = s[inside]
    out[inside] = np.exp(-1.0 / (si * (1.0 - si)))
    return out


@lru_cache(maxsize=1)
def _bump_norm() -> float:
    g, w = gauss_legendre(96)
    return float(np.sum(w * _bump(g)))


def smoothstep(t):
    """C-infinity ramp: 0 for t <= 0, 1 for t >= 1, strictly increasing
    in between (normalized integral of exp(-1/(s(1-s))))."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape)
    out[t >= 1.0] = 1.0
    mid = (t > 0.0) & (t < 1.0)
    if mid.any():
        tm = t[mid]
        g, w = gauss_legendre(96)
        # integral over [0, t] with nodes scaled per query point
        s = tm[:, None] * g[None, :]
        vals = np.sum(w[None, :] * _bump(s), axis=1) * tm
        out[mid] = vals / _bump_norm()
    return out


def cutoff_xi(x):
    """Lower switch: 0 on (0, 1/2], 1 on [1, inf)."""
    x = np.asarray(x, dtype=float)
    return smoothstep((x - 0.5) / 0.5)


def cutoff_eta(x):
    """Window: 1 on [1/4, 3], 0 outside (1/8, 4)."""
    x = np.asarray(x, dtype=float)
    rise = smoothstep((x - 0.125) / 0.125)
    fall = 1.0 - smoothstep(x - 3.0)
    return rise * fall


## ----------------------------------------------------------- initial data


@dataclass
class InitialData:
    params: ModelParams
    f0: Field
    f1: Field
    f2: Field
    f3: Field
    h0: Field
    remainder_mode: str = "default"


def _default_f3(params: ModelParams, x: np.ndarray) -> np.ndarray:
    q = params.power_main + params.r + params.delta
    return params.B * (1.0 + x) ** (-q)


def initial_data(
    params: ModelParams,
    grid: LogGrid,
    remainder_mode: str = "default",
    f3_callable=None,
) -> InitialData:
    """Assemble (f0, f1, f2, f3, h0) on the grid.

    remainder_mode: 'default' uses B(1+x)^(-((3+lam)/2+r+delta)); 'zero'
    drops the remainder; 'custom' takes f3_callable(x).
    """
    x = grid.nodes
    xi = cutoff_xi(x)
    pm = params.power_main
    f1 = params.D1 * xi * x ** (-pm)
    f2 = params.D2 * xi * x ** (-(pm + params.r))
    if remainder_mode == "default":
        f3 = _default_f3(params, x)
    elif remainder_mode == "zero":
        f3 = np.zeros_like(x)
    elif remainder_mode == "custom":
        if f3_callable is None:
            raise ConfigError("initial_data.f3", "custom mode needs a callable")
        f3 = np.asarray(f3_callable(x), dtype=float)
        if f3.shape != x.shape:
            raise ConfigError("initial_data.f3", "callable must return one value per node")
    else:
        raise ConfigError(
            "initial_data.remainder_mode",
            f"must be one of default|zero|custom, got {remainder_mode!r}",
        )
    f0 = f1 + f2 + f3
    return InitialData(
        params=params,
        f0=Field(grid, f0),
        f1=Field(grid, f1),
        f2=Field(grid, f2),
        f3=Field(grid, f3),
        h0=Field(grid, f2 + f3),
        remainder_mode=remainder_mode,
    )


def pure_power_field(params: ModelParams, grid: LogGrid) -> Field:
    """The uncut leading profile D1 x^(-(3+lam)/2) — the exact steady shape
    of the dominant balance, used by the annihilation diagnostics."""
    x = grid.nodes
    return Field(grid, params.D1 * x ** (-params.power_main))


## ---------------------------------------------------------------- checks


def check_initial_data(data: InitialData, n_deriv: int = 4) -> dict:
    """Structure report: cutoff plateaus, fitted tail exponents, remainder
    derivative-bound constants, positivity, and low moments."""
    p = data.params
    grid = data.f0.grid
    x = grid.nodes
    report: dict = {}

    # cutoff plateaus
    xi = cutoff_xi(x)
    lo = x <= 0.5
    hi = x >= 1.0
    report["xi_plateau_low"] = float(np.max(np.abs(xi[lo]))) if lo.any() else 0.0
    report["xi_plateau_high"] = float(np.max(np.abs(xi[hi] - 1.0))) if hi.any() else 0.0
    eta = cutoff_eta(x)
    mid = (x >= 0.25) & (x <= 3.0)
    out = (x <= 0.125) | (x >= 4.0)
    report["eta_plateau_mid"] = float(np.max(np.abs(eta[mid] - 1.0))) if mid.any() else 0.0
    report["eta_outside"] = float(np.max(np.abs(eta[out]))) if out.any() else 0.0

    # tail exponents over the last decade (f0 should ride the leading power)
    sel = x >= grid.x_max / 10.0
    lx = np.log(x[sel])

    def fit(v):
        vv = v[sel]
        if np.all(vv > 0):
            A = np.vstack([lx, np.ones_like(lx)]).T
            sol, *_ = np.linalg.lstsq(A, np.log(vv), rcond=None)
            return float(sol[0])
        return float("nan")

    report["tail_exp_f0"] = fit(data.f0.values)
    report["tail_exp_h0"] = fit(np.abs(data.h0.values)) if np.any(data.h0.values) else float("nan")
    report["tail_exp_expected_f0"] = -p.power_main
    report["tail_exp_expected_h0"] = -(p.power_main + p.r)

    # remainder derivative bounds: for the default profile B(1+x)^(-q) the
    # k-th derivative is exactly B * prod_{j<k}(q+j) * (1+x)^(-(q+k)), so the
    # bound constants are the products themselves.
    if data.remainder_mode == "default":
        q = p.power_main + p.r + p.delta
        consts = []
        c = 1.0
        for k in range(n_deriv + 1):
            consts.append(p.B * c)
            c *= q + k
        report["f3_deriv_bound_constants"] = consts
    else:
        report["f3_deriv_bound_constants"] = None

    # pointwise size of h0 against its natural envelope
    env = (1.0 + x) ** (-(p.power_main + p.r))
    report["h0_envelope_constant"] = float(np.max(np.abs(data.h0.values) / env))

    report["f0_min"] = float(np.min(data.f0.values))
    report["positive"] = bool(np.all(data.f0.values > 0.0))

    # low moments on the grid (trapezoid in log coordinates is plenty here)
    t = np.log(x)
    for k, key in ((0.0, "M0_grid"), (p.lam / 2.0, "M_half_lam_grid"), (1.0, "M1_grid")):
        report[key] = float(np.trapezoid(x ** (k + 1) * data.f0.values, t))
    return report
