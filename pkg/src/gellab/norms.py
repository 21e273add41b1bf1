"""Weighted space-time functionals for the gelling-solution diagnostics.

The solution classes are measured on dyadic windows (R/2, 2R) with time
windows whose length R^-(lam-1)/2 shrinks with the window scale: local
L2/Linf contributions N and M, assembled into Y/X norms and weighted sup
(triple) norms, plus a Fourier-weighted seminorm of half-derivative type
built from eta-windowed, rescaled space-time blocks.

Suprema over scales are taken on dyadic R ladders and a uniform t0 ladder
(the integrands are log-Lipschitz in R for the fields at hand); ladder
density is exposed as a knob.  FFT windows are resampled uniformly with
monotone cubic interpolation from the log grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import ConfigError, NumericsError
from .fieldmath import tail_fit
from .model import cutoff_eta
from .params import Field, ModelParams, Trajectory

__all__ = [
    "NormReport",
    "frac_deriv",
    "local_norm",
    "space_norm",
    "w_r_audit",
    "tail_fit",
]


@dataclass
class NormReport:
    kind: str
    value: float
    window: tuple | None = None
    details: dict = field(default_factory=dict)


## ------------------------------------------- fractional derivative window


def frac_deriv(x, values, sigma, R=None, n_fft=1024):
    """|D_x|^sigma of the eta-windowed samples, via the Fourier symbol |k|^sigma.

    The samples must cover the padded window (the support of eta(x/R),
    i.e. (R/8, 4R)); R defaults to x[-1]/4.  The signal is resampled
    uniformly (monotone cubic), windowed by eta(x/R), transformed,
    multiplied by |k|^sigma and inverted.  Returns (x_uniform, d_values);
    restrict to (R/2, 2R) before taking window norms.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(values, dtype=float)
    if x.size < 64:
        raise NumericsError(
            "norms.frac_deriv", f"window holds {x.size} samples; need >= 64"
        )
    if not (0.0 <= sigma < 2.0):
        raise ConfigError("norms.sigma", f"must lie in [0, 2), got {sigma}")
    if R is None:
        R = float(x[-1]) / 4.0
    n = int(n_fft)
    xu = np.linspace(x[0], x[-1], n)
    vu = PchipInterpolator(x, v)(xu)
    w = cutoff_eta(xu / R) * vu
    dx = xu[1] - xu[0]
    W = np.fft.rfft(w)
    k = 2.0 * math.pi * np.fft.rfftfreq(n, d=dx)
    W *= np.abs(k) ** sigma
    return xu, np.fft.irfft(W, n)


## ----------------------------------------------------- local window norms

_L2_KINDS = ("N2sigma", "M2sigma")
_INF_KINDS = ("Ninf", "Minf")


def _interp_window(f: Field, lo, hi):
    """Window samples including exact endpoints (log-linear edge interp)."""
    x = f.x
    inside = (x > lo) & (x < hi)
    xs = np.concatenate([[lo], x[inside], [hi]])
    lv = np.interp(np.log([lo, hi]), np.log(x), f.values)
    vs = np.concatenate([[lv[0]], f.values[inside], [lv[1]]])
    return xs, vs


def _space_value(f: Field, kind, R, sigma):
    if kind in _INF_KINDS:
        xs, vs = _interp_window(f, R / 2.0, 2.0 * R)
        return float(np.max(np.abs(vs)))
    if sigma == 0.0:
        xs, vs = _interp_window(f, R / 2.0, 2.0 * R)
        return math.sqrt(float(np.trapezoid(vs * vs, xs)))
    xs, vs = _interp_window(f, R / 8.0, 4.0 * R)
    xu, dv = frac_deriv(xs, vs, sigma, R=R)
    sel = (xu >= R / 2.0) & (xu <= 2.0 * R)
    return math.sqrt(float(np.trapezoid(dv[sel] ** 2, xu[sel])))


def _check_window(grid, kind, R, sigma):
    pad = 8.0 if (kind in _L2_KINDS and sigma > 0.0) else 2.0
    if R / pad < grid.x_min * 0.999 or pad * R / 2.0 * 2.0 > grid.x_max * 1.001:
        raise NumericsError(
            "norms.window",
            f"window for R={R:g} (pad {pad:g}) falls outside the grid "
            f"[{grid.x_min:g}, {grid.x_max:g}]",
        )


def local_norm(traj: Trajectory, kind, t0, R, sigma=0.0, params=None) -> NormReport:
    """One space-time window contribution.

    N-kinds integrate over [t0, min(t0 + R^-(lam-1)/2, T)] with the
    R^((lam-1)/2) anisotropic prefactor; M-kinds integrate over [0, T].
    The 2-kinds take L2(R/2, 2R) of |D^sigma f| (sigma = 0 is a plain
    window L2), the inf-kinds the window sup.
    """
    params = params or ModelParams()
    if kind not in _L2_KINDS + _INF_KINDS:
        raise ConfigError("norms.kind", f"unknown local norm kind {kind!r}")
    T = float(traj.times[-1])
    if not (0.0 <= t0 <= T):
        raise ConfigError("norms.t0", f"t0={t0:g} outside [0, {T:g}]")
    if R <= 0.0:
        raise ConfigError("norms.R", "window scale R must be positive")
    _check_window(traj.grid, kind, R, sigma)

    alpha = (params.lam - 1.0) / 2.0
    if kind in ("N2sigma", "Ninf"):
        t_lo, t_hi = t0, min(t0 + R ** (-alpha), T)
    else:
        t_lo, t_hi = 0.0, T
    ts = traj.times[(traj.times > t_lo) & (traj.times < t_hi)]
    ts = np.concatenate([[t_lo], ts, [t_hi]])

    vals = np.array([_space_value(traj.interp(t), kind, R, sigma) for t in ts])
    time_int = float(np.trapezoid(vals * vals, ts))

    if kind == "N2sigma":
        pref = R ** (alpha + 2.0 * sigma - 1.0)
    elif kind == "M2sigma":
        pref = R ** (2.0 * sigma - 1.0)
    elif kind == "Ninf":
        pref = R**alpha
    else:
        pref = 1.0
    value = math.sqrt(pref * time_int)
    return NormReport(
        kind,
        value,
        window=(t0, R) if kind in ("N2sigma", "Ninf") else (R,),
        details={"t_window": (t_lo, t_hi), "n_t": int(ts.size), "sigma": sigma},
    )


## --------------------------------------------------- assembled norm suites


def _r_ladders(grid, need_pad):
    """Dyadic R ladders: small scales (R <= 1) and large (R >= 1), kept
    inside the grid with the window padding the kind requires."""
    pad = 8.0 if need_pad else 2.0
    j_lo = int(math.ceil(math.log2(grid.x_min * pad)))
    j_hi = int(math.floor(math.log2(grid.x_max / (2.0 * pad))))
    small = [2.0**j for j in range(j_lo, 1) if 2.0**j <= 1.0]
    big = [2.0**j for j in range(0, j_hi + 1)]
    return np.array(small), np.array(big)


def _sup_local(traj, kind, q_or_p, R_ladder, t0_ladder, sigma, params, big):
    best, arg = 0.0, None
    for R in R_ladder:
        w = R**q_or_p
        if kind in ("N2sigma", "Ninf"):
            for t0 in t0_ladder:
                v = w * local_norm(traj, kind, t0, R, sigma, params).value
                if v > best:
                    best, arg = v, (float(t0), float(R))
        else:
            v = w * local_norm(traj, kind, 0.0, R, sigma, params).value
            if v > best:
                best, arg = v, (float(R),)
    return best, arg


def _triple_sup(traj, q, p):
    return max(traj.at(i).weighted_sup(q, p) for i in range(traj.times.size))


def _hsigma_block(traj, sigma, params):
    """L2 in time of the H^sigma(0, 2) norm, realized on [x_min, 2] with the
    frac_deriv window machinery (R = 1/2 puts the eta plateau on (1/8, 3/2))."""
    grid = traj.grid
    ts = traj.times
    vals = np.empty(ts.size)
    for i in range(ts.size):
        f = traj.at(i)
        xs, vs = _interp_window(f, grid.x_min, min(2.0, grid.x_max))
        l2 = float(np.trapezoid(vs * vs, xs))
        xu, dv = frac_deriv(xs, vs, sigma, R=0.5)
        vals[i] = l2 + float(np.trapezoid(dv * dv, xu))
    return math.sqrt(float(np.trapezoid(vals, ts)))


def _half_seminorm(traj, p, sigma, params, R_ladder, t0_ladder, n_x=256, n_theta=9):
    """Fourier-weighted block seminorm: rescaled windows
    F(theta, X) = eta(X) f(t0 + theta R^-(lam-1)/2, R X) on X in (1/8, 4),
    integrated against Q_{R,sigma}(k) = (1 + |k|^(2 sigma))(1 + min(|k|, R))
    over the unit theta block."""
    grid = traj.grid
    T = float(traj.times[-1])
    alpha = (params.lam - 1.0) / 2.0
    Xu = np.linspace(0.125, 4.0, n_x)
    eta = cutoff_eta(Xu)
    dX = Xu[1] - Xu[0]
    k = 2.0 * math.pi * np.fft.rfftfreq(n_x, d=dX)
    lx = np.log(grid.nodes)
    best, arg = 0.0, None
    for R in R_ladder:
        Q = (1.0 + np.abs(k) ** (2.0 * sigma)) * (1.0 + np.minimum(np.abs(k), R))
        x_phys = R * Xu
        for t0 in t0_ladder:
            th_max = min(1.0, (T - t0) * R**alpha)
            if th_max <= 0.0:
                continue
            thetas = np.linspace(0.0, th_max, n_theta)
            spec = np.empty(thetas.size)
            for m, th in enumerate(thetas):
                f = traj.interp(t0 + th * R ** (-alpha))
                F = eta * PchipInterpolator(lx, f.values)(np.log(x_phys))
                Fh = dX * np.fft.rfft(F)
                pw = np.abs(Fh) ** 2 * Q
                # one-sided spectrum: double the positive frequencies
                dk = k[1] - k[0]
                spec[m] = dk * (pw[0] + 2.0 * np.sum(pw[1:-1]) + pw[-1])
            v = R**p * math.sqrt(float(np.trapezoid(spec, thetas)))
            if v > best:
                best, arg = v, (float(t0), float(R))
    return best, arg


def space_norm(
    traj: Trajectory,
    kind,
    q,
    p,
    sigma=0.0,
    params=None,
    n_t0=9,
) -> NormReport:
    """Assembled norms over dyadic R ladders and a uniform t0 ladder.

    Yqp_sigma : small-R M2 at sigma 0 and sigma, plus large-R N2 at both.
    Xqp       : small-R Minf plus large-R Ninf.
    triple_qp : sup over time of the weighted sup norm x^q / x^p.
    triple_sigma : sup-in-time triple at (3/2, p) plus the Y norm there.
    Z_full    : H^sigma(0,2)-in-time block + half-derivative seminorm +
                triple + Y, all at (3/2, p).
    """
    params = params or ModelParams()
    T = float(traj.times[-1])
    t0s = np.linspace(0.0, T, n_t0)
    det: dict = {"sigma": sigma}

    if kind == "triple_qp":
        value = _triple_sup(traj, q, p)
        return NormReport(kind, value, window=None, details=det)

    small_pad, big_pad = _r_ladders(traj.grid, need_pad=sigma > 0.0)
    small_thin, big_thin = _r_ladders(traj.grid, need_pad=False)

    if kind == "Yqp_sigma":
        m0, a0 = _sup_local(traj, "M2sigma", q, small_thin, t0s, 0.0, params, False)
        ms, as_ = _sup_local(traj, "M2sigma", q, small_pad, t0s, sigma, params, False)
        n0, b0 = _sup_local(traj, "N2sigma", p, big_thin, t0s, 0.0, params, True)
        ns, bs = _sup_local(traj, "N2sigma", p, big_pad, t0s, sigma, params, True)
        det.update(M20=m0, M2s=ms, N20=n0, N2s=ns,
                   arg_M20=a0, arg_M2s=as_, arg_N20=b0, arg_N2s=bs)
        return NormReport(kind, m0 + ms + n0 + ns, window=None, details=det)

    if kind == "Xqp":
        mi, ai = _sup_local(traj, "Minf", q, small_thin, t0s, 0.0, params, False)
        ni, bi = _sup_local(traj, "Ninf", p, big_thin, t0s, 0.0, params, True)
        det.update(Minf=mi, Ninf=ni, arg_Minf=ai, arg_Ninf=bi)
        return NormReport(kind, mi + ni, window=None, details=det)

    if kind == "triple_sigma":
        tr = _triple_sup(traj, 1.5, p)
        y = space_norm(traj, "Yqp_sigma", 1.5, p, sigma, params, n_t0)
        det.update(triple=tr, Y=y.value, Y_details=y.details)
        return NormReport(kind, tr + y.value, window=None, details=det)

    if kind == "Z_full":
        hs = _hsigma_block(traj, sigma, params)
        sem, argsem = _half_seminorm(traj, p, sigma, params, big_thin, t0s)
        tr = _triple_sup(traj, 1.5, p)
        y = space_norm(traj, "Yqp_sigma", 1.5, p, sigma, params, n_t0)
        det.update(Hsigma=hs, seminorm=sem, arg_seminorm=argsem,
                   triple=tr, Y=y.value)
        return NormReport(kind, hs + sem + tr + y.value, window=None, details=det)

    raise ConfigError("norms.kind", f"unknown space norm kind {kind!r}")


## ------------------------------------------------------------ weight audit


def w_r_audit(n_side=100, R_list=(0.5, 1.0, 2.0, 8.0), span=(1e-3, 1e3)) -> NormReport:
    """Sampled Lipschitz-type constant of the spectral weight
    W_R(xi) = min(sqrt|xi|, sqrt R): the smallest C with
    |W_R(xi) - W_R(eta)| <= C |xi - eta| / |eta| * W_R(eta) over a log
    lattice of (xi, eta) pairs."""
    xi = np.geomspace(span[0], span[1], n_side)
    eta = np.geomspace(span[0], span[1], n_side)
    XI, ET = np.meshgrid(xi, eta)
    best = 0.0
    per_R = {}
    for R in R_list:
        sR = math.sqrt(R)
        W_xi = np.minimum(np.sqrt(XI), sR)
        W_eta = np.minimum(np.sqrt(ET), sR)
        mask = XI != ET
        ratio = np.zeros_like(XI)
        ratio[mask] = (
            np.abs(W_xi - W_eta)[mask]
            * np.abs(ET)[mask]
            / (np.abs(XI - ET)[mask] * W_eta[mask])
        )
        c = float(np.max(ratio))
        per_R[f"R={R:g}"] = c
        best = max(best, c)
    return NormReport(
        "w_r_audit",
        best,
        window=None,
        details={"n_pairs": int(n_side * n_side), **per_R},
    )
