"""Field evaluation off the grid: monotone cubics in log-x plus fitted
power-law extrapolation, and the weight-function protocol used by the
integral operators.

Three interpolation modes:
  * 'loglog'  — monotone cubic on ln|f| against ln x.  Exact on pure powers,
                which is what keeps power-law cancellation tests honest.
                Only valid for fields of a single sign.
  * 'linear'  — monotone cubic on f against ln x; for sign-changing fields.
  * 'cubic4'  — local 4-point Lagrange cubic on f against ln x (uniform
                log spacing required).  Linear in the samples, which makes
                operators assembled from it exactly linear in the field.
Mode 'auto' picks loglog when the samples have one strict sign, else linear.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .errors import NumericsError
from .kernels import ppoly_eval
from .params import Field, LogGrid

__all__ = [
    "gauss_legendre",
    "pchip_slopes",
    "FieldEval",
    "PowerWeight",
    "FieldWeight",
    "CombWeight",
    "TailFitResult",
    "tail_fit",
]


@lru_cache(maxsize=32)
def gauss_legendre(n: int):
    """Cached Gauss-Legendre nodes/weights on [0, 1]."""
    z, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (z + 1.0), 0.5 * w


## ------------------------------------------------------ monotone cubics


def pchip_slopes(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Fritsch-Carlson slopes for a shape-preserving cubic interpolant.

    Exact on affine data; flat where the data plateaus, which is what the
    cutoff shoulders need.
    """
    h = np.diff(t)
    m = np.diff(y) / h
    d = np.empty_like(y)
    w1 = 2.0 * h[1:] + h[:-1]
    w2 = h[1:] + 2.0 * h[:-1]
    prod = m[:-1] * m[1:]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        dh = (w1 + w2) / (w1 / m[:-1] + w2 / m[1:])
    d[1:-1] = np.where(prod > 0.0, dh, 0.0)

    def edge(h0, h1, m0, m1):
        de = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1)
        if de * m0 <= 0.0:
            return 0.0
        if m0 * m1 < 0.0 and abs(de) > 3.0 * abs(m0):
            return 3.0 * m0
        return de

    d[0] = edge(h[0], h[1], m[0], m[1])
    d[-1] = edge(h[-1], h[-2], m[-1], m[-2])
    return d


def cubic_coeffs(t: np.ndarray, y: np.ndarray, d: np.ndarray):
    """Per-interval coefficients (c0..c3) in s = q - t[j] for the Hermite
    cubic with values y and slopes d."""
    h = np.diff(t)
    m = np.diff(y) / h
    c0 = y[:-1].copy()
    c1 = d[:-1].copy()
    c2 = (3.0 * m - 2.0 * d[:-1] - d[1:]) / h
    c3 = (d[:-1] + d[1:] - 2.0 * m) / (h * h)
    return c0, c1, c2, c3


def _power_fit(logx: np.ndarray, logv: np.ndarray) -> float:
    """Least-squares slope of logv against logx."""
    A = np.vstack([logx, np.ones_like(logx)]).T
    sol, *_ = np.linalg.lstsq(A, logv, rcond=None)
    return float(sol[0])


@lru_cache(maxsize=8)
def _lagrange4_matrices():
    """Coefficient maps for the local 4-point cubic: stencil values ->
    polynomial coefficients in s = (q - t_j)/h, for stencil offsets 0..2."""
    mats = []
    for off in range(3):
        s_nodes = np.arange(4, dtype=float) - off
        V = np.vander(s_nodes, 4, increasing=True)
        mats.append(np.linalg.inv(V))
    return mats


def lagrange4_coeffs(t: np.ndarray, y: np.ndarray):
    """Per-interval cubic coefficients, linear in y, on a uniformly spaced
    abscissa.  Interval j uses the stencil clamped to [j-1, j+2]."""
    n = t.size
    h = t[1] - t[0]
    if n < 4:
        raise NumericsError("fieldmath", "cubic4 needs at least 4 nodes")
    dt = np.diff(t)
    if np.max(np.abs(dt - h)) > 1e-9 * abs(h):
        raise NumericsError("fieldmath", "cubic4 requires uniform log spacing")
    mats = _lagrange4_matrices()
    j = np.arange(n - 1)
    st = np.clip(j - 1, 0, n - 4)
    off = j - st
    Y = np.stack([y[st + k] for k in range(4)], axis=1)  # (n-1, 4)
    C = np.empty((n - 1, 4))
    for o in range(3):
        sel = off == o
        if sel.any():
            C[sel] = Y[sel] @ mats[o].T
    # rescale from s in stencil units to the absolute local coordinate
    hp = np.array([1.0, h, h * h, h * h * h])
    C /= hp[None, :]
    return C[:, 0].copy(), C[:, 1].copy(), C[:, 2].copy(), C[:, 3].copy()


## ------------------------------------------------------------ FieldEval


class FieldEval:
    """Evaluate a grid-sampled field (and d/dx, d2/dx2) anywhere on (0, inf).

    Inside the grid: monotone cubic in the log coordinate.  Outside: power
    law a*x^p with p fitted over the edge decade and the amplitude anchored
    at the edge node, so the extension is continuous.  edge_mode="zero"
    declares the field compactly supported on the grid instead (no
    extrapolation beyond either end).
    """

    def __init__(
        self, field: Field, mode: str = "auto", fit_decades: float = 1.0, edge_mode: str = "fit"
    ):
        x = field.grid.nodes
        v = np.asarray(field.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise NumericsError("fieldmath", "non-finite samples in field")
        t = np.log(x)
        self._t = t
        self._x_lo = x[0]
        self._x_hi = x[-1]

        if mode == "auto":
            if np.all(v > 0.0):
                mode = "loglog"
            elif np.all(v < 0.0):
                mode = "loglog"
            else:
                mode = "linear"
        self.mode = mode

        if mode == "loglog":
            self._sign = 1.0 if v[len(v) // 2] > 0 else -1.0
            if np.any(v * self._sign <= 0.0):
                raise NumericsError("fieldmath", "loglog mode needs a single strict sign")
            L = np.log(v * self._sign)
            d = pchip_slopes(t, L)
            self._coeffs = cubic_coeffs(t, L, d)
        elif mode == "linear":
            d = pchip_slopes(t, v)
            self._coeffs = cubic_coeffs(t, v, d)
        elif mode == "cubic4":
            self._coeffs = lagrange4_coeffs(t, v)
        else:
            raise NumericsError("fieldmath", f"unknown interpolation mode {mode!r}")

        self._v = v
        self._fit_decades = fit_decades
        if edge_mode == "zero":
            self._left = self._right = (0.0, 0.0)
        elif edge_mode == "fit":
            self._left = self._edge_power(left=True)
            self._right = self._edge_power(left=False)
        else:
            raise NumericsError("fieldmath", f"unknown edge mode {edge_mode!r}")

    ## -- fitted edge powers

    def _edge_power(self, left: bool):
        x = np.exp(self._t)
        v = self._v
        span = self._fit_decades * np.log(10.0)
        if left:
            sel = self._t <= self._t[0] + span
            edge_x, edge_v = x[0], v[0]
        else:
            sel = self._t >= self._t[-1] - span
            edge_x, edge_v = x[-1], v[-1]
        if edge_v == 0.0:
            return 0.0, 0.0
        sgn = 1.0 if edge_v > 0 else -1.0
        ok = sel & (v * sgn > 0.0)
        if np.count_nonzero(ok) < 4:
            return edge_v, 0.0
        p = _power_fit(self._t[ok], np.log(v[ok] * sgn))
        # steeper-than-power edges (underflowing data) fit huge exponents;
        # clamp so the amplitude stays representable
        if not np.isfinite(p):
            return edge_v, 0.0
        p = float(np.clip(p, -40.0, 40.0))
        log_a = np.log(abs(edge_v)) - p * np.log(edge_x)
        if log_a > 700.0:
            return edge_v, 0.0
        return sgn * np.exp(log_a), p

    def left_power(self):
        """(a, p) with f ~ a x^p as x -> 0 (signed amplitude)."""
        return self._left

    def right_power(self):
        """(a, p) with f ~ a x^p as x -> inf (signed amplitude)."""
        return self._right

    ## -- evaluation

    def __call__(self, x, nd: int = 0):
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        if np.any(x <= 0.0):
            raise NumericsError("fieldmath", "evaluation points must be positive")
        out = [np.empty(x.shape) for _ in range(nd + 1)]

        inside = (x >= self._x_lo) & (x <= self._x_hi)
        lo = x < self._x_lo
        hi = x > self._x_hi

        if inside.any():
            q = np.log(x[inside])
            res = ppoly_eval(self._t, *self._coeffs, q, nd)
            res = (res,) if nd == 0 else res
            xi = x[inside]
            if self.mode == "loglog":
                f = self._sign * np.exp(res[0])
                out[0][inside] = f
                if nd >= 1:
                    out[1][inside] = f * res[1] / xi
                if nd >= 2:
                    out[2][inside] = f * (res[1] ** 2 + res[2] - res[1]) / xi**2
            else:  # value-space modes: linear, cubic4
                out[0][inside] = res[0]
                if nd >= 1:
                    out[1][inside] = res[1] / xi
                if nd >= 2:
                    out[2][inside] = (res[2] - res[1]) / xi**2

        for mask, (a, p) in ((lo, self._left), (hi, self._right)):
            if mask.any():
                xm = x[mask]
                out[0][mask] = a * xm**p
                if nd >= 1:
                    out[1][mask] = a * p * xm ** (p - 1.0)
                if nd >= 2:
                    out[2][mask] = a * p * (p - 1.0) * xm ** (p - 2.0)

        if scalar:
            res_s = tuple(o[0] for o in out)
            return res_s[0] if nd == 0 else res_s
        return out[0] if nd == 0 else tuple(out)


## ------------------------------------------------------ weight functions
#
# The integral operators consume "weights" w(y) through a small protocol:
#   eval(y)        -> values
#   d012(x)        -> (w, w', w'') at points x  (for Taylor closures)
#   left_power()   -> (a, p): w ~ a y^p as y -> 0
#   right_power()  -> (a, p): w ~ a y^p as y -> inf


## -------------------------------------------------------------- tail fits


class TailFitResult:
    """Power-law fit of a sampled tail.

    amplitudes[i] multiplies x**exponents[i]; r2 is computed in log space
    for the one-term (free-exponent) form and in value space for the
    fixed-exponent multi-term form.
    """

    def __init__(self, amplitudes, exponents, r2, n_nodes, window):
        self.amplitudes = tuple(float(a) for a in amplitudes)
        self.exponents = tuple(float(p) for p in exponents)
        self.r2 = float(r2)
        self.n_nodes = int(n_nodes)
        self.window = tuple(window)

    def __repr__(self):
        terms = " + ".join(
            f"{a:.6g}*x^{p:.4g}" for a, p in zip(self.amplitudes, self.exponents)
        )
        return f"TailFitResult({terms}, r2={self.r2:.6f}, n={self.n_nodes})"


def tail_fit(x, values, window, exponents=None, min_nodes: int = 16) -> TailFitResult:
    """Fit the samples on the window to a power law.

    exponents=None: one-term fit |v| = a x^p with free p (log-log least
    squares, sign restored from the window).  exponents=(p1, ..., pk):
    linear least squares for the amplitudes of the given powers.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(values, dtype=float)
    lo, hi = window
    sel = (x >= lo) & (x <= hi)
    n = int(np.count_nonzero(sel))
    if n < min_nodes:
        raise NumericsError(
            "fieldmath",
            f"tail fit window [{lo:g}, {hi:g}] holds {n} nodes; need >= {min_nodes}",
        )
    xs, vs = x[sel], v[sel]

    if exponents is None:
        if np.all(vs > 0):
            sgn = 1.0
        elif np.all(vs < 0):
            sgn = -1.0
        else:
            raise NumericsError("fieldmath", "one-term tail fit needs single-signed data")
        L = np.log(vs * sgn)
        lx = np.log(xs)
        A = np.vstack([lx, np.ones_like(lx)]).T
        sol, *_ = np.linalg.lstsq(A, L, rcond=None)
        fit = A @ sol
        ss_res = float(np.sum((L - fit) ** 2))
        ss_tot = float(np.sum((L - L.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
        return TailFitResult([sgn * math.exp(sol[1])], [sol[0]], r2, n, window)

    cols = np.stack([xs**p for p in exponents], axis=1)
    scale = np.max(np.abs(cols), axis=0)
    sol, *_ = np.linalg.lstsq(cols / scale[None, :], vs, rcond=None)
    amps = sol / scale
    fit = cols @ amps
    ss_res = float(np.sum((vs - fit) ** 2))
    ss_tot = float(np.sum((vs - vs.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return TailFitResult(amps, exponents, r2, n, window)


class PowerWeight:
    """w(y) = a * y**p, exact everywhere."""

    def __init__(self, a: float, p: float):
        self.a = float(a)
        self.p = float(p)

    def eval(self, y):
        return self.a * np.asarray(y, dtype=float) ** self.p

    def d012(self, x):
        x = np.asarray(x, dtype=float)
        w = self.a * x**self.p
        return w, self.p * w / x, self.p * (self.p - 1.0) * w / x**2

    def left_power(self):
        return self.a, self.p

    def right_power(self):
        return self.a, self.p


class FieldWeight:
    """w(y) = coef * y**q * f(y) for a grid-sampled field f."""

    def __init__(self, fe: FieldEval, q: float = 0.0, coef: float = 1.0):
        self.fe = fe
        self.q = float(q)
        self.coef = float(coef)

    def eval(self, y):
        y = np.asarray(y, dtype=float)
        if self.q == 0.0 and self.coef == 1.0:
            return self.fe(y)
        return self.coef * y**self.q * self.fe(y)

    def d012(self, x):
        x = np.asarray(x, dtype=float)
        f, f1, f2 = self.fe(x, nd=2)
        q = self.q
        xq = x**q
        w = xq * f
        w1 = xq * (q * f / x + f1)
        w2 = xq * (q * (q - 1.0) * f / x**2 + 2.0 * q * f1 / x + f2)
        return self.coef * w, self.coef * w1, self.coef * w2

    def left_power(self):
        a, p = self.fe.left_power()
        return self.coef * a, p + self.q

    def right_power(self):
        a, p = self.fe.right_power()
        return self.coef * a, p + self.q


class CombWeight:
    """Linear combination of weights; edge powers recovered by sampling.

    Sampling (instead of taking the dominant term) keeps the closure honest
    when leading powers cancel between terms.
    """

    def __init__(self, terms, x_ref_lo: float, x_ref_hi: float):
        # terms: iterable of (coef, weight)
        self.terms = [(float(c), w) for c, w in terms]
        self._lo = float(x_ref_lo)
        self._hi = float(x_ref_hi)
        self._left = None
        self._right = None

    def eval(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape)
        for c, w in self.terms:
            out += c * w.eval(y)
        return out

    def d012(self, x):
        x = np.asarray(x, dtype=float)
        tot = [np.zeros(x.shape) for _ in range(3)]
        for c, w in self.terms:
            parts = w.d012(x)
            for k in range(3):
                tot[k] += c * parts[k]
        return tuple(tot)

    def _sample_power(self, window, anchor_first: bool):
        y = np.geomspace(window[0], window[1], 25)
        v = self.eval(y)
        amax = np.max(np.abs(v))
        if amax == 0.0 or not np.isfinite(amax):
            return 0.0, 0.0
        k = 0 if anchor_first else -1
        sgn = 1.0 if v[k] > 0 else -1.0
        ok = v * sgn > 0.0
        if np.count_nonzero(ok) < 5:
            return 0.0, 0.0
        p = _power_fit(np.log(y[ok]), np.log(v[ok] * sgn))
        a = v[k] / y[k] ** p
        return a, p

    def left_power(self):
        if self._left is None:
            self._left = self._sample_power((self._lo * 3e-3, self._lo * 0.45), True)
        return self._left

    def right_power(self):
        if self._right is None:
            self._right = self._sample_power((self._hi * 1e2, self._hi * 1e3), False)
        return self._right
