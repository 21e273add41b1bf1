"""Coagulation integral operators on log grids.

All operators are assembled from one bilinear block.  With the kernel
weight w_v(y) = y^(lam/2) v(y) (and U_v = w_v), the collision operator in
its half-range form reads

    Q[f](x) = int_0^{sx} w_f(y) [U_f(x-y) - U_f(x)] dy
              + 1/2 int_{sx}^{(1-s)x} w_f(y) U_f(x-y) dy
              - U_f(x) int_{sx}^inf w_f(y) dy,            s = split <= 1/2,

and the linearization around f0 is the symmetrized pair of the same blocks.
The singular point y = 0 is handled by geometric panels in the relative
coordinate u = y/x down to u_min, plus a Taylor closure of the bracket on
(0, u_min x); the upper range by a cumulative tail table with a fitted
power-law closure beyond the grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NumericsError
from .fieldmath import CombWeight, FieldEval, FieldWeight, PowerWeight, gauss_legendre
from .params import Field, LogGrid, ModelParams

__all__ = [
    "QuadratureSpec",
    "BOperator",
    "TailTable",
    "integral_over",
    "eval_Q",
    "eval_Lf0",
    "eval_L",
    "eval_L_diff",
    "moment",
    "Lf0Operator",
    "QOperator",
]


@dataclass(frozen=True)
class QuadratureSpec:
    """Panel layout for the operator quadratures.

    panels_per_decade applies to the geometric panels in the relative
    coordinate; small_y_order is the Taylor order of the bracket closure
    below u_min; singularity_split is the fraction s of x where the
    half-range splitting is placed (1/2 reproduces the symmetric form).
    """

    panels_per_decade: int = 8
    gl_points: int = 8
    eps_rel: float = 1e-4
    small_y_order: int = 1
    singularity_split: float = 0.5
    tail_refine: int = 2

    def __post_init__(self):
        if self.panels_per_decade < 8:
            raise ConfigError("quad.panels_per_decade", "must be >= 8")
        if self.gl_points < 4:
            raise ConfigError("quad.gl_points", "must be >= 4")
        if not (0.0 < self.eps_rel <= 0.01):
            raise ConfigError("quad.eps_rel", "must lie in (0, 0.01]")
        if self.small_y_order not in (1, 2):
            raise ConfigError("quad.small_y_order", "must be 1 or 2")
        if not (0.0 < self.singularity_split <= 0.5):
            raise ConfigError("quad.singularity_split", "must lie in (0, 1/2]")
        if self.tail_refine < 1:
            raise ConfigError("quad.tail_refine", "must be >= 1")

    def refined(self, factor: int = 2) -> "QuadratureSpec":
        return replace(self, panels_per_decade=self.panels_per_decade * factor)


## ------------------------------------------------------- basic quadrature


def _geom_panel_nodes(a: float, b: float, per_decade: int, gl: int):
    """Gauss-Legendre nodes/weights on geometric panels covering [a, b]."""
    n_pan = max(1, math.ceil(math.log10(b / a) * per_decade))
    edges = np.geomspace(a, b, n_pan + 1)
    widths = np.diff(edges)
    g, gw = gauss_legendre(gl)
    nodes = edges[:-1, None] + widths[:, None] * g[None, :]
    wts = widths[:, None] * gw[None, :]
    return nodes.ravel(), wts.ravel()


def integral_over(w_fn, a: float, b: float, spec: QuadratureSpec, refine: int = 1) -> float:
    """int_a^b w(y) dy with geometric panels (0 < a < b)."""
    if not (0.0 < a < b):
        raise NumericsError("coagops", f"bad integration range ({a}, {b})")
    y, wts = _geom_panel_nodes(a, b, spec.panels_per_decade * refine, spec.gl_points)
    return float(np.sum(w_fn.eval(y) * wts))


class TailTable:
    """Cumulative integrals of a weight on [z_lo, z_hi] plus an analytic
    power-law closure beyond z_hi; tail(z) = int_z^inf w."""

    def __init__(self, w_fn, z_lo: float, z_hi: float, spec: QuadratureSpec):
        per_dec = spec.panels_per_decade * spec.tail_refine
        n_pan = max(1, math.ceil(math.log10(z_hi / z_lo) * per_dec))
        self.edges = np.geomspace(z_lo, z_hi, n_pan + 1)
        widths = np.diff(self.edges)
        g, gw = gauss_legendre(spec.gl_points)
        self._g, self._gw = g, gw
        nodes = self.edges[:-1, None] + widths[:, None] * g[None, :]
        vals = w_fn.eval(nodes.ravel()).reshape(nodes.shape)
        panel_ints = np.sum(vals * gw[None, :], axis=1) * widths
        self.cum = np.concatenate([[0.0], np.cumsum(panel_ints)])
        a, p = w_fn.right_power()
        if a != 0.0 and p >= -1.0 - 1e-9:
            raise NumericsError(
                "coagops",
                f"divergent tail closure: fitted exponent {p:.4f} >= -1 beyond x = {z_hi:g}",
            )
        self.beyond = 0.0 if a == 0.0 else a * z_hi ** (p + 1.0) / (-(p + 1.0))
        self._w_fn = w_fn

    def tail(self, z) -> np.ndarray:
        """int_z^inf w(y) dy, vectorized over z in [z_lo, z_hi]."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        eps = 1e-12 * self.edges[-1]
        if np.any(z < self.edges[0] * (1 - 1e-12)) or np.any(z > self.edges[-1] + eps):
            raise NumericsError("coagops", "tail query outside tabulated range")
        z = np.clip(z, self.edges[0], self.edges[-1])
        j = np.clip(np.searchsorted(self.edges, z, side="right") - 1, 0, self.edges.size - 2)
        lo = self.edges[j]
        span = z - lo
        nodes = lo[:, None] + span[:, None] * self._g[None, :]
        vals = self._w_fn.eval(nodes.ravel()).reshape(nodes.shape)
        partial = np.sum(vals * self._gw[None, :], axis=1) * span
        return self.cum[-1] - self.cum[j] - partial + self.beyond

    def total(self) -> float:
        """int_{z_lo}^inf w."""
        return float(self.cum[-1] + self.beyond)


## --------------------------------------------------------- bilinear block


class BOperator:
    """Evaluates the half-range blocks at the nodes of a fixed grid.

    core(w, U)  = int_{u_min x}^{s x} w(y) [U(x-y) - U(x)] dy  + closure
    band(w, U)  = int_{s x}^{(1-s) x} w(y) U(x-y) dy            (s < 1/2)

    The node matrices in the relative coordinate are precomputed once per
    (grid, spec); weight evaluations can be cached by callers that apply
    the same one-sided weight repeatedly.
    """

    _cache: dict = {}

    def __init__(self, grid: LogGrid, spec: QuadratureSpec):
        self.grid = grid
        self.spec = spec
        x = grid.nodes
        s = spec.singularity_split
        self.u_min = min(spec.eps_rel, 0.5 * grid.x_min / grid.x_max)
        n_pan = max(1, math.ceil(math.log10(s / self.u_min) * spec.panels_per_decade))
        edges = np.geomspace(self.u_min, s, n_pan + 1)
        widths = np.diff(edges)
        g, gw = gauss_legendre(spec.gl_points)
        u = (edges[:-1, None] + widths[:, None] * g[None, :]).ravel()
        du = (widths[:, None] * gw[None, :]).ravel()
        self.u, self.du = u, du
        self.Y = x[:, None] * u[None, :]
        self.XY = x[:, None] * (1.0 - u[None, :])
        if s < 0.5:
            width = 1.0 - 2.0 * s
            nb = max(2, math.ceil(spec.panels_per_decade * 4 * width))
            be = np.linspace(s, 1.0 - s, nb + 1)
            bw = np.diff(be)
            ub = (be[:-1, None] + bw[:, None] * g[None, :]).ravel()
            dub = (bw[:, None] * gw[None, :]).ravel()
            self.Yb = x[:, None] * ub[None, :]
            self.XYb = x[:, None] * (1.0 - ub[None, :])
            self.dub = dub
        else:
            self.Yb = self.XYb = self.dub = None

    @classmethod
    def for_grid(cls, grid: LogGrid, spec: QuadratureSpec) -> "BOperator":
        key = (grid, spec)
        op = cls._cache.get(key)
        if op is None:
            op = cls._cache[key] = cls(grid, spec)
        return op

    ## -- pieces

    def eval_on_y(self, w_fn) -> np.ndarray:
        return w_fn.eval(self.Y.ravel()).reshape(self.Y.shape)

    def eval_on_xy(self, U_fn) -> np.ndarray:
        return U_fn.eval(self.XY.ravel()).reshape(self.XY.shape)

    def core(self, w_fn, U_fn, wv=None, Uv=None, U_d012=None) -> np.ndarray:
        x = self.grid.nodes
        if wv is None:
            wv = self.eval_on_y(w_fn)
        if Uv is None:
            Uv = self.eval_on_xy(U_fn)
        if U_d012 is None:
            U_d012 = U_fn.d012(x)
        Ux, U1, U2 = U_d012
        out = np.einsum("ij,ij,j->i", Uv - Ux[:, None], wv, self.du) * x
        # Taylor closure of the bracket on (0, u_min x)
        a, p = w_fn.left_power()
        if a != 0.0:
            if p <= -2.0 + 1e-12:
                raise NumericsError(
                    "coagops",
                    f"small-y closure divergent: weight exponent {p:.4f} <= -2",
                )
            ylo = self.u_min * x
            out -= U1 * a * ylo ** (p + 2.0) / (p + 2.0)
            if self.spec.small_y_order >= 2:
                out += 0.5 * U2 * a * ylo ** (p + 3.0) / (p + 3.0)
        return out

    def band(self, w_fn, U_fn, wv=None, Uv=None) -> np.ndarray:
        """Gain integral over the middle band (empty at split 1/2)."""
        if self.Yb is None:
            return np.zeros(self.grid.n)
        if wv is None:
            wv = w_fn.eval(self.Yb.ravel()).reshape(self.Yb.shape)
        if Uv is None:
            Uv = U_fn.eval(self.XYb.ravel()).reshape(self.XYb.shape)
        return np.einsum("ij,ij,j->i", Uv, wv, self.dub) * self.grid.nodes

    def tail_table(self, w_fn) -> TailTable:
        s = self.spec.singularity_split
        return TailTable(w_fn, s * self.grid.x_min, self.grid.x_max, self.spec)


## ---------------------------------------------------------- field plumbing


def _kernel_weight(f: Field, lam: float, mode: str = "auto") -> FieldWeight:
    return FieldWeight(FieldEval(f, mode=mode), lam / 2.0)


def _check_h_tail(fe: FieldEval, lam: float) -> None:
    a, p = fe.right_power()
    if a != 0.0 and p > -(2.0 + lam) / 2.0 + 1e-6:
        raise NumericsError(
            "coagops",
            f"field tail exponent {p:.4f} too slow for the kernel moment "
            f"(needs <= {-(2.0 + lam) / 2.0:.4f})",
        )


## ------------------------------------------------------------- operators


def eval_Q(f: Field, params: ModelParams, spec: QuadratureSpec | None = None) -> Field:
    """Collision operator for the product kernel (xy)^(lam/2).

    Assembled as half the linearization around f applied to f itself, so
    the half-identity between the two holds to rounding by construction
    and every code path shares one quadrature pipeline.
    """
    spec = spec or QuadratureSpec()
    if not np.any(f.values):
        return Field(f.grid, np.zeros(f.grid.n))
    op = Lf0Operator(f, params, spec)
    return Field(f.grid, 0.5 * op.apply(f))


class QOperator:
    """Q with per-grid plan reuse (no per-field caching beyond BOperator)."""

    def __init__(self, grid: LogGrid, params: ModelParams, spec: QuadratureSpec | None = None):
        self.grid = grid
        self.params = params
        self.spec = spec or QuadratureSpec()
        self.bop = BOperator.for_grid(grid, self.spec)

    def apply(self, f: Field) -> np.ndarray:
        return eval_Q(f, self.params, self.spec).values


class Lf0Operator:
    """Linearization around a frozen profile f0, with the f0-side arrays
    (weight samples on both node matrices and the tail table) precomputed."""

    def __init__(
        self,
        f0: Field,
        params: ModelParams,
        spec: QuadratureSpec | None = None,
        h_mode: str = "cubic4",
        h_edge: str = "fit",
    ):
        self.params = params
        self.spec = spec or QuadratureSpec()
        self.grid = f0.grid
        self.h_mode = h_mode
        self.h_edge = h_edge
        self.bop = BOperator.for_grid(self.grid, self.spec)
        self.fe0 = FieldEval(f0)
        self.w0 = FieldWeight(self.fe0, params.lam / 2.0)
        x = self.grid.nodes
        self._w0_Y = self.bop.eval_on_y(self.w0)
        self._w0_XY = self.bop.eval_on_xy(self.w0)
        self._w0_d012 = self.w0.d012(x)
        self._w0_x = self._w0_d012[0]
        self._T0 = self.bop.tail_table(self.w0)
        self._T0_at_sx = self._T0.tail(self.spec.singularity_split * x)
        if self.bop.Yb is not None:
            self._w0_Yb = self.w0.eval(self.bop.Yb.ravel()).reshape(self.bop.Yb.shape)
            self._w0_XYb = self.w0.eval(self.bop.XYb.ravel()).reshape(self.bop.XYb.shape)
        else:
            self._w0_Yb = self._w0_XYb = None

    def apply(self, h: Field | np.ndarray) -> np.ndarray:
        if isinstance(h, np.ndarray):
            h = Field(self.grid, h)
        if not np.any(h.values):
            return np.zeros(self.grid.n)
        feh = FieldEval(h, mode=self.h_mode, edge_mode=self.h_edge)
        _check_h_tail(feh, self.params.lam)
        wh = FieldWeight(feh, self.params.lam / 2.0)
        x = self.grid.nodes
        s = self.spec.singularity_split
        wh_Y = self.bop.eval_on_y(wh)
        wh_XY = self.bop.eval_on_xy(wh)
        wh_d012 = wh.d012(x)
        out = self.bop.core(wh, self.w0, wv=wh_Y, Uv=self._w0_XY, U_d012=self._w0_d012)
        out += self.bop.core(self.w0, wh, wv=self._w0_Y, Uv=wh_XY, U_d012=wh_d012)
        if self.bop.Yb is not None:
            whb = wh.eval(self.bop.Yb.ravel()).reshape(self.bop.Yb.shape)
            out += self.bop.band(wh, self.w0, wv=whb, Uv=self._w0_XYb)
        Th = self.bop.tail_table(wh)
        out -= self._w0_x * Th.tail(s * x)
        out -= wh_d012[0] * self._T0_at_sx
        return out

    def apply_field(self, h: Field) -> Field:
        return Field(self.grid, self.apply(h))


def eval_Lf0(
    f0: Field,
    h: Field,
    params: ModelParams,
    spec: QuadratureSpec | None = None,
    h_mode: str = "cubic4",
) -> Field:
    """One-shot linearized operator; use Lf0Operator for repeated applies."""
    return Lf0Operator(f0, params, spec, h_mode=h_mode).apply_field(h)


_SQRT8 = 2.0 * math.sqrt(2.0)


def eval_L(
    h: Field,
    params: ModelParams,
    spec: QuadratureSpec | None = None,
    h_mode: str = "cubic4",
) -> Field:
    """Model operator: linearization around the exact power profile
    x^(-(3+lam)/2), written with its singular part made explicit.  The
    splitting sits at x/2 regardless of the configured split (that is where
    the closed-form pieces live)."""
    spec = spec or QuadratureSpec()
    spec_half = replace(spec, singularity_split=0.5)
    if not np.any(h.values):
        return Field(h.grid, np.zeros(h.grid.n))
    bop = BOperator.for_grid(h.grid, spec_half)
    x = h.grid.nodes
    feh = FieldEval(h, mode=h_mode)
    _check_h_tail(feh, params.lam)
    wh = FieldWeight(feh, params.lam / 2.0)
    UG = PowerWeight(1.0, -1.5)  # z^(lam/2) * z^(-(3+lam)/2)
    w32 = PowerWeight(1.0, -1.5)
    out = bop.core(wh, UG)
    out += bop.core(w32, wh)
    Th = TailTable(wh, 0.5 * h.grid.x_min, h.grid.x_max, spec_half)
    out -= x**-1.5 * Th.tail(0.5 * x)
    out -= _SQRT8 * x ** params.r * h.values
    return Field(h.grid, out)


def eval_L_diff(
    f0: Field,
    h: Field,
    params: ModelParams,
    spec: QuadratureSpec | None = None,
    h_mode: str = "cubic4",
) -> Field:
    """Difference between the linearization around f0 and the model
    operator, assembled directly from the weight difference
    Htil(y) = y^(lam/2) f0(y) - y^(-3/2) so the leading powers cancel
    analytically instead of numerically."""
    spec = spec or QuadratureSpec()
    spec_half = replace(spec, singularity_split=0.5)
    if not np.any(h.values):
        return Field(h.grid, np.zeros(h.grid.n))
    bop = BOperator.for_grid(h.grid, spec_half)
    grid = h.grid
    x = grid.nodes
    fe0 = FieldEval(f0)
    w0 = FieldWeight(fe0, params.lam / 2.0)
    Htil = CombWeight(
        [(1.0, w0), (-1.0, PowerWeight(1.0, -1.5))], grid.x_min, grid.x_max
    )
    feh = FieldEval(h, mode=h_mode)
    _check_h_tail(feh, params.lam)
    wh = FieldWeight(feh, params.lam / 2.0)

    out = bop.core(wh, Htil)
    out += bop.core(Htil, wh)
    Th = TailTable(wh, 0.5 * grid.x_min, grid.x_max, spec_half)
    TH = TailTable(Htil, 0.5 * grid.x_min, grid.x_max, spec_half)
    out -= Htil.d012(x)[0] * Th.tail(0.5 * x)
    out -= wh.eval(x) * TH.tail(0.5 * x)
    return Field(grid, out)


## ---------------------------------------------------------------- moments


def moment(
    f: Field,
    k: float,
    spec: QuadratureSpec | None = None,
    details: bool = False,
):
    """int_0^inf x^k f(x) dx with fitted power-law closures at both ends.

    A closure whose fitted exponent is divergent is skipped and flagged;
    the returned value then covers the grid range only.
    """
    spec = spec or QuadratureSpec()
    grid = f.grid
    if not np.any(f.values):
        return (0.0, {"left_divergent": False, "right_divergent": False, "closure": 0.0}) if details else 0.0
    fe = FieldEval(f)
    w = FieldWeight(fe, k)
    mid = integral_over(w, grid.x_min, grid.x_max, spec, refine=spec.tail_refine)
    flags = {"left_divergent": False, "right_divergent": False}
    closure = 0.0
    a, p = w.left_power()
    if a != 0.0:
        if p <= -1.0 + 1e-9:
            flags["left_divergent"] = True
        else:
            closure += a * grid.x_min ** (p + 1.0) / (p + 1.0)
    a, p = w.right_power()
    if a != 0.0:
        if p >= -1.0 - 1e-9:
            flags["right_divergent"] = True
        else:
            closure += a * grid.x_max ** (p + 1.0) / (-(p + 1.0))
    value = mid + closure
    if details:
        flags["closure"] = closure
        flags["grid_part"] = mid
        return value, flags
    return value
