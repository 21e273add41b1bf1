"""Linear initial-value solves h_tau = Lf0[h] + mu, the psi/w construction
with tail-amplitude extraction, and Theta-weighted source functionals.

The stepper is method-of-lines over the log grid: classic RK4 at fixed
step, or an embedded 3(2) pair with PI step control.  The operator has a
stiff loss diagonal ~ x_max^(lam/2) * M_(lam/2), so the adaptive scheme is
the default.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coagops import Lf0Operator, QuadratureSpec
from .errors import ConfigError, NumericsError
from .fieldmath import FieldEval, tail_fit
from .params import Field, LogGrid, ModelParams, Trajectory

__all__ = [
    "LinearSolveSpec",
    "PsiSolution",
    "solve_linear",
    "solve_psi",
    "I_functional",
    "duhamel_eval",
]


@dataclass(frozen=True)
class LinearSolveSpec:
    dt_init: float = 5e-4
    dt_min: float = 1e-10
    rtol: float = 1e-6
    scheme: str = "rk23_adaptive"
    stiffness_guard: float = 10.0
    max_steps: int = 200000

    def __post_init__(self):
        if self.dt_min <= 0:
            raise ConfigError("solve.dt_min", "must be positive")
        if not (1e-12 <= self.rtol <= 1e-2):
            raise ConfigError("solve.rtol", f"must lie in [1e-12, 1e-2], got {self.rtol}")
        if self.scheme not in ("rk4", "rk23_adaptive"):
            raise ConfigError("solve.scheme", f"must be rk4 or rk23_adaptive, got {self.scheme!r}")
        if self.stiffness_guard <= 1.0:
            raise ConfigError("solve.stiffness_guard", "must exceed 1")


def _as_source(mu, grid: LogGrid):
    """Normalize a source (None, Field, Trajectory, callable) to callable
    tau -> values; trajectories are interpolated linearly in time."""
    if mu is None:
        zero = np.zeros(grid.n)
        return lambda t: zero
    if isinstance(mu, Field):
        vals = mu.values
        return lambda t: vals
    if isinstance(mu, Trajectory):
        return lambda t: mu.interp(t).values
    if callable(mu):
        return mu
    raise ConfigError("solve.mu", f"unsupported source type {type(mu)!r}")


def solve_linear(
    f0: Field,
    mu,
    T: float,
    spec: LinearSolveSpec | None = None,
    params: ModelParams | None = None,
    qspec: QuadratureSpec | None = None,
    op: Lf0Operator | None = None,
) -> Trajectory:
    """Method-of-lines solve of h_tau = Lf0[h] + mu(tau), h(0) = 0.

    Pass a prebuilt Lf0Operator via `op` to amortize the frozen-profile
    arrays across repeated solves.
    """
    spec = spec or LinearSolveSpec()
    params = params or ModelParams()
    if op is None:
        op = Lf0Operator(f0, params, qspec)
    grid = op.grid
    src = _as_source(mu, grid)

    def rhs(t, y):
        return op.apply(y) + src(t)

    if spec.scheme == "rk4":
        return _rk4_fixed(rhs, grid, T, spec, src)
    return _rk23_adaptive(rhs, grid, T, spec, src)


def _guard_check(y_new, y, dt, src_now, guard, where):
    scale = np.max(np.abs(y)) + dt * np.max(np.abs(src_now)) + 1e-300
    if np.max(np.abs(y_new)) > guard * max(scale, 1e-300):
        raise NumericsError(
            where,
            f"step amplification exceeded stiffness guard {guard:g}; "
            "reduce dt_init or switch to rk23_adaptive",
        )


def _rk4_fixed(rhs, grid, T, spec, src):
    n_steps = max(1, math.ceil(T / spec.dt_init))
    dt = T / n_steps
    y = np.zeros(grid.n)
    times = [0.0]
    vals = [y.copy()]
    t = 0.0
    for _ in range(n_steps):
        k1 = rhs(t, y)
        k2 = rhs(t + dt / 2, y + dt / 2 * k1)
        k3 = rhs(t + dt / 2, y + dt / 2 * k2)
        k4 = rhs(t + dt, y + dt * k3)
        y_new = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y_new)):
            raise NumericsError("evolution", f"non-finite state at t={t + dt:.6g} (rk4)")
        _guard_check(y_new, y, dt, src(t), spec.stiffness_guard, "evolution")
        y = y_new
        t += dt
        times.append(t)
        vals.append(y.copy())
    return Trajectory(grid, np.array(times), np.array(vals))


def _rk23_adaptive(rhs, grid, T, spec, src):
    # Bogacki-Shampine 3(2) with FSAL and PI step control
    t = 0.0
    y = np.zeros(grid.n)
    dt = spec.dt_init
    k1 = rhs(t, y)
    times = [0.0]
    vals = [y.copy()]
    err_prev = 1.0
    n_accepted = 0
    for _ in range(spec.max_steps):
        if t >= T - 1e-14 * T:
            break
        dt = min(dt, T - t)
        k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
        k3 = rhs(t + 0.75 * dt, y + 0.75 * dt * k2)
        y_new = y + dt * (2.0 * k1 + 3.0 * k2 + 4.0 * k3) / 9.0
        k4 = rhs(t + dt, y_new)
        err = dt * np.abs(-5.0 / 72.0 * k1 + k2 / 12.0 + k3 / 9.0 - k4 / 8.0)
        scale_ref = max(np.max(np.abs(y)), np.max(np.abs(y_new)), dt * np.max(np.abs(k1)), 1e-300)
        sc = spec.rtol * (scale_ref * 1e-3 + np.maximum(np.abs(y), np.abs(y_new)))
        enorm = float(np.max(err / sc))
        if not np.isfinite(enorm):
            enorm = 1e6
        if enorm <= 1.0:
            _guard_check(y_new, y, dt, src(t), spec.stiffness_guard, "evolution")
            t += dt
            y = y_new
            k1 = k4  # FSAL
            times.append(t)
            vals.append(y.copy())
            n_accepted += 1
            en = max(enorm, 1e-10)
            fac = 0.9 * en ** (-1.0 / 3.0) * (err_prev / en) ** 0.08
            err_prev = en
            dt *= min(5.0, max(0.2, fac))
        else:
            dt *= max(0.2, 0.9 * enorm ** (-1.0 / 3.0))
        if dt < spec.dt_min:
            raise NumericsError(
                "evolution",
                f"step collapsed below dt_min={spec.dt_min:g} at t={t:.6g} "
                f"(local error {enorm:.3g}); the problem is too stiff for the settings",
            )
    else:
        raise NumericsError("evolution", f"max_steps={spec.max_steps} exhausted at t={t:.6g}")
    return Trajectory(grid, np.array(times), np.array(vals))


## --------------------------------------------------------------- psi / w


@dataclass
class PsiSolution:
    psi: Trajectory
    a_path: np.ndarray
    K_coeff: float
    w: Trajectory
    calW: np.ndarray
    r2: Trajectory
    times: np.ndarray
    fit_report: dict = field(default_factory=dict)


def _two_term_amp(values: np.ndarray, grid: LogGrid, params: ModelParams, label: str):
    """Leading tail amplitude against x^-(3+lam)/2 with the delta_bar
    correction as the second column; R^2 gate per the extraction contract."""
    p = params.power_main
    res = tail_fit(
        grid.nodes,
        values,
        window=(grid.x_max / 100.0, grid.x_max / 10.0),
        exponents=(-p, -(p + params.delta_bar)),
    )
    if res.r2 < 0.99:
        raise NumericsError(
            "evolution",
            f"tail extraction for {label} failed: R^2 = {res.r2:.4f} < 0.99",
        )
    return res


def _model_amp(res, grid: LogGrid, params: ModelParams) -> float:
    """Amplitude functional used by every dynamical path: the fitted
    two-term model evaluated at the window's geometric center, in units of
    x^-(3+lam)/2.  The raw coefficient pair is ill-conditioned when
    delta_bar is small (the columns are nearly collinear over one decade),
    but this combination is the regression's stable direction; it is linear
    in the data, so amplitude identities between assembled fields close
    exactly."""
    x_ref = grid.x_max / 10.0**1.5
    return float(res.amplitudes[0] + res.amplitudes[1] * x_ref ** (-params.delta_bar))


def solve_psi(
    f0: Field,
    T: float,
    spec: LinearSolveSpec | None = None,
    params: ModelParams | None = None,
    qspec: QuadratureSpec | None = None,
    op: Lf0Operator | None = None,
    xi_values: np.ndarray | None = None,
) -> PsiSolution:
    """Free evolution of the profile under the linearization, organized as
    psi = f0 + Lf0[f0]*tau + int_0^tau W, with W solving the once-forced
    equation W_tau = Lf0[W] + Lf0[Lf0[f0]], W(0)=0.

    Extracts the tail-amplitude path a(tau) = 1 + K*tau + int_0^tau calW,
    with K the leading tail coefficient of Lf0[f0] and calW(tau) that of W.
    """
    from .model import cutoff_xi

    spec = spec or LinearSolveSpec()
    params = params or ModelParams()
    if op is None:
        op = Lf0Operator(f0, params, qspec)
    grid = op.grid
    x = grid.nodes

    Lf = op.apply(f0)
    fit0 = _two_term_amp(f0.values, grid, params, "f0")
    # amplitude paths are kept dimensionless by normalizing with the fitted
    # amplitude of the initial profile itself; a(0) = 1 then holds exactly
    # and every amplitude identity between assembled fields closes to
    # rounding, because the functional is linear and shared.
    A0 = _model_amp(fit0, grid, params)
    fitK = _two_term_amp(Lf, grid, params, "Lf0[f0]")
    K = _model_amp(fitK, grid, params) / A0
    S = op.apply(Lf)

    Wtraj = solve_linear(f0, Field(grid, S), T, spec, params, qspec, op=op)
    ts = Wtraj.times
    W = Wtraj.values

    # psi(t) = f0 + Lf0[f0] t + cumulative integral of W
    cumW = np.zeros_like(W)
    if ts.size > 1:
        dt = np.diff(ts)
        incr = 0.5 * dt[:, None] * (W[1:] + W[:-1])
        cumW[1:] = np.cumsum(incr, axis=0)
    psi_vals = f0.values[None, :] + ts[:, None] * Lf[None, :] + cumW
    w_vals = Lf[None, :] + W

    calW = np.zeros(ts.size)
    c0_psi = np.zeros(ts.size)
    amp_psi = np.zeros(ts.size)
    r2s = []
    for i in range(ts.size):
        fit_psi = _two_term_amp(psi_vals[i], grid, params, f"psi(tau={ts[i]:.4g})")
        c0_psi[i] = fit_psi.amplitudes[0]
        amp_psi[i] = _model_amp(fit_psi, grid, params) / A0
        if not np.any(W[i]):
            calW[i] = 0.0
            continue
        fit = _two_term_amp(W[i], grid, params, f"W(tau={ts[i]:.4g})")
        calW[i] = _model_amp(fit, grid, params) / A0
        r2s.append(fit.r2)

    a_path = np.ones(ts.size)
    if ts.size > 1:
        dt = np.diff(ts)
        a_path[1:] = 1.0 + K * ts[1:] + np.cumsum(0.5 * dt * (calW[1:] + calW[:-1]))

    # remainder: peel each row's own fitted leading term so that what is
    # left is the regression residual plus the steeper corrections
    xi = cutoff_xi(x) if xi_values is None else xi_values
    lead_unit = xi * x ** (-params.power_main)
    r2_vals = psi_vals - c0_psi[:, None] * lead_unit[None, :]

    return PsiSolution(
        psi=Trajectory(grid, ts, psi_vals),
        a_path=a_path,
        K_coeff=float(K),
        w=Trajectory(grid, ts, w_vals),
        calW=calW,
        r2=Trajectory(grid, ts, r2_vals),
        times=ts,
        fit_report={
            "A0": A0,
            "K_fit_r2": fitK.r2,
            "calW_min_r2": min(r2s) if r2s else float("nan"),
            "a_consistency": float(np.max(np.abs(a_path - amp_psi))),
        },
    )


## ------------------------------------------------- Theta-weighted source


def I_functional(
    tau: float,
    F: Trajectory,
    engine,
    params: ModelParams | None = None,
    correction: Trajectory | None = None,
) -> float:
    """Double integral of the source against the tail-amplitude response:

        I(tau) = int_0^tau ds int_0^inf (dx0/x0) Theta((tau-s) x0^r)
                 * x0^((3+lam)/2) * [F + correction](s, x0)

    The x0-integral runs over the grid by log-trapezoid and is closed
    beyond x_max with the fitted two-term power tail of the source — the
    closure carries most of the response when tau-s is small, because the
    amplitude kernel has barely risen inside the grid there.
    """
    params = params or ModelParams()
    grid = F.grid
    x = grid.nodes
    t_log = np.log(x)
    r = params.r
    pm = params.power_main

    ts = F.times[F.times <= tau * (1 + 1e-12)]
    if ts.size == 0 or tau <= 0:
        return 0.0
    if abs(ts[-1] - tau) > 1e-12 * max(tau, 1.0):
        ts = np.append(ts, tau)

    def source_at(s):
        vals = F.interp(s).values
        if correction is not None:
            vals = vals + correction.interp(s).values
        return vals

    inner = np.zeros(ts.size)
    for i, s in enumerate(ts):
        dt_loc = tau - s
        vals = source_at(s)
        if dt_loc <= 0:
            # Theta(0) = 0 on the grid, but the beyond-grid closure also
            # vanishes in this limit's integrand
            inner[i] = 0.0
            continue
        zeta = dt_loc * x**r
        th = engine.theta(zeta)
        integrand = th * x**pm * vals
        grid_part = float(np.trapezoid(integrand, t_log))
        # two-term closure beyond the grid against the fitted source tail
        fitF = tail_fit(
            x,
            vals,
            window=(grid.x_max / 100.0, grid.x_max / 10.0),
            exponents=(-pm, -(pm + params.delta_bar)),
        )
        z0 = dt_loc * grid.x_max**r
        closure = fitF.amplitudes[0] / r * engine.theta_log_tail(z0, 0.0)
        closure += (
            fitF.amplitudes[1]
            / r
            * dt_loc ** (params.delta_bar / r)
            * engine.theta_log_tail(z0, params.delta_bar / r)
        )
        inner[i] = grid_part + closure
    return float(np.trapezoid(inner, ts))


def _near_lattice(s_min: float, s_max: float, gl_order: int = 6):
    """Geometric Gauss-Legendre lattice on (0, s_max] resolving scales down
    to s_min, mirrored to the negative side; returns (nodes, weights)."""
    edges = [0.0]
    s = max(s_min, 1e-12)
    while s < s_max:
        edges.append(s)
        s *= 2.0
    edges.append(s_max)
    edges = np.asarray(edges)
    gx, gw = np.polynomial.legendre.leggauss(gl_order)
    gx = 0.5 * (gx + 1.0)
    gw = 0.5 * gw
    a = edges[:-1][:, None]
    h = np.diff(edges)[:, None]
    nodes = (a + h * gx[None, :]).ravel()
    weights = (h * gw[None, :]).ravel()
    nodes = np.concatenate([-nodes[::-1], nodes])
    weights = np.concatenate([weights[::-1], weights])
    return nodes, weights


def _smooth01(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def duhamel_eval(
    F: Trajectory,
    tau: float,
    engine,
    params: ModelParams | None = None,
    x_eval: np.ndarray | None = None,
    n_s: int = 24,
    x_cut: float = 0.18,
) -> Field:
    """Time convolution of the source against the point-mass response:

        J(tau, x) = int_0^tau ds int (dx0/x0) g((tau-s) x0^r, x/x0, 1) F(s, x0)

    The response approaches a point mass as s -> tau, which no fixed grid
    resolves, so rows whose local time falls below the grid's resolving
    scale are split by a smooth window at |log(x/x0)| ~ x_cut: the far
    part is a log-trapezoid of tabulated kernel values, the near part a
    fine geometric quadrature of the composite closed form (layer +
    first-order field) against the interpolated source, with node scales
    tracking the layer width.  The split makes the s -> tau limit exact:
    the near mass tends to 1 (the layer profile integrates to 1) and the
    far part to 0.  Rows with a grid-resolved layer use the plain
    trapezoid of kernel values.
    """
    params = params or ModelParams()
    grid = F.grid
    x0 = grid.nodes
    lt = np.log(x0)
    r = params.r
    xq = grid.nodes if x_eval is None else np.asarray(x_eval, dtype=float)
    out_grid = grid if x_eval is None else LogGrid(float(xq[0]), float(xq[-1]), xq.size)
    if tau <= 0:
        return Field(out_grid, np.zeros(xq.size))

    ## s-ladder clustered toward the identity endpoint s = tau
    v = np.linspace(0.0, 1.0, n_s)
    s_nodes = tau * (1.0 - (1.0 - v) ** 2)

    w_trap = np.gradient(lt)
    lxq = np.log(xq)
    tl_q_unit = xq**r  # local time per unit dt at the query points
    spacing = (lt[-1] - lt[0]) / (lt.size - 1)
    t_resolve = math.sqrt(0.875 * spacing)  # layer width 4t^2 ~ 3.5 cells

    Xmat = lxq[:, None] - lt[None, :]
    w_far_thin = _smooth01((np.abs(Xmat) - 0.6 * x_cut) / (0.4 * x_cut))

    inner_vals = np.empty((s_nodes.size, xq.size))
    for i, s in enumerate(s_nodes):
        dt_loc = tau - s
        vals = F.interp(s).values
        if dt_loc == 0.0:
            inner_vals[i] = FieldEval(Field(grid, vals))(xq)
            continue

        tl_q = dt_loc * tl_q_unit
        thin = tl_q < t_resolve  # rows needing the analytic near part

        ## far part: log-trapezoid over the source grid, windowed off the
        ## diagonal on thin rows only
        tl = dt_loc * x0**r
        G = engine.g_matrix(tl, xq, x0, resolve_layer=False)
        w_far = np.where(thin[:, None], w_far_thin, 1.0)
        far = (G * w_far) @ (vals * w_trap)

        if not np.any(thin):
            inner_vals[i] = far
            continue

        ## near part: fine quadrature of the composite form against the
        ## interpolated source, scales graded down to the layer width
        fe = FieldEval(Field(grid, vals))
        tq = tl_q[thin]
        s_min = max(float(np.min(tq)) ** 2 / 8.0, 1e-12)
        Xn, Wn = _near_lattice(s_min, x_cut)
        t_nodes = tq[:, None] * np.exp(-r * Xn[None, :])
        rho = np.exp(Xn)
        with np.errstate(over="ignore", under="ignore", divide="ignore"):
            kap = rho - 1.0
            chi = kap[None, :] / t_nodes**2
            gn = np.where(
                chi > 0.0,
                np.power(np.abs(chi), -1.5) * np.exp(-math.pi / np.abs(chi)) / t_nodes**2,
                0.0,
            )
        gn -= t_nodes * np.power(rho, -1.5)[None, :]
        w_near = 1.0 - _smooth01((np.abs(Xn) - 0.6 * x_cut) / (0.4 * x_cut))
        src = fe((xq[thin, None] * np.exp(-Xn[None, :])).ravel()).reshape(tq.size, Xn.size)
        near = (gn * src) @ (Wn * w_near)
        far[thin] += near
        inner_vals[i] = far
    out = np.trapezoid(inner_vals, s_nodes, axis=0)
    return Field(out_grid, out)
