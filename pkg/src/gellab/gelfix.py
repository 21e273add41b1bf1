"""Constructive assembly of the gelling solution by fixed-point iteration.

The solution is represented as f(tau, x) = Lambda(tau) f0(x) + h(tau, x) in
the rescaled time tau.  The correction h is the fixed point of a map built
from two linear solves: a forced evolution h1 whose source mixes Q[h] and
Q[f0], and a convolution assembly h2 from the free-evolution machinery of
solve_psi.  The scalar amplitude Lambda obeys a second-kind Volterra
equation whose kernel is the tail-amplitude rate a'(tau); the leading
x^-(3+lam)/2 amplitudes of h1 and h2 cancel by construction, which is what
confines h to the faster-decaying tail class.

All scalar amplitude paths (a, the Volterra kernel, the h1 amplitude) are
dimensionless: they are measured in units of A0, the fitted leading
amplitude of the initial profile itself, so that a(0) = 1 holds exactly
and the amplitude identities between assembled fields close to rounding
(the extraction functional is linear and shared by every path).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coagops import Lf0Operator, QuadratureSpec
from .errors import ConfigError, NumericsError
from .evolution import (
    LinearSolveSpec,
    PsiSolution,
    _model_amp,
    solve_linear,
    solve_psi,
)
from .fieldmath import tail_fit
from .model import cutoff_xi, initial_data
from .norms import space_norm
from .params import Field, LogGrid, ModelParams, Trajectory

__all__ = [
    "AmplitudePath",
    "PicardReport",
    "ConstructionDeps",
    "build_deps",
    "solve_volterra",
    "build_h1",
    "build_h2",
    "T_operator",
    "picard_solve",
    "assemble_solution",
]


## ------------------------------------------------------------ domain types


@dataclass
class AmplitudePath:
    """Scalar amplitude bookkeeping on a common tau ladder.

    lambda_vals is the solution of the Volterra equation; a_vals the free
    tail-amplitude path; calW_vals the Volterra kernel samples (= da/dtau);
    calG_vals the forced-solve tail amplitude.  The construction stands on
    |Lambda - 1| <= 1/2 with Lambda(0) = 1; paths violating that are
    rejected here rather than propagated.
    """

    taus: np.ndarray
    lambda_vals: np.ndarray
    a_vals: np.ndarray
    calW_vals: np.ndarray
    calG_vals: np.ndarray

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=float)
        for name in ("lambda_vals", "a_vals", "calW_vals", "calG_vals"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != self.taus.shape:
                raise ConfigError(f"amplitude_path.{name}", "ladder length mismatch")
            setattr(self, name, v)
        if self.taus.size < 2 or np.any(np.diff(self.taus) <= 0.0):
            raise ConfigError("amplitude_path.taus", "need a sorted ladder of >= 2 times")
        if abs(self.taus[0]) > 1e-15:
            raise ConfigError("amplitude_path.taus", "ladder must start at 0")
        if abs(self.lambda_vals[0] - 1.0) > 1e-9:
            raise NumericsError(
                "gelfix.admissibility", f"Lambda(0) = {self.lambda_vals[0]:.6g} != 1"
            )
        worst = float(np.max(np.abs(self.lambda_vals - 1.0)))
        if worst > 0.5:
            raise NumericsError(
                "gelfix.admissibility",
                f"|Lambda - 1| reaches {worst:.4g} > 1/2; shrink T",
            )

    def lam_at(self, tau):
        return np.interp(tau, self.taus, self.lambda_vals)

    def as_columns(self):
        return (
            ["tau", "Lambda", "a", "calW", "calG"],
            np.column_stack(
                [self.taus, self.lambda_vals, self.a_vals, self.calW_vals, self.calG_vals]
            ),
        )


@dataclass
class PicardReport:
    iterates: int
    delta_norms: list
    theta_est: float
    converged: bool
    details: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "iterates": self.iterates,
            "delta_norms": [float(d) for d in self.delta_norms],
            "theta_est": float(self.theta_est),
            "converged": bool(self.converged),
            "details": _plain(self.details),
        }


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [float(v) for v in obj.ravel()]
    if isinstance(obj, (np.floating, np.integer)):
        return float(obj)
    return obj


## --------------------------------------------------------------- Volterra


def _as_path(v, taus, name):
    if np.isscalar(v):
        return np.full(taus.size, float(v))
    if callable(v):
        return np.asarray([float(v(t)) for t in taus])
    arr = np.asarray(v, dtype=float)
    if arr.shape != taus.shape:
        raise ConfigError(f"volterra.{name}", "sample array must match the tau ladder")
    return arr


def solve_volterra(a, calW, calG, T: float, n_steps: int = 1000, taus=None) -> AmplitudePath:
    """March the second-kind equation

        Lambda(tau) = calG(tau) + a(tau) - int_0^tau calW(tau - s) Lambda(s) ds

    by product-trapezoidal quadrature.  a, calW, calG may be scalars,
    callables of tau, or arrays on the ladder; calW is read as a function
    of the lag.
    """
    if taus is None:
        if T <= 0:
            raise ConfigError("volterra.T", "horizon must be positive")
        taus = np.linspace(0.0, float(T), int(n_steps) + 1)
    else:
        taus = np.asarray(taus, dtype=float)
    av = _as_path(a, taus, "a")
    gv = _as_path(calG, taus, "calG")
    if abs(av[0] - 1.0) > 1e-9:
        raise ConfigError("volterra.a", f"a(0) must be 1, got {av[0]:.6g}")

    # kernel at all needed lags tau_k - s_j; lags live on [0, T]
    if callable(calW):
        wl = np.asarray([float(calW(t)) for t in taus])
    elif np.isscalar(calW):
        wl = np.full(taus.size, float(calW))
    else:
        wl = _as_path(calW, taus, "calW")
    w_of = lambda lag: np.interp(lag, taus, wl)

    m = taus.size
    lam = np.empty(m)
    lam[0] = gv[0] + av[0]
    for k in range(1, m):
        dt = np.diff(taus[: k + 1])
        lags = taus[k] - taus[: k + 1]
        wk = w_of(lags)
        # trapezoid weights over s_0..s_k
        wt = np.zeros(k + 1)
        wt[:-1] += 0.5 * dt
        wt[1:] += 0.5 * dt
        known = float(np.dot(wt[:-1] * wk[:-1], lam[:k]))
        lam[k] = (gv[k] + av[k] - known) / (1.0 + wt[-1] * wk[-1])

    return AmplitudePath(taus, lam, av, wl, gv)


## ------------------------------------------------------------ dependencies


@dataclass
class ConstructionDeps:
    """Frozen per-run bundle: operators, the free-evolution solution
    resampled on the uniform tau ladder, and the audit results."""

    params: ModelParams
    grid: LogGrid
    taus: np.ndarray
    T: float
    f0: Field
    op: Lf0Operator
    spec: LinearSolveSpec
    qspec: QuadratureSpec | None
    psi_sol: PsiSolution
    Qf0: np.ndarray
    A0: float
    lead_unit: np.ndarray
    kernel_vals: np.ndarray
    audit: dict = field(default_factory=dict)


def _resample(traj: Trajectory, taus: np.ndarray) -> Trajectory:
    vals = np.stack([traj.interp(t).values for t in taus])
    return Trajectory(traj.grid, taus.copy(), vals)


def build_deps(
    params: ModelParams | None = None,
    grid: LogGrid | None = None,
    T: float | None = None,
    n_tau: int = 26,
    spec: LinearSolveSpec | None = None,
    qspec: QuadratureSpec | None = None,
) -> ConstructionDeps:
    """Assemble the run bundle: initial data, frozen-profile operator,
    free-evolution machinery on a uniform tau ladder, and the quadrature
    consistency audit (which aborts the run when it fails)."""
    params = params or ModelParams()
    grid = grid or LogGrid(2.0**-6, 2.0**14, 2048)
    T = params.T if T is None else float(T)
    spec = spec or LinearSolveSpec()
    data = initial_data(params, grid)
    f0 = data.f0
    op = Lf0Operator(f0, params, qspec)

    # identity audit: the collision operator at the frozen profile must
    # equal half the linearization applied to it, in the shared quadrature
    Lf = op.apply(f0)
    q_direct = 0.5 * Lf
    from .coagops import eval_Q

    q_fresh = eval_Q(f0, params, qspec).values
    scale = float(np.max(np.abs(q_fresh))) + 1e-300
    rel = float(np.max(np.abs(q_direct - q_fresh))) / scale
    if rel > 1e-8:
        raise NumericsError(
            "gelfix.identity",
            f"operator identity audit failed: rel {rel:.3e} > 1e-8 "
            "(quadrature pipelines out of sync)",
        )

    taus = np.linspace(0.0, T, int(n_tau))
    psi_raw = solve_psi(f0, T, spec, params, qspec, op=op)
    a_vals = np.interp(taus, psi_raw.times, psi_raw.a_path)
    calW = np.interp(taus, psi_raw.times, psi_raw.calW)
    psi_sol = PsiSolution(
        psi=_resample(psi_raw.psi, taus),
        a_path=a_vals,
        K_coeff=psi_raw.K_coeff,
        w=_resample(psi_raw.w, taus),
        calW=calW,
        r2=_resample(psi_raw.r2, taus),
        times=taus,
        fit_report=psi_raw.fit_report,
    )
    # Volterra kernel = rate of the tail-amplitude path, a'(tau)
    kernel_vals = psi_raw.K_coeff + calW

    x = grid.nodes
    lead_unit = cutoff_xi(x) * x ** (-params.power_main)
    return ConstructionDeps(
        params=params,
        grid=grid,
        taus=taus,
        T=T,
        f0=f0,
        op=op,
        spec=spec,
        qspec=qspec,
        psi_sol=psi_sol,
        Qf0=q_direct,
        A0=float(psi_raw.fit_report["A0"]),
        lead_unit=lead_unit,
        kernel_vals=kernel_vals,
        audit={"identity_rel": rel, "psi_fit": psi_raw.fit_report},
    )


## ------------------------------------------------------------- components


def _ladder_source(taus, rows):
    """Callable tau -> values, linear in tau between ladder rows."""

    def src(t):
        if t <= taus[0]:
            return rows[0]
        if t >= taus[-1]:
            return rows[-1]
        j = int(np.searchsorted(taus, t, side="right") - 1)
        th = (t - taus[j]) / (taus[j + 1] - taus[j])
        return (1.0 - th) * rows[j] + th * rows[j + 1]

    return src


def _q_ladder(h: Trajectory, deps: ConstructionDeps) -> np.ndarray:
    """Collision operator of each ladder row of h (the quadratic term),
    through the same pipeline the audit pins down."""
    from .coagops import eval_Q

    out = np.zeros_like(h.values)
    for i in range(h.times.size):
        row = h.values[i]
        if not np.any(row):
            continue
        out[i] = eval_Q(Field(deps.grid, row), deps.params, deps.qspec).values
    return out


def _phi_amp(values: np.ndarray, deps: ConstructionDeps):
    """Leading-amplitude functional shared by every amplitude path: the
    fitted two-term model evaluated at the window's reference scale (see
    evolution._model_amp), without the fit-quality gate, since audit fields
    measured here may legitimately be near zero.  Returns (value, raw fit).
    """
    p = deps.params.power_main
    res = tail_fit(
        deps.grid.nodes,
        values,
        window=(deps.grid.x_max / 100.0, deps.grid.x_max / 10.0),
        exponents=(-p, -(p + deps.params.delta_bar)),
    )
    return _model_amp(res, deps.grid, deps.params), res


def build_h1(h: Trajectory, Lam: AmplitudePath, deps: ConstructionDeps, Qh=None):
    """Forced linear solve h1_tau = Lf0[h1] + Q[h]/Lambda + Lambda*Q[f0],
    h1(0) = 0, with the leading tail amplitude extracted per ladder time.

    Returns (h1 on the ladder, calG samples in units of the fitted
    initial-profile amplitude A0, remainder r1 with each row's own fitted
    leading term removed).
    """
    taus = deps.taus
    if Qh is None:
        Qh = _q_ladder(h, deps)
    lam_ladder = np.interp(taus, Lam.taus, Lam.lambda_vals)
    rows = Qh / lam_ladder[:, None] + lam_ladder[:, None] * deps.Qf0[None, :]
    traj = solve_linear(
        deps.f0, _ladder_source(taus, rows), deps.T, deps.spec, deps.params, deps.qspec, op=deps.op
    )
    h1 = _resample(traj, taus)

    calG = np.zeros(taus.size)
    c0 = np.zeros(taus.size)
    for i in range(taus.size):
        if not np.any(h1.values[i]):
            continue
        amp, res = _phi_amp(h1.values[i], deps)
        calG[i] = amp / deps.A0
        c0[i] = res.amplitudes[0]
    r1 = Trajectory(deps.grid, taus.copy(), h1.values - c0[:, None] * deps.lead_unit[None, :])
    return h1, calG, r1


def build_h2(Lam: AmplitudePath, psi_sol: PsiSolution) -> Trajectory:
    """Convolution assembly -f0*Lambda + psi - int_0^tau w(tau-s)Lambda(s)ds
    on the (uniform) common ladder."""
    taus = psi_sol.times
    if Lam.taus.shape != taus.shape or not np.allclose(Lam.taus, taus, atol=1e-12):
        raise ConfigError("gelfix.ladder", "amplitude and psi ladders differ")
    dt = np.diff(taus)
    if taus.size > 2 and (dt.max() - dt.min()) > 1e-9 * dt.max():
        raise ConfigError("gelfix.ladder", "convolution assembly needs a uniform ladder")
    w = psi_sol.w.values
    lam = Lam.lambda_vals
    f0 = psi_sol.psi.values[0]
    m = taus.size
    conv = np.zeros_like(w)
    step = dt[0] if dt.size else 0.0
    for i in range(1, m):
        # lag indexing: w(tau_i - s_j) = w[i - j], trapezoid over j = 0..i
        wt = np.full(i + 1, step)
        wt[0] = wt[-1] = 0.5 * step
        conv[i] = np.tensordot(wt, w[i::-1] * lam[: i + 1, None], axes=(0, 0))
    return Trajectory(
        psi_sol.psi.grid, taus.copy(), -f0[None, :] * lam[:, None] + psi_sol.psi.values - conv
    )


## ---------------------------------------------------------- fixed-point map


def T_operator(
    h: Trajectory,
    deps: ConstructionDeps,
    Lam_seed: AmplitudePath | None = None,
    inner_tol: float = 1e-10,
    max_sweeps: int = 50,
):
    """One application of the fixed-point map.

    The amplitude path and the forced-solve tail amplitude determine each
    other (the amplitude enters the h1 source; the h1 amplitude feeds the
    Volterra equation).  Because the frozen-profile source obeys
    Q[f0] = (1/2) Lf0[f0], the amplitude response to the Lambda*Q[f0]
    source piece is exactly (1/2) * int kern(tau-s) Lambda(s) ds, so that
    part sits on the marching side (kernel halved) and the relaxation loop
    only carries the weak dependence through Q[h]/Lambda.  The loop is
    seeded with Lambda = 1 or a warm-started path.  The output is h1 + h2
    with the leading tail amplitudes cancelling.
    """
    taus = deps.taus
    Qh = _q_ladder(h, deps)
    have_qh = bool(np.any(Qh))
    lam_prev = (
        np.interp(taus, Lam_seed.taus, Lam_seed.lambda_vals)
        if Lam_seed is not None
        else np.ones(taus.size)
    )
    amp_a = np.zeros(taus.size)
    sweep_deltas = []
    for sweep in range(max_sweeps):
        if have_qh:
            rows = Qh / lam_prev[:, None]
            traj = solve_linear(
                deps.f0,
                _ladder_source(taus, rows),
                deps.T,
                deps.spec,
                deps.params,
                deps.qspec,
                op=deps.op,
            )
            h1a = _resample(traj, taus)
            for i in range(taus.size):
                if not np.any(h1a.values[i]):
                    amp_a[i] = 0.0
                    continue
                amp, _ = _phi_amp(h1a.values[i], deps)
                amp_a[i] = amp / deps.A0
        Lam = solve_volterra(
            deps.psi_sol.a_path, 0.5 * deps.kernel_vals, amp_a, deps.T, taus=taus
        )
        delta = float(np.max(np.abs(Lam.lambda_vals - lam_prev)))
        sweep_deltas.append(delta)
        lam_prev = Lam.lambda_vals.copy()
        if delta < inner_tol:
            break
    else:
        raise NumericsError(
            "gelfix.inner",
            f"amplitude relaxation not converged in {max_sweeps} sweeps "
            f"(last delta {sweep_deltas[-1]:.3e})",
        )

    h1, calG, r1 = build_h1(h, Lam, deps, Qh=Qh)
    Lam = AmplitudePath(taus, Lam.lambda_vals, deps.psi_sol.a_path, deps.kernel_vals, calG)
    h2 = build_h2(Lam, deps.psi_sol)
    h_new = Trajectory(deps.grid, taus.copy(), h1.values + h2.values)

    # leading-tail cancellation audit per ladder time
    cancel = np.zeros(taus.size)
    for i in range(1, taus.size):
        amp, _ = _phi_amp(h_new.values[i], deps)
        cancel[i] = abs(amp) / (Lam.lambda_vals[i] * deps.params.D1)
    frags = {
        "sweeps": sweep + 1,
        "sweep_deltas": sweep_deltas,
        "calG": calG,
        "cancel_ratio": cancel,
        "cancel_ratio_max": float(np.max(cancel)),
        "r1": r1,
    }
    return h_new, Lam, frags


def _z_proxy(traj: Trajectory, deps: ConstructionDeps) -> float:
    """Convergence/ball functional: sup-in-time weighted sup norm at
    (3/2, p_bar) plus the dyadic-window energy norm at sigma."""
    p_bar = deps.params.power_main + deps.params.delta_bar
    rep = space_norm(
        traj, "triple_sigma", 1.5, p_bar, sigma=deps.params.sigma, params=deps.params, n_t0=5
    )
    return float(rep.value)


def picard_solve(
    deps: ConstructionDeps,
    tol: float = 1e-6,
    max_iter: int = 12,
    rho0: float | None = None,
):
    """Iterate h <- T[h] from h = 0 until successive differences fall
    below tol in the ball functional; the amplitude path is warm-started
    between iterates.  Non-convergence returns a report flagged False
    (shrink T) rather than raising."""
    params = deps.params
    rho0 = 0.1 * params.D1 if rho0 is None else float(rho0)
    taus = deps.taus
    grid = deps.grid
    h = Trajectory(grid, taus.copy(), np.zeros((taus.size, grid.n)))
    Lam = None
    deltas: list = []
    ball_norms: list = []
    cancel_max: list = []
    sweeps: list = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        h_new, Lam, frags = T_operator(h, deps, Lam_seed=Lam)
        diff = Trajectory(grid, taus.copy(), h_new.values - h.values)
        delta = _z_proxy(diff, deps)
        deltas.append(delta)
        ball = _z_proxy(h_new, deps)
        ball_norms.append(ball)
        cancel_max.append(frags["cancel_ratio_max"])
        sweeps.append(frags["sweeps"])
        if ball > rho0:
            raise NumericsError(
                "gelfix.ball",
                f"iterate left the admissible ball: {ball:.4g} > rho0 = {rho0:.4g}; shrink T",
            )
        h = h_new
        if delta <= tol:
            converged = True
            break

    ratios = [deltas[i + 1] / deltas[i] for i in range(len(deltas) - 1) if deltas[i] > 0]
    theta = float(np.exp(np.mean(np.log(ratios)))) if ratios else 0.0
    details = {
        "ball_norms": ball_norms,
        "cancel_ratio_max": cancel_max,
        "inner_sweeps": sweeps,
        "rho0": rho0,
        "tol": tol,
        "identity_rel": deps.audit.get("identity_rel"),
    }
    if not converged:
        details["suggestion"] = "not converged; shrink T (contraction weakens with horizon)"
    report = PicardReport(
        iterates=it,
        delta_norms=deltas,
        theta_est=theta,
        converged=converged,
        details=details,
    )
    return h, Lam, report


## ----------------------------------------------------------------- assembly


def assemble_solution(
    h_star: Trajectory,
    Lam_star: AmplitudePath,
    psi_sol: PsiSolution,
    params: ModelParams | None = None,
    qspec: QuadratureSpec | None = None,
):
    """Map the fixed point back to original time.

    t(tau) = int_0^tau ds / Lambda(s);  f(t) = Lambda f0 + h on the mapped
    ladder.  Returns the trajectory in t plus diagnostics (first moment,
    finite-difference mass flux, fitted tail amplitude/exponent, and the
    weighted residual of the evolution equation at interior times).
    """
    from .directsim import GelDiagnostics, _head_closure_moment
    from .fieldmath import tail_fit

    params = params or ModelParams()
    taus = Lam_star.taus
    if h_star.times.shape != taus.shape or not np.allclose(h_star.times, taus, atol=1e-12):
        raise ConfigError("gelfix.ladder", "fixed point and amplitude ladders differ")
    lam = Lam_star.lambda_vals
    grid = h_star.grid
    x = grid.nodes
    f0 = psi_sol.psi.values[0]

    dt_tau = np.diff(taus)
    t_lad = np.concatenate([[0.0], np.cumsum(0.5 * dt_tau * (1.0 / lam[1:] + 1.0 / lam[:-1]))])
    if np.any(np.diff(t_lad) <= 0.0):
        raise NumericsError("gelfix.timemap", "time map not strictly increasing")
    T = taus[-1]
    if not (2.0 * T / 3.0 - 1e-12 <= t_lad[-1] <= 2.0 * T + 1e-12):
        raise NumericsError(
            "gelfix.timemap",
            f"t(T) = {t_lad[-1]:.6g} outside [2T/3, 2T] for T = {T:.6g}",
        )

    vals = lam[:, None] * f0[None, :] + h_star.values
    traj = Trajectory(grid, t_lad, vals)

    m1 = np.array(
        [
            float(np.trapezoid(x * vals[i], x)) + _head_closure_moment(grid, vals[i], 1.0)
            for i in range(taus.size)
        ]
    )
    flux = -np.gradient(m1, t_lad)
    amp = np.full(taus.size, np.nan)
    expo = np.full(taus.size, np.nan)
    win = (grid.x_max / 100.0, grid.x_max / 10.0)
    for i in range(taus.size):
        try:
            fit = tail_fit(x, vals[i], win)
            amp[i], expo[i] = fit.amplitudes[0], fit.exponents[0]
        except (NumericsError, OverflowError):
            pass

    # residual of the original dynamics at interior ladder times:
    # f_t - Q[f], weights x^{3/2} below 1 and x^{p_bar} above
    from .coagops import eval_Q

    p_bar = params.power_main + params.delta_bar
    res_rel = []
    for i in range(1, taus.size - 1):
        dm = t_lad[i] - t_lad[i - 1]
        dp = t_lad[i + 1] - t_lad[i]
        f_t = (
            -dp / (dm * (dm + dp)) * vals[i - 1]
            + (dp - dm) / (dm * dp) * vals[i]
            + dm / (dp * (dm + dp)) * vals[i + 1]
        )
        qv = eval_Q(Field(grid, vals[i]), params, qspec).values
        num = Field(grid, f_t - qv).weighted_sup(1.5, p_bar)
        den = Field(grid, qv).weighted_sup(1.5, p_bar) + 1e-300
        res_rel.append(num / den)

    diag = GelDiagnostics(
        times=t_lad,
        mass_m1=m1,
        gel_flux=flux,
        tail_amp=amp,
        tail_exp=expo,
    )
    decreasing = bool(np.all(np.diff(m1) < 1e-12 * max(m1[0], 1e-300)))
    diag.details = {
        "residual_rel": res_rel,
        "residual_rel_max": float(np.max(res_rel)) if res_rel else float("nan"),
        "m1_strictly_decreasing": decreasing,
        "t_of_T": float(t_lad[-1]),
    }
    return traj, diag
