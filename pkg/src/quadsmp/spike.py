"""Spike perturbations, variational solutions and expansion-order fits.

A spike replaces the candidate control on a window [t0, t0 + eps) aligned to
grid cells. The first/second-order variational states (X1, X2) are simulated
from linearized dynamics with window sources; the backward components are
evaluated through the adjoint processes, with the auxiliary pair solved as a
weighted scalar linear equation. Order fits quantify how the error
functionals scale across a dyadic ladder of window widths, on one common
Brownian ensemble so pathwise differences are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .adjoint import AdjointBundle, solve_adjoints
from .bsde import (
    ControlledTrajectory,
    LinearBsdeData,
    exponential_weight,
    solve_bsde_lsmc,
    solve_linear_bsde_weighted,
)
from .grids import TimeGrid, constant_control, generate_brownian
from .models import ModelSpec
from .sde import simulate_forward_sde

__all__ = [
    "SpikePerturbation",
    "build_spiked_control",
    "HattedCoefficients",
    "hatted_coefficients",
    "solve_x1",
    "solve_x2",
    "compute_y1z1",
    "solve_yhat",
    "yhat0_direct_estimate",
    "compute_y2z2",
    "ExpansionResiduals",
    "expansion_residuals",
    "OrderFitReport",
    "fit_convergence_order",
    "sup_square",
    "integrated_square",
    "SpikeStudyResult",
    "run_spike_study",
]


@dataclass(frozen=True)
class SpikePerturbation:
    """Control replacement on the half-open window [t0, t0 + eps)."""

    t0: float
    eps: float
    replacement: np.ndarray  # constant control value, shape (k,) or scalar

    def window(self, grid: TimeGrid) -> tuple[int, int]:
        """(first step index, number of steps); validates grid alignment."""
        k0 = grid.index_of(self.t0)
        n_eps = grid.index_of(self.eps) if self.eps > 0 else 0
        if k0 + n_eps > grid.n_steps:
            raise ValueError(f"window [{self.t0}, {self.t0 + self.eps}] leaves the horizon")
        return k0, n_eps

    def indicator(self, grid: TimeGrid) -> np.ndarray:
        """Step indicator of the window, shape (n_steps,)."""
        k0, n_eps = self.window(grid)
        ind = np.zeros(grid.n_steps)
        ind[k0 : k0 + n_eps] = 1.0
        return ind


def build_spiked_control(u_bar: np.ndarray, spike: SpikePerturbation, grid: TimeGrid) -> np.ndarray:
    """Candidate control with the replacement value on the spike window."""
    k0, n_eps = spike.window(grid)
    out = np.array(u_bar, dtype=float, copy=True)
    out[:, k0 : k0 + n_eps] = np.atleast_1d(np.asarray(spike.replacement, dtype=float))
    return out


@dataclass(frozen=True)
class HattedCoefficients:
    """Replacement-minus-candidate coefficient gaps along the candidate path.

    b_hat: (m, N, n); sigma_hat: (m, N, n, d); sigma_x_hat: (m, N, d, n, n);
    f_hat: (m, N); delta: (m, N, d) with delta^i = (sigma_hat^i)' p;
    f_hat_delta: (m, N) the generator gap with the z-slot shifted by delta.
    """

    b_hat: np.ndarray = field(repr=False)
    sigma_hat: np.ndarray = field(repr=False)
    sigma_x_hat: np.ndarray = field(repr=False)
    f_hat: np.ndarray = field(repr=False)
    delta: np.ndarray = field(repr=False)
    f_hat_delta: np.ndarray = field(repr=False)


def hatted_coefficients(
    model: ModelSpec,
    traj: ControlledTrajectory,
    u_repl: np.ndarray,
    p: np.ndarray,
) -> HattedCoefficients:
    grid = traj.w.grid
    times = grid.times
    n_steps = grid.n_steps
    m = traj.n_paths
    u_repl = np.broadcast_to(np.asarray(u_repl, dtype=float), (m, n_steps, model.k))
    b_hat = np.empty((m, n_steps, model.n))
    sigma_hat = np.empty((m, n_steps, model.n, model.d))
    sigma_x_hat = np.empty((m, n_steps, model.d, model.n, model.n))
    f_hat = np.empty((m, n_steps))
    delta = np.empty((m, n_steps, model.d))
    f_hat_delta = np.empty((m, n_steps))
    for k in range(n_steps):
        t, xk, yk, zk = times[k], traj.x[:, k], traj.y[:, k], traj.z[:, k]
        ub, ur = traj.u[:, k], u_repl[:, k]
        b_hat[:, k] = model.b(t, xk, ur) - model.b(t, xk, ub)
        sh = model.sigma(t, xk, ur) - model.sigma(t, xk, ub)
        sigma_hat[:, k] = sh
        sigma_x_hat[:, k] = model.sigma_x(t, xk, ur) - model.sigma_x(t, xk, ub)
        f_base = model.f(t, xk, yk, zk, ub)
        f_hat[:, k] = model.f(t, xk, yk, zk, ur) - f_base
        delta[:, k] = np.einsum("mid,mi->md", sh, p[:, k])
        f_hat_delta[:, k] = model.f(t, xk, yk, zk + delta[:, k], ur) - f_base
    return HattedCoefficients(
        b_hat=b_hat,
        sigma_hat=sigma_hat,
        sigma_x_hat=sigma_x_hat,
        f_hat=f_hat,
        delta=delta,
        f_hat_delta=f_hat_delta,
    )


def _first_order_coeffs(model: ModelSpec, traj: ControlledTrajectory) -> tuple[np.ndarray, np.ndarray]:
    grid = traj.w.grid
    b_x = np.empty((traj.n_paths, grid.n_steps, model.n, model.n))
    sigma_x = np.empty((traj.n_paths, grid.n_steps, model.d, model.n, model.n))
    for k in range(grid.n_steps):
        b_x[:, k] = model.b_x(grid.times[k], traj.x[:, k], traj.u[:, k])
        sigma_x[:, k] = model.sigma_x(grid.times[k], traj.x[:, k], traj.u[:, k])
    return b_x, sigma_x


def solve_x1(
    model: ModelSpec,
    traj: ControlledTrajectory,
    spike: SpikePerturbation,
    hats: HattedCoefficients,
) -> np.ndarray:
    """First variational state: linearized dynamics with the window diffusion
    impulse sigma_hat 1_E; starts at 0. Shape (m, N+1, n)."""
    grid = traj.w.grid
    dt = grid.dt
    dw = traj.w.increments
    ind = spike.indicator(grid)
    b_x, sigma_x = _first_order_coeffs(model, traj)
    x1 = np.zeros((traj.n_paths, grid.n_steps + 1, model.n))
    for k in range(grid.n_steps):
        xk = x1[:, k]
        incr = np.einsum("mij,mj->mi", b_x[:, k], xk) * dt
        incr += np.einsum("mdij,mj,md->mi", sigma_x[:, k], xk, dw[:, k])
        if ind[k]:
            incr += np.einsum("mid,md->mi", hats.sigma_hat[:, k], dw[:, k])
        x1[:, k + 1] = xk + incr
    return x1


def solve_x2(
    model: ModelSpec,
    traj: ControlledTrajectory,
    spike: SpikePerturbation,
    x1: np.ndarray,
    hats: HattedCoefficients,
) -> np.ndarray:
    """Second variational state: window drift impulse b_hat 1_E, window
    diffusion sigma_x_hat X1 1_E and the quadratic curvature sources."""
    grid = traj.w.grid
    dt = grid.dt
    dw = traj.w.increments
    times = grid.times
    ind = spike.indicator(grid)
    b_x, sigma_x = _first_order_coeffs(model, traj)
    x2 = np.zeros((traj.n_paths, grid.n_steps + 1, model.n))
    for k in range(grid.n_steps):
        xk = x2[:, k]
        x1k = x1[:, k]
        b_xx = model.b_xx(times[k], traj.x[:, k], traj.u[:, k])
        s_xx = model.sigma_xx(times[k], traj.x[:, k], traj.u[:, k])
        drift = np.einsum("mij,mj->mi", b_x[:, k], xk)
        drift += 0.5 * np.einsum("mijk,mj,mk->mi", b_xx, x1k, x1k)
        if ind[k]:
            drift += hats.b_hat[:, k]
        diff = np.einsum("mdij,mj->mid", sigma_x[:, k], xk)
        diff += 0.5 * np.einsum("mjdab,ma,mb->mjd", s_xx, x1k, x1k)
        if ind[k]:
            diff += np.einsum("mdij,mj->mid", hats.sigma_x_hat[:, k], x1k)
        x2[:, k + 1] = xk + drift * dt + np.einsum("mid,md->mi", diff, dw[:, k])
    return x2


def compute_y1z1(
    model: ModelSpec,
    traj: ControlledTrajectory,
    spike: SpikePerturbation,
    x1: np.ndarray,
    adj: AdjointBundle,
    hats: HattedCoefficients,
) -> tuple[np.ndarray, np.ndarray]:
    """First backward variation via the adjoint relation.

    Y1 = p'X1 on nodes; Z1^i = p'sigma_hat^i 1_E + [p'sigma_x^i + q^i'] X1
    on steps.
    """
    grid = traj.w.grid
    n_steps = grid.n_steps
    ind = spike.indicator(grid)
    y1 = np.einsum("mti,mti->mt", adj.p, x1)
    _, sigma_x = _first_order_coeffs(model, traj)
    p_steps = adj.p[:, :n_steps]
    row = np.einsum("mtl,mtdlj->mtdj", p_steps, sigma_x) + np.swapaxes(adj.q, 2, 3)
    z1 = np.einsum("mtdj,mtj->mtd", row, x1[:, :n_steps])
    z1 += ind[None, :, None] * np.einsum("mti,mtid->mtd", p_steps, hats.sigma_hat)
    return y1, z1


def _yhat_driver(
    traj: ControlledTrajectory,
    spike: SpikePerturbation,
    adj: AdjointBundle,
    hats: HattedCoefficients,
) -> np.ndarray:
    n_steps = traj.w.grid.n_steps
    ind = spike.indicator(traj.w.grid)
    p_steps = adj.p[:, :n_steps]
    big_p_steps = adj.big_p[:, :n_steps]
    drv = np.einsum("mti,mti->mt", p_steps, hats.b_hat)
    drv += np.einsum("mtid,mtid->mt", adj.q, hats.sigma_hat)
    drv += hats.f_hat_delta
    drv += 0.5 * np.einsum("mtid,mtij,mtjd->mt", hats.sigma_hat, big_p_steps, hats.sigma_hat)
    return drv * ind[None, :]


def solve_yhat(
    model: ModelSpec,
    traj: ControlledTrajectory,
    spike: SpikePerturbation,
    adj: AdjointBundle,
    hats: HattedCoefficients,
    degree: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Auxiliary pair: scalar linear equation with the window Hamiltonian-gap
    driver, generator slopes (f_y, f_z) and zero terminal value."""
    grid = traj.w.grid
    n_steps = grid.n_steps
    m = traj.n_paths
    lam = np.empty((m, n_steps))
    mu = np.empty((m, n_steps, model.d))
    for k in range(n_steps):
        args = (grid.times[k], traj.x[:, k], traj.y[:, k], traj.z[:, k], traj.u[:, k])
        lam[:, k] = model.f_y(*args)
        mu[:, k] = model.f_z(*args)
    data = LinearBsdeData(
        lam=lam,
        mu=mu,
        phi=_yhat_driver(traj, spike, adj, hats),
        xi=np.zeros(m),
        state=traj.x,
    )
    y_hat, z_hat, _ = solve_linear_bsde_weighted(data, traj.w, degree=degree)
    return y_hat, z_hat


def yhat0_direct_estimate(
    model: ModelSpec,
    traj: ControlledTrajectory,
    spike: SpikePerturbation,
    adj: AdjointBundle,
    hats: HattedCoefficients,
) -> tuple[float, float]:
    """Independent estimate of the auxiliary value at 0.

    Integrates the window driver against the weight solved as an SDE by
    Euler-Maruyama (dG = f_y G dt + G f_z'dW, G_0 = 1) instead of the closed
    exponential, and averages pathwise. Returns (estimate, std error).
    """
    grid = traj.w.grid
    dt = grid.dt
    n_steps = grid.n_steps
    m = traj.n_paths
    weight = np.ones(m)
    acc = np.zeros(m)
    drv = _yhat_driver(traj, spike, adj, hats)
    for k in range(n_steps):
        acc += weight * drv[:, k] * dt
        args = (grid.times[k], traj.x[:, k], traj.y[:, k], traj.z[:, k], traj.u[:, k])
        growth = model.f_y(*args) * dt + np.einsum(
            "md,md->m", model.f_z(*args), traj.w.increments[:, k]
        )
        weight = weight * (1.0 + growth)
    return float(acc.mean()), float(acc.std(ddof=1) / np.sqrt(m))


def compute_y2z2(
    model: ModelSpec,
    traj: ControlledTrajectory,
    spike: SpikePerturbation,
    x1: np.ndarray,
    x2: np.ndarray,
    y_hat: np.ndarray,
    z_hat: np.ndarray,
    adj: AdjointBundle,
    hats: HattedCoefficients,
) -> tuple[np.ndarray, np.ndarray]:
    """Second backward variation via the adjoint relation.

    Y2 = Yhat + p'X2 + X1'P X1 / 2 on nodes; Z2 adds to Zhat the X2-transport
    row, the X1-quadratic bracket and the window coupling terms.
    """
    grid = traj.w.grid
    n_steps = grid.n_steps
    ind = spike.indicator(grid)
    y2 = y_hat + np.einsum("mti,mti->mt", adj.p, x2)
    y2 += 0.5 * np.einsum("mti,mtij,mtj->mt", x1, adj.big_p, x1)

    _, sigma_x = _first_order_coeffs(model, traj)
    p_steps = adj.p[:, :n_steps]
    big_p = adj.big_p[:, :n_steps]
    x1_s, x2_s = x1[:, :n_steps], x2[:, :n_steps]

    row_x2 = np.einsum("mtl,mtdlj->mtdj", p_steps, sigma_x) + np.swapaxes(adj.q, 2, 3)
    z2 = np.einsum("mtdj,mtj->mtd", row_x2, x2_s)

    m = traj.n_paths
    s_xx = np.empty((m, n_steps, model.n, model.d, model.n, model.n))
    for k in range(n_steps):
        s_xx[:, k] = model.sigma_xx(grid.times[k], traj.x[:, k], traj.u[:, k])
    bracket = np.einsum("mtdji,mtjk->mtdik", sigma_x, big_p)
    bracket += np.einsum("mtij,mtdjk->mtdik", big_p, sigma_x)
    bracket += np.moveaxis(adj.big_q, 4, 2)
    bracket += np.einsum("mtjiab,mtj->mtiab", s_xx, p_steps)
    z2 += 0.5 * np.einsum("mta,mtdab,mtb->mtd", x1_s, bracket, x1_s)

    window_row = np.einsum("mtad,mtab->mtdb", hats.sigma_hat, big_p)
    window_row += np.einsum("mta,mtdab->mtdb", p_steps, hats.sigma_x_hat)
    z2 += ind[None, :, None] * np.einsum("mtdb,mtb->mtd", window_row, x1_s)
    return y2, z_hat + z2


@dataclass(frozen=True)
class ExpansionResiduals:
    """Residual ladder between the spiked and candidate systems.

    Levels: 1 = raw gaps, 2 = after removing the first variation, 3 = after
    removing the second; the telescoping differences are definitional.
    """

    xi1: np.ndarray = field(repr=False)
    xi2: np.ndarray = field(repr=False)
    xi3: np.ndarray = field(repr=False)
    eta1: np.ndarray = field(repr=False)
    eta2: np.ndarray = field(repr=False)
    eta3: np.ndarray = field(repr=False)
    zeta1: np.ndarray = field(repr=False)
    zeta2: np.ndarray = field(repr=False)
    zeta3: np.ndarray = field(repr=False)
    value_remainder: float  # Y^eps_0 - Y_0 - Y1(0) - Y2(0), ensemble means


def expansion_residuals(
    base: ControlledTrajectory,
    spiked: ControlledTrajectory,
    x1: np.ndarray,
    x2: np.ndarray,
    y1: np.ndarray,
    y2: np.ndarray,
    z1: np.ndarray,
    z2: np.ndarray,
) -> ExpansionResiduals:
    if base.w is not spiked.w and base.w.seed != spiked.w.seed:
        raise ValueError("residuals need common random numbers across the two systems")
    xi1 = spiked.x - base.x
    eta1 = spiked.y - base.y
    zeta1 = spiked.z - base.z
    xi2, eta2, zeta2 = xi1 - x1, eta1 - y1, zeta1 - z1
    xi3, eta3, zeta3 = xi2 - x2, eta2 - y2, zeta2 - z2
    remainder = float(eta1[:, 0].mean() - y1[:, 0].mean() - y2[:, 0].mean())
    return ExpansionResiduals(
        xi1=xi1, xi2=xi2, xi3=xi3,
        eta1=eta1, eta2=eta2, eta3=eta3,
        zeta1=zeta1, zeta2=zeta2, zeta3=zeta3,
        value_remainder=remainder,
    )


def value_remainder_estimate(
    model: ModelSpec,
    base: ControlledTrajectory,
    spiked: ControlledTrajectory,
    x1: np.ndarray,
    adj: AdjointBundle,
    hats: HattedCoefficients,
    spike: SpikePerturbation,
    gamma_tilde: np.ndarray,
) -> tuple[float, float]:
    """Low-variance estimate of Y^eps_0 - Y_0 - Y1(0) - Y2(0).

    Averages the pathwise cost-difference rollout minus the weighted rollouts
    of the two variational values (whose means are exactly Y1(0) = 0 and
    Y2(0)); with common random numbers the leading fluctuations cancel
    pathwise. Returns (estimate, std error).
    """
    grid = base.w.grid
    dt = grid.dt
    n_steps = grid.n_steps
    times = grid.times
    ind = spike.indicator(grid)

    diff = model.phi(spiked.x[:, -1]) - model.phi(base.x[:, -1])
    for k in range(n_steps):
        diff += (
            model.f(times[k], spiked.x[:, k], spiked.y[:, k], spiked.z[:, k], spiked.u[:, k])
            - model.f(times[k], base.x[:, k], base.y[:, k], base.z[:, k], base.u[:, k])
        ) * dt

    # first-variation rollout: terminal phi_x'X1 plus driver f_x'X1 minus the
    # window coupling through (p, q); its weighted mean is Y1(0) = 0
    r1 = gamma_tilde[:, n_steps] * np.einsum(
        "mi,mi->m", model.phi_x(base.x[:, -1]), x1[:, n_steps]
    )
    for k in range(n_steps):
        args = (times[k], base.x[:, k], base.y[:, k], base.z[:, k], base.u[:, k])
        drv = np.einsum("mi,mi->m", model.f_x(*args), x1[:, k])
        if ind[k]:
            drv -= np.einsum("md,md->m", model.f_z(*args), hats.delta[:, k])
            drv -= np.einsum("mid,mid->m", adj.q[:, k], hats.sigma_hat[:, k])
        r1 += gamma_tilde[:, k] * drv * dt

    r2 = np.sum(gamma_tilde[:, :n_steps] * _yhat_driver(base, spike, adj, hats), axis=1) * dt

    samples = diff - r1 - r2
    m = samples.shape[0]
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(m))


def sup_square(nodes: np.ndarray) -> float:
    """E[sup_t |v_t|^2] for a node process (m, N+1) or (m, N+1, n)."""
    v = nodes if nodes.ndim == 3 else nodes[:, :, None]
    return float(np.sum(v**2, axis=2).max(axis=1).mean())


def integrated_square(steps: np.ndarray, dt: float) -> float:
    """E[int |v_t|^2 dt] for a step process (m, N) or (m, N, d)."""
    v = steps if steps.ndim == 3 else steps[:, :, None]
    return float((np.sum(v**2, axis=(1, 2)) * dt).mean())


@dataclass(frozen=True)
class OrderFitReport:
    """Log-log slope of an error functional against the window width."""

    eps_values: tuple
    errors: tuple
    slope: float
    ci_low: float
    ci_high: float

    def to_dict(self) -> dict:
        return {
            "eps": list(self.eps_values),
            "errors": list(self.errors),
            "slope": self.slope,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
        }


def fit_convergence_order(eps_values, errors) -> OrderFitReport:
    """Least-squares slope of log error against log eps, with a t-interval
    from the fit residuals. Requires >= 4 positive pairs."""
    eps_values = np.asarray(eps_values, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if eps_values.shape != errors.shape or eps_values.size < 4:
        raise ValueError("need at least 4 (eps, error) pairs")
    if np.any(eps_values <= 0) or np.any(errors <= 0):
        raise ValueError("eps and error values must be positive")
    x = np.log(eps_values)
    y = np.log(errors)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    dof = x.size - 2
    sxx = float(np.sum((x - x.mean()) ** 2))
    se = np.sqrt(np.sum(resid**2) / dof / sxx) if dof > 0 else 0.0
    half = float(stats.t.ppf(0.975, dof) * se) if dof > 0 else 0.0
    return OrderFitReport(
        eps_values=tuple(eps_values),
        errors=tuple(errors),
        slope=float(slope),
        ci_low=float(slope - half),
        ci_high=float(slope + half),
    )


@dataclass(frozen=True)
class SpikeStudyResult:
    """Per-window error functionals, fitted orders and value-level ratios."""

    eps_values: tuple
    functionals: dict  # name -> list of values, one per eps
    fits: dict  # name -> OrderFitReport
    y2_at_zero: tuple
    remainder_over_eps: tuple
    y_bar_0: float
    diagnostics: dict


# functionals fitted on the dyadic ladder, with their target slopes
FIT_TARGETS = {
    "state_gap_sup_sq": 1.0,
    "x1_sup_sq": 1.0,
    "state_gap_minus_x1_sup_sq": 2.0,
    "x2_sup_sq": 2.0,
    "value_gap_sup_sq_plus_int_z": 1.0,
    "y1_sup_sq": 1.0,
}


def run_spike_study(
    model: ModelSpec,
    x0,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    t0: float,
    eps_steps: tuple,
    replacement,
    u_bar_value=0.0,
    degree: int = 2,
    z_truncation: float | None = None,
    jobs: int = 1,
) -> SpikeStudyResult:
    """Full spike-order study on one common ensemble.

    Solves the candidate system once, the adjoints once, then for each window
    width: the spiked system, both variational states, the backward relations
    and the residual ladder. eps_steps are step counts (dyadic by convention).
    Window jobs are independent; with jobs > 1 they run on a thread pool and
    are merged in ladder order, so the output does not depend on jobs.
    """
    w = generate_brownian(n_paths, grid, model.d, seed)
    u_bar = constant_control(u_bar_value, n_paths, grid.n_steps)
    x_bar = simulate_forward_sde(model, x0, u_bar, w)
    y_bar, z_bar, base_report = solve_bsde_lsmc(
        model, x_bar, u_bar, w, degree=degree, z_truncation=z_truncation
    )
    base = ControlledTrajectory(w=w, x=x_bar, y=y_bar, z=z_bar, u=u_bar)
    adj = solve_adjoints(model, base, degree=degree)
    gamma, gamma_tilde = _generator_weight(model, base)
    dt = grid.dt

    def study_window(n_eps: int) -> dict:
        spike = SpikePerturbation(
            t0=grid.times[grid.index_of(t0)],
            eps=n_eps * dt,
            replacement=np.atleast_1d(replacement),
        )
        u_eps = build_spiked_control(u_bar, spike, grid)
        x_eps = simulate_forward_sde(model, x0, u_eps, w)
        y_eps, z_eps, _ = solve_bsde_lsmc(
            model, x_eps, u_eps, w, degree=degree, z_truncation=z_truncation
        )
        spiked = ControlledTrajectory(w=w, x=x_eps, y=y_eps, z=z_eps, u=u_eps)

        hats = hatted_coefficients(model, base, u_eps, adj.p)
        x1 = solve_x1(model, base, spike, hats)
        x2 = solve_x2(model, base, spike, x1, hats)
        y1, z1 = compute_y1z1(model, base, spike, x1, adj, hats)
        y_hat, z_hat = solve_yhat(model, base, spike, adj, hats, degree=degree)
        y2, z2 = compute_y2z2(model, base, spike, x1, x2, y_hat, z_hat, adj, hats)
        res = expansion_residuals(base, spiked, x1, x2, y1, y2, z1, z2)
        rem_cv, rem_se = value_remainder_estimate(
            model, base, spiked, x1, adj, hats, spike, gamma_tilde
        )
        return {
            "state_gap_sup_sq": sup_square(res.xi1),
            "x1_sup_sq": sup_square(x1),
            "state_gap_minus_x1_sup_sq": sup_square(res.xi2),
            "x2_sup_sq": sup_square(x2),
            "value_gap_sup_sq_plus_int_z": sup_square(res.eta1)
            + integrated_square(res.zeta1, dt),
            "y1_sup_sq": sup_square(y1),
            "eta2_sup_sq": sup_square(res.eta2),
            "zeta2_int_sq": integrated_square(res.zeta2, dt),
            "weighted_eta2_sup": float((gamma * res.eta2**2).max(axis=1).mean()),
            "weighted_zeta2_int": float(
                (np.sum(gamma[:, :-1, None] * res.zeta2**2, axis=(1, 2)) * dt).mean()
            ),
            "y2_at_zero": float(y2[:, 0].mean()),
            "value_remainder": abs(rem_cv),
            "value_remainder_se": rem_se,
        }

    eps_values = [n_eps * dt for n_eps in eps_steps]
    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            window_results = list(pool.map(study_window, eps_steps))
    else:
        window_results = [study_window(n_eps) for n_eps in eps_steps]

    names = list(FIT_TARGETS) + [
        "eta2_sup_sq",
        "zeta2_int_sq",
        "weighted_eta2_sup",
        "weighted_zeta2_int",
    ]
    functionals = {name: [res[name] for res in window_results] for name in names}
    y2_zero = [res["y2_at_zero"] for res in window_results]
    remainders = [res["value_remainder"] for res in window_results]

    fits = {
        name: fit_convergence_order(eps_values, functionals[name]) for name in FIT_TARGETS
    }
    return SpikeStudyResult(
        eps_values=tuple(eps_values),
        functionals=functionals,
        fits=fits,
        y2_at_zero=tuple(y2_zero),
        remainder_over_eps=tuple(r / e for r, e in zip(remainders, eps_values)),
        y_bar_0=base_report.y0,
        diagnostics={"base_report": base_report, "adjoint_sup_p": float(np.abs(adj.p).max())},
    )


def _generator_weight(model: ModelSpec, traj: ControlledTrajectory) -> tuple[np.ndarray, np.ndarray]:
    """Stochastic exponential of the generator z-slope along the candidate,
    bare and with the y-slope growth factor."""
    grid = traj.w.grid
    m, n_steps = traj.n_paths, grid.n_steps
    lam = np.empty((m, n_steps))
    mu = np.empty((m, n_steps, model.d))
    for k in range(n_steps):
        args = (grid.times[k], traj.x[:, k], traj.y[:, k], traj.z[:, k], traj.u[:, k])
        lam[:, k] = model.f_y(*args)
        mu[:, k] = model.f_z(*args)
    gamma, gamma_tilde = exponential_weight(lam, mu, traj.w)
    return gamma, gamma_tilde
