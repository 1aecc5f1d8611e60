"""Backward solvers for the controlled system.

Three routes:

* ``solve_bsde_lsmc`` - regression Monte Carlo backward induction for the
  quadratic-generator equation dY = -f(t,X,Y,Z,u) dt + Z'dW, Y_T = phi(X_T),
  implicit in Y and explicit (clipped) in Z;
* ``solve_linear_bsde_weighted`` - the exponential-weight conditional
  expectation for the scalar equation with driver lam Y + mu'Z + phi;
* ``solve_multidim_linear_bsde`` - the fundamental-solution route for the
  n-dimensional equation with driver A'Y + sum_i (beta^i I + C^i)' Z^i + f,
  built on the matrix flow pair.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import bmo
from .grids import BrownianEnsemble
from .regression import conditional_expectation
from .sde import MatrixFlowPair, simulate_matrix_flow

__all__ = [
    "BsdeSolverError",
    "WeightOverflowError",
    "ControlledTrajectory",
    "LinearBsdeData",
    "MultiLinearBsdeData",
    "SolverReport",
    "exponential_weight",
    "solve_bsde_lsmc",
    "solve_linear_bsde_weighted",
    "solve_multidim_linear_bsde",
    "verify_apriori_bounds",
]

_LOG_OVERFLOW = 700.0  # exp overflows float64 just above this


class BsdeSolverError(RuntimeError):
    pass


class WeightOverflowError(BsdeSolverError):
    pass


@dataclass(frozen=True)
class ControlledTrajectory:
    """Adapted paths of the controlled system on one ensemble.

    x: (m, N+1, n) nodes; y: (m, N+1) nodes with y[:, N] = phi(x_T) exactly;
    z: (m, N, d) steps; u: (m, N, k) steps.
    """

    w: BrownianEnsemble
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    z: np.ndarray = field(repr=False)
    u: np.ndarray = field(repr=False)

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class LinearBsdeData:
    """Scalar linear data: lam, phi (m, N); mu (m, N, d); xi (m,).

    state, when given, supplies extra conditioning features per node
    (m, N+1, p); the exponential weight itself is always a feature.
    """

    lam: np.ndarray
    mu: np.ndarray
    phi: np.ndarray
    xi: np.ndarray
    state: Optional[np.ndarray] = None


@dataclass(frozen=True)
class MultiLinearBsdeData:
    """n-dimensional linear data, coefficient shapes as in the matrix flow.

    a: (m, N, n, n); beta: (m, N, d); c: (m, N, d, n, n); driver: (m, N, n);
    xi: (m, n). state as in LinearBsdeData; the flattened flow is always a
    conditioning feature.
    """

    a: np.ndarray
    beta: np.ndarray
    c: np.ndarray
    driver: np.ndarray
    xi: np.ndarray
    state: Optional[np.ndarray] = None


@dataclass(frozen=True)
class SolverReport:
    y0: float
    y0_std_error: float
    clip_rate: float = 0.0
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "y0": self.y0,
            "y0_std_error": self.y0_std_error,
            "clip_rate": self.clip_rate,
            **self.extras,
        }
        return json.dumps(payload, sort_keys=True)


def _node_features(base: np.ndarray, state: Optional[np.ndarray], k: int) -> np.ndarray:
    cols = [base]
    if state is not None:
        extra = state[:, k]
        cols.append(extra if extra.ndim == 2 else extra[:, None])
    return np.column_stack(cols)


def solve_bsde_lsmc(
    model,
    x: np.ndarray,
    u: np.ndarray,
    w: BrownianEnsemble,
    degree: int = 2,
    z_truncation: Optional[float] = None,
    max_inner: int = 10,
    inner_tol: float = 1e-10,
    t_min: float = 0.0,
) -> tuple[np.ndarray, np.ndarray, SolverReport]:
    """Backward regression induction for the quadratic-generator equation.

    Per step: Z from the regression of the centered increment
    (Y_{k+1} - E^[Y_{k+1}|X_k]) dW_k / dt on the state basis (centering by the
    fitted conditional mean changes nothing in expectation and removes the
    O(|Y|/sqrt(dt)) variance of the raw product), clipped in norm at
    z_truncation; Y from the regression of Y_{k+1} plus an implicit fixed
    point in the f(.., Y, ..) dt term.
    """
    grid = w.grid
    dt, times, n_steps = grid.dt, grid.times, grid.n_steps
    m = w.n_paths
    u = np.asarray(u, dtype=float)
    u = np.broadcast_to(u, (m, n_steps, u.shape[-1]))
    if z_truncation is None:
        z_truncation = model.z_truncation_default(grid.horizon)

    y = np.empty((m, n_steps + 1))
    z = np.zeros((m, n_steps, model.d))
    y[:, n_steps] = model.phi(x[:, n_steps])
    clip_hits = 0
    for k in range(n_steps - 1, -1, -1):
        feats = x[:, k]
        y_next = y[:, k + 1]
        e_next = conditional_expectation(feats, y_next, degree, t_min=t_min)
        z_fit = conditional_expectation(
            feats, (y_next - e_next)[:, None] * w.increments[:, k] / dt, degree, t_min=t_min
        )
        z_norm = np.sqrt(np.sum(z_fit**2, axis=1))
        over = z_norm > z_truncation
        clip_hits += int(over.sum())
        scale = np.where(over, z_truncation / np.maximum(z_norm, 1e-300), 1.0)
        z[:, k] = z_fit * scale[:, None]
        y_k = e_next
        converged = False
        for _ in range(max_inner):
            y_new = e_next + model.f(times[k], feats, y_k, z[:, k], u[:, k]) * dt
            gap = float(np.max(np.abs(y_new - y_k)))
            y_k = y_new
            if gap <= inner_tol:
                converged = True
                break
        if not converged and gap > inner_tol:
            raise BsdeSolverError(f"implicit Y iteration did not converge at step {k} (gap {gap:.3e})")
        y[:, k] = y_k

    # honest Y0 uncertainty: the unsmoothed pathwise rollout of terminal plus
    # running generator (the one-step regression target is already smoothed)
    rollout = y[:, n_steps].copy()
    for k in range(n_steps):
        rollout += model.f(times[k], x[:, k], y[:, k], z[:, k], u[:, k]) * dt
    se = float(rollout.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    report = SolverReport(
        y0=float(y[:, 0].mean()),
        y0_std_error=se,
        clip_rate=clip_hits / (m * n_steps),
        extras={"solver": "lsmc", "z_truncation": z_truncation},
    )
    return y, z, report


def exponential_weight(
    lam: np.ndarray, mu: np.ndarray, w: BrownianEnsemble
) -> tuple[np.ndarray, np.ndarray]:
    """Node paths of Gamma = exp(int mu'dW - 1/2 int |mu|^2 ds) and of
    Gamma-tilde = exp(int lam ds) * Gamma."""
    dt = w.grid.dt
    m, n_steps, _ = w.increments.shape
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (m, n_steps))
    mu = np.broadcast_to(np.asarray(mu, dtype=float), w.increments.shape)
    log_gamma = np.zeros((m, n_steps + 1))
    np.cumsum(np.sum(mu * w.increments, axis=2) - 0.5 * np.sum(mu * mu, axis=2) * dt, axis=1, out=log_gamma[:, 1:])
    lam_int = np.zeros((m, n_steps + 1))
    np.cumsum(lam * dt, axis=1, out=lam_int[:, 1:])
    log_total = log_gamma + lam_int
    if float(log_total.max()) > _LOG_OVERFLOW:
        raise WeightOverflowError(
            "exponential weight overflows float64; truncate mu (mu_bound) or shorten the horizon"
        )
    return np.exp(log_gamma), np.exp(log_total)


def solve_linear_bsde_weighted(
    data: LinearBsdeData,
    w: BrownianEnsemble,
    degree: int = 2,
    mu_bound: Optional[float] = None,
    t_min: float = 2.0,
) -> tuple[np.ndarray, np.ndarray, SolverReport]:
    """Exponential-weight representation of the scalar linear equation.

    Y_t is the conditional expectation of (G~_T/G~_t) xi + int_t^T (G~_s/G~_t)
    phi_s ds; the weight ratio is applied to the bracket per path before the
    cross-path regression (the ratio is known at the conditioning time, and
    regressing it directly keeps the noise level uniform across paths); Z is
    unwound from the one-step martingale increment of G~ Y + int G~ phi ds
    against dW, scaled the same way.
    """
    grid = w.grid
    dt, n_steps, m = grid.dt, grid.n_steps, w.n_paths
    mu = np.broadcast_to(np.asarray(data.mu, dtype=float), w.increments.shape)
    if mu_bound is not None:
        norm = np.sqrt(np.sum(mu**2, axis=2, keepdims=True))
        over = norm > mu_bound
        if np.any(over):
            warnings.warn(f"mu exceeds bound {mu_bound} on {int(over.sum())} cells; truncating")
            mu = np.where(over, mu * (mu_bound / norm), mu)
    phi = np.broadcast_to(np.asarray(data.phi, dtype=float), (m, n_steps))
    xi = np.broadcast_to(np.asarray(data.xi, dtype=float), (m,))

    _, gt = exponential_weight(data.lam, mu, w)

    weighted_phi = gt[:, :n_steps] * phi * dt
    suffix = np.zeros((m, n_steps + 1))
    suffix[:, :n_steps] = np.cumsum(weighted_phi[:, ::-1], axis=1)[:, ::-1]
    terminal = gt[:, n_steps] * xi

    y = np.empty((m, n_steps + 1))
    y[:, n_steps] = xi
    for k in range(n_steps):
        target = (terminal + suffix[:, k]) / gt[:, k]
        if np.all(target == target[0]):
            y[:, k] = target[0]
        else:
            y[:, k] = conditional_expectation(
                _node_features(gt[:, k : k + 1], data.state, k), target, degree, t_min=t_min
            )

    prefix = np.zeros((m, n_steps + 1))
    np.cumsum(weighted_phi, axis=1, out=prefix[:, 1:])
    g_mart = gt * y + prefix
    z = np.empty((m, n_steps, mu.shape[2]))
    for k in range(n_steps):
        incr = ((g_mart[:, k + 1] - g_mart[:, k]) / gt[:, k])[:, None] * w.increments[:, k] / dt
        if np.all(incr == 0.0):
            psi_scaled = np.zeros_like(incr)
        else:
            psi_scaled = conditional_expectation(
                _node_features(gt[:, k : k + 1], data.state, k), incr, degree, t_min=t_min
            )
        z[:, k] = psi_scaled - y[:, k : k + 1] * mu[:, k]

    target0 = terminal + suffix[:, 0]
    se = float(target0.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    report = SolverReport(
        y0=float(y[:, 0].mean()),
        y0_std_error=se,
        extras={"solver": "weighted"},
    )
    return y, z, report


def solve_multidim_linear_bsde(
    data: MultiLinearBsdeData,
    w: BrownianEnsemble,
    degree: int = 2,
    flow_pair: Optional[MatrixFlowPair] = None,
    invert_flow: bool = True,
    t_min: float = 2.0,
) -> tuple[np.ndarray, np.ndarray, SolverReport, MatrixFlowPair]:
    """Fundamental-solution representation of the n-dimensional linear equation.

    Y_t = Lambda_t' E[X_T' xi + int_t^T X_s' f_s ds | F_t] with (X, Lambda)
    the matrix flow pair of the data coefficients; Z^i is recovered from the
    one-step martingale increments of X'Y + int X'f ds as
    Lambda_t' psi^i_t - (beta^i I + C^i)' Y_t.

    With invert_flow (default) Lambda is the pathwise inverse of the simulated
    flow, so the scheme's flow/inverse product error does not contaminate the
    representation; otherwise the integrated inverse flow is used as-is.
    """
    grid = w.grid
    dt, n_steps, m = grid.dt, grid.n_steps, w.n_paths
    pair = flow_pair if flow_pair is not None else simulate_matrix_flow(data.a, data.beta, data.c, w)
    flow = pair.flow
    if invert_flow:
        inv = np.linalg.inv(flow)
        if not np.isfinite(inv).all():
            raise BsdeSolverError("simulated flow is numerically singular; cannot invert")
    else:
        inv = pair.inverse
    n = flow.shape[-1]
    d = w.increments.shape[2]
    driver = np.broadcast_to(np.asarray(data.driver, dtype=float), (m, n_steps, n))
    xi = np.broadcast_to(np.asarray(data.xi, dtype=float), (m, n))
    beta = np.broadcast_to(np.asarray(data.beta, dtype=float), (m, n_steps, d))
    c = np.broadcast_to(np.asarray(data.c, dtype=float), (m, n_steps, d, n, n))

    weighted_f = np.einsum("mtij,mti->mtj", flow[:, :n_steps], driver) * dt
    suffix = np.zeros((m, n_steps + 1, n))
    suffix[:, :n_steps] = np.cumsum(weighted_f[:, ::-1], axis=1)[:, ::-1]
    terminal = np.einsum("mij,mi->mj", flow[:, n_steps], xi)

    # the inverse flow at the conditioning time is known per path, so it goes
    # inside the regression target; regressing Lambda'(bracket) keeps the
    # noise level uniform instead of amplifying it where the flow is small
    y = np.empty((m, n_steps + 1, n))
    y[:, n_steps] = xi
    flat_flow = flow.reshape(m, n_steps + 1, n * n)
    for k in range(n_steps):
        target = np.einsum("mji,mj->mi", inv[:, k], terminal + suffix[:, k])
        if np.all(target == target[0]):
            y[:, k] = target[0]
        else:
            y[:, k] = conditional_expectation(
                _node_features(flat_flow[:, k], data.state, k), target, degree, t_min=t_min
            )

    prefix = np.zeros((m, n_steps + 1, n))
    np.cumsum(weighted_f, axis=1, out=prefix[:, 1:])
    g_mart = np.einsum("mtji,mtj->mti", flow, y) + prefix
    z = np.empty((m, n_steps, n, d))
    eye = np.eye(n)
    for k in range(n_steps):
        incr = np.einsum("mji,mj->mi", inv[:, k], g_mart[:, k + 1] - g_mart[:, k])
        tgt = (incr[:, :, None] * w.increments[:, k][:, None, :] / dt).reshape(m, n * d)
        if np.all(tgt == 0.0):
            psi_scaled = np.zeros((m, n, d))
        else:
            psi_scaled = conditional_expectation(
                _node_features(flat_flow[:, k], data.state, k), tgt, degree, t_min=t_min
            ).reshape(m, n, d)
        d_k = beta[:, k, :, None, None] * eye + c[:, k]  # (m, d, n, n)
        z[:, k] = psi_scaled - np.einsum("mdji,mj->mid", d_k, y[:, k])

    target0 = terminal + suffix[:, 0]
    se_vec = target0.std(axis=0, ddof=1) / np.sqrt(m) if m > 1 else np.zeros(n)
    report = SolverReport(
        y0=float(np.linalg.norm(y[:, 0].mean(axis=0))),
        y0_std_error=float(np.linalg.norm(se_vec)),
        extras={"solver": "multidim", "y0_vector": y[:, 0].mean(axis=0).tolist()},
    )
    return y, z, report, pair


def verify_apriori_bounds(
    traj: ControlledTrajectory,
    c2: float,
    conditioner: Optional[np.ndarray] = None,
    degree: int = 2,
) -> dict:
    """Report sup|Y| and the estimated BMO2 norm of Z.W against a candidate C2."""
    sup_y = float(np.abs(traj.y).max())
    mart = bmo.MartingalePathSet.from_integrand(traj.z, traj.w)
    cond = conditioner if conditioner is not None else traj.x
    z_bmo = bmo.estimate_bmo2_norm(mart, conditioner=cond, degree=degree)
    return {
        "sup_abs_y": sup_y,
        "z_bmo2_estimate": z_bmo,
        "c2_candidate": c2,
        "within_bound": bool(sup_y + z_bmo <= c2),
    }
