"""Fixed-step closed-loop integration and gradient computation.

Two independent gradient routes are provided and cross-checked in tests:

* grad_discrete: exact reverse-mode differentiation of the Euler rollout
  (differentiate-the-discretization).  The QP layer is pulled back through
  qp_backward, the constraint rows through their analytic Jacobians, and
  the controller through its parameter VJP.

* grad_adjoint: backward integration of the costate equations

      pdot   = -p dF/dx      - dL/dx,      p(tf)   = d Phi/dx(tf)
      mu1dot = -p dF/dtheta1 - dL/dtheta1, mu1(tf) = 0
      mu2dot = -p dF/dtheta2 - dL/dtheta2, mu2(tf) = 0

  on the same grid, where dF/dx folds in the filter sensitivity
  d tau/dx = (d u*/dq)(-d pi/dx) + (d u*/dG) dG/dx + (d u*/dh) dh/dx
  obtained from the full KKT solution Jacobian.  Gradients are mu1(t0)
  and mu2(t0).

Both routes assume the forward Euler grid; rollout itself also supports a
classic RK4 step in which the filter is re-solved at every stage.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .certificates import (
    build_rows,
    build_rows_with_jac,
    clf_pointwise_loss,
    filter_problem,
)
from .qp import (
    DegenerateActiveSetError,
    QpInfeasibleError,
    qp_backward,
    qp_jacobian_full,
    qp_solve,
    x_block_slices,
)

THREADS_ENV = "OPT_ODENET_THREADS"


class NonFiniteStateError(RuntimeError):
    """The integrated state left the finite range."""


@dataclass(frozen=True)
class SolveConfig:
    t0: float = 0.0
    tf: float = 1.0
    dt: float = 0.01
    method: str = "euler"

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"unknown method {self.method!r}")
        span = self.tf - self.t0
        steps = round(span / self.dt)
        if abs(steps * self.dt - span) > 1e-9 * max(1.0, abs(span)):
            raise ValueError("(tf - t0) must be an integer number of dt steps")

    @property
    def n_steps(self) -> int:
        return round((self.tf - self.t0) / self.dt)


@dataclass
class AdjointState:
    """Costate and parameter-gradient accumulators of the backward pass."""

    p: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray


@dataclass(frozen=True)
class LossWeights:
    clf: float = 1.0
    terminal: float = 0.0


def _batch_map(fn, items):
    """Apply fn over batch items, optionally on a thread pool capped by the
    OPT_ODENET_THREADS env var; results keep submission order so reductions
    stay deterministic."""
    workers = int(os.environ.get(THREADS_ENV, "1") or "1")
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _filtered_control(policy, filter_spec, x, t, qp_tol):
    u_nn = policy.forward(x)
    if filter_spec is None or not filter_spec.barriers:
        return u_nn, u_nn, None
    G, h = build_rows(filter_spec, x, t)
    prob = filter_problem(u_nn, G, h)
    sol = qp_solve(prob, tol=qp_tol)
    return u_nn, sol.u_star, (prob, sol)


def _closed_loop_xdot(system, policy, filter_spec, x, t, qp_tol):
    _, u_safe, _ = _filtered_control(policy, filter_spec, x, t, qp_tol)
    return system.dynamics(x, u_safe, t)


def _new_trajectory(n, state_dim, u_dim, n_barriers, cfg):
    from .envs import Trajectory  # local import to avoid a cycle

    return Trajectory(
        times=cfg.t0 + cfg.dt * np.arange(n + 1),
        states=np.zeros((n + 1, state_dim)),
        u_nn=np.zeros((n + 1, u_dim)),
        u_safe=np.zeros((n + 1, u_dim)),
        xdots=np.zeros((n + 1, state_dim)),
        barrier_values=np.zeros((n + 1, n_barriers)),
        pointwise_loss=np.zeros(n + 1),
    )


def _forward_euler(system, policy, filter_spec, lyap, x0, cfg, qp_tol,
                   barriers=None, keep_sols=False):
    """Euler rollout; returns (trajectory, per-grid-point QP solutions)."""
    if barriers is None:
        barriers = filter_spec.barriers if filter_spec is not None else []
    n = cfg.n_steps
    x = np.asarray(x0, dtype=float).copy()
    traj = _new_trajectory(n, x.size, policy.output_dim, len(barriers), cfg)
    sols = [None] * (n + 1) if keep_sols else None
    for k in range(n + 1):
        t = traj.times[k]
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError(f"non-finite state at step {k}")
        try:
            u_nn, u_safe, ps = _filtered_control(policy, filter_spec, x, t,
                                                 qp_tol)
        except QpInfeasibleError as err:
            raise QpInfeasibleError(f"step {k} (t={t:g}): {err}") from err
        xdot = system.dynamics(x, u_safe, t)
        traj.states[k] = x
        traj.u_nn[k] = u_nn
        traj.u_safe[k] = u_safe
        traj.xdots[k] = xdot
        for i, bar in enumerate(barriers):
            traj.barrier_values[k, i] = bar.value(x)
        if lyap is not None:
            traj.pointwise_loss[k] = clf_pointwise_loss(lyap, x, xdot)
        if keep_sols:
            sols[k] = ps
        if k == n:
            break
        x = x + cfg.dt * xdot
    return traj, sols


def rollout(system, policy, filter_spec, x0, cfg: SolveConfig, lyap=None,
            barriers=None, qp_tol=1e-9):
    """Integrate the filtered closed loop from x0, recording controls,
    barrier values, and the pointwise stability loss at every grid point.

    `barriers` overrides which barrier values get recorded (useful when
    rolling out without a filter but still scoring safety).  With the RK4
    method the filter is re-solved at every stage.
    """
    if cfg.method == "euler":
        traj, _ = _forward_euler(system, policy, filter_spec, lyap, x0, cfg,
                                 qp_tol, barriers=barriers)
        return traj
    if barriers is None:
        barriers = filter_spec.barriers if filter_spec is not None else []
    n = cfg.n_steps
    x = np.asarray(x0, dtype=float).copy()
    traj = _new_trajectory(n, x.size, policy.output_dim, len(barriers), cfg)
    dt = cfg.dt
    for k in range(n + 1):
        t = traj.times[k]
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError(f"non-finite state at step {k}")
        try:
            u_nn, u_safe, _ = _filtered_control(policy, filter_spec, x, t,
                                                qp_tol)
        except QpInfeasibleError as err:
            raise QpInfeasibleError(f"step {k} (t={t:g}): {err}") from err
        xdot = system.dynamics(x, u_safe, t)
        traj.states[k] = x
        traj.u_nn[k] = u_nn
        traj.u_safe[k] = u_safe
        traj.xdots[k] = xdot
        for i, bar in enumerate(barriers):
            traj.barrier_values[k, i] = bar.value(x)
        if lyap is not None:
            traj.pointwise_loss[k] = clf_pointwise_loss(lyap, x, xdot)
        if k == n:
            break
        k1 = xdot
        k2 = _closed_loop_xdot(system, policy, filter_spec,
                               x + 0.5 * dt * k1, t + 0.5 * dt, qp_tol)
        k3 = _closed_loop_xdot(system, policy, filter_spec,
                               x + 0.5 * dt * k2, t + 0.5 * dt, qp_tol)
        k4 = _closed_loop_xdot(system, policy, filter_spec,
                               x + dt * k3, t + dt, qp_tol)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return traj


def _require_euler(cfg):
    if cfg.method != "euler":
        raise NotImplementedError("gradient paths support the Euler grid only")


def _loss_of(traj, lyap, weights, cfg):
    loss = weights.clf * cfg.dt * float(np.sum(traj.pointwise_loss[:-1]))
    if weights.terminal and lyap is not None:
        loss += weights.terminal * float(lyap.value(traj.states[-1]))
    return loss


@dataclass
class FilterLinearization:
    """First-order response of the QP optimum to its inputs at one step."""

    dtau_dpi: np.ndarray      # d u*/d u_nn
    dtau_dx_rows: np.ndarray  # d u*/dx through (G, h) only
    dtau_dth2: np.ndarray     # d u*/d theta2 through (G, h)
    rows: object              # the RowData used


def _linearize_filter(filter_spec, prob, sol, x, t, margin, degenerate):
    rows = build_rows_with_jac(filter_spec, x, t)
    J = qp_jacobian_full(prob, sol, margin=margin, degenerate=degenerate)
    nu, p = prob.n, prob.p
    nth = filter_spec.class_k.theta2.size
    cols = x_block_slices(nu, 0, p)
    U_q = J[:nu, cols["q"]]
    U_G = J[:nu, cols["G"]]
    U_h = J[:nu, cols["h"]]
    dtau_dpi = -U_q  # q = -u_nn
    dtau_dx_rows = U_G @ rows.JG_x.reshape(p * nu, -1) + U_h @ rows.Jh_x
    dtau_dth2 = U_G @ rows.JG_th2.reshape(p * nu, nth) + U_h @ rows.Jh_th2
    return FilterLinearization(dtau_dpi, dtau_dx_rows, dtau_dth2, rows)


def _clf_sources(lyap, x, xdot, A_closed, gx, policy, lin, weight, n_th2):
    """(dL/dx, dL/dtheta1, dL/dtheta2) of the weighted hinge loss at x."""
    gV = lyap.grad(x)
    hinge = float(gV @ xdot) + lyap.gamma * float(lyap.value(x))
    if weight == 0.0 or hinge <= 0.0:
        return np.zeros(len(x)), np.zeros(policy.theta1.size), np.zeros(n_th2)
    dL_dx = weight * (lyap.hess(x) @ xdot + A_closed.T @ gV
                      + lyap.gamma * gV)
    c = gV @ gx
    if lin is None:
        cot = c
        dL_dth2 = np.zeros(n_th2)
    else:
        cot = c @ lin.dtau_dpi
        dL_dth2 = weight * (c @ lin.dtau_dth2)
    dL_dth1 = weight * policy.grad_theta(x, cot)
    return dL_dx, dL_dth1, dL_dth2


def clf_source_terms(lyap, system, policy, x, u_safe, lin=None, t=0.0,
                     weight=1.0):
    """Loss source terms for the backward adjoint equations at one state.

    `lin` is the filter linearization at x (None when no filter is
    attached).  At the hinge boundary the zero subgradient is used.
    """
    x = np.asarray(x, dtype=float)
    xdot = system.dynamics(x, u_safe, t)
    gx = system.g(x)
    Jpi = policy.jacobian_x(x)
    if lin is None:
        dtau_dx = Jpi
        n_th2 = 0
    else:
        dtau_dx = lin.dtau_dpi @ Jpi + lin.dtau_dx_rows
        n_th2 = lin.dtau_dth2.shape[1]
    A = system.jac_f(x, t) + system.jac_gu(x, u_safe) + gx @ dtau_dx
    return _clf_sources(lyap, x, xdot, A, gx, policy, lin, weight, n_th2)


def grad_discrete(system, policy, filter_spec, lyap, x0_batch, cfg,
                  weights: LossWeights = LossWeights(), qp_tol=1e-9,
                  margin=1e-7, degenerate="raise", with_trajectories=False):
    """Loss and exact gradients of the Euler-discretized objective.

    Reverse-mode chain through every rollout step; returns the batch-mean
    (loss, dtheta1, dtheta2).  Raises DegenerateActiveSetError (with the
    step index) when a QP sits on an active-set boundary and
    degenerate="raise".
    """
    _require_euler(cfg)
    n_th1 = policy.theta1.size
    n_th2 = (filter_spec.class_k.theta2.size
             if filter_spec is not None else 0)

    def one(x0):
        traj, sols = _forward_euler(system, policy, filter_spec, lyap, x0,
                                    cfg, qp_tol, keep_sols=True)
        loss = _loss_of(traj, lyap, weights, cfg)
        g1 = np.zeros(n_th1)
        g2 = np.zeros(n_th2)
        x_final = traj.states[-1]
        if weights.terminal and lyap is not None:
            a = weights.terminal * lyap.grad(x_final)
        else:
            a = np.zeros(x_final.size)
        for k in range(cfg.n_steps - 1, -1, -1):
            x = traj.states[k]
            t = traj.times[k]
            u_safe = traj.u_safe[k]
            xdot = traj.xdots[k]
            ps = sols[k]
            c_xdot = cfg.dt * a
            cot_x = a.copy()
            if lyap is not None and weights.clf \
                    and traj.pointwise_loss[k] > 0.0:
                gV = lyap.grad(x)
                c_xdot = c_xdot + cfg.dt * weights.clf * gV
                cot_x = cot_x + cfg.dt * weights.clf * (
                    lyap.hess(x) @ xdot + lyap.gamma * gV)
            gx = system.g(x)
            cot_x = cot_x + c_xdot @ (system.jac_f(x, t)
                                      + system.jac_gu(x, u_safe))
            c_u = c_xdot @ gx
            if ps is not None:
                prob, sol = ps
                rows = build_rows_with_jac(filter_spec, x, t)
                try:
                    qg = qp_backward(prob, sol, c_u, margin=margin,
                                     degenerate=degenerate)
                except DegenerateActiveSetError as err:
                    raise DegenerateActiveSetError(
                        f"step {k} (t={t:g}): {err}") from err
                c_unn = -qg.dq
                cot_x = cot_x + np.einsum("ij,ijl->l", qg.dG, rows.JG_x) \
                    + qg.dh @ rows.Jh_x
                g2 += np.einsum("ij,ijs->s", qg.dG, rows.JG_th2) \
                    + qg.dh @ rows.Jh_th2
            else:
                c_unn = c_u
            vjp_theta, vjp_x = policy.backward(x, c_unn)
            g1 += vjp_theta
            cot_x = cot_x + vjp_x
            a = cot_x
        return loss, g1, g2, traj

    results = _batch_map(one, list(x0_batch))
    b = len(results)
    loss = sum(r[0] for r in results) / b
    g1 = sum(r[1] for r in results) / b
    g2 = sum(r[2] for r in results) / b
    if with_trajectories:
        return loss, g1, g2, [r[3] for r in results]
    return loss, g1, g2


def grad_adjoint(system, policy, filter_spec, lyap, x0_batch, cfg,
                 weights: LossWeights = LossWeights(), qp_tol=1e-9,
                 margin=1e-7, degenerate="raise", with_trajectories=False):
    """Loss and gradients via backward integration of the costate ODEs.

    The forward trajectory is checkpointed at every step; the costate
    equations are then stepped backward with explicit Euler, evaluating
    dF/dx, dF/dtheta, and the loss sources at the right endpoint of each
    interval (where p is already known).  Gradients are the AdjointState
    accumulators at t0.  This discretizes the continuous adjoint, so it
    differs from grad_discrete by O(dt).
    """
    _require_euler(cfg)
    n_th1 = policy.theta1.size
    n_th2 = (filter_spec.class_k.theta2.size
             if filter_spec is not None else 0)

    def one(x0):
        traj, sols = _forward_euler(system, policy, filter_spec, lyap, x0,
                                    cfg, qp_tol, keep_sols=True)
        loss = _loss_of(traj, lyap, weights, cfg)
        x_final = traj.states[-1]
        if weights.terminal and lyap is not None:
            p0 = weights.terminal * lyap.grad(x_final)
        else:
            p0 = np.zeros(x_final.size)
        adj = AdjointState(p0, np.zeros(n_th1), np.zeros(n_th2))
        for k in range(cfg.n_steps, 0, -1):
            x = traj.states[k]
            t = traj.times[k]
            u_safe = traj.u_safe[k]
            xdot = traj.xdots[k]
            ps = sols[k]
            gx = system.g(x)
            Jpi = policy.jacobian_x(x)
            if ps is not None:
                try:
                    lin = _linearize_filter(filter_spec, ps[0], ps[1],
                                            x, t, margin, degenerate)
                except DegenerateActiveSetError as err:
                    raise DegenerateActiveSetError(
                        f"step {k} (t={t:g}): {err}") from err
                dtau_dx = lin.dtau_dpi @ Jpi + lin.dtau_dx_rows
            else:
                lin = None
                dtau_dx = Jpi
            A = system.jac_f(x, t) + system.jac_gu(x, u_safe) + gx @ dtau_dx
            if lyap is not None:
                dL_dx, dL_dth1, dL_dth2 = _clf_sources(
                    lyap, x, xdot, A, gx, policy, lin, weights.clf, n_th2)
            else:
                dL_dx = np.zeros(x.size)
                dL_dth1 = np.zeros(n_th1)
                dL_dth2 = np.zeros(n_th2)
            c_p = adj.p @ gx
            if lin is None:
                pF_th1 = policy.grad_theta(x, c_p)
                pF_th2 = np.zeros(n_th2)
            else:
                pF_th1 = policy.grad_theta(x, c_p @ lin.dtau_dpi)
                pF_th2 = c_p @ lin.dtau_dth2
            adj.mu1 = adj.mu1 + cfg.dt * (pF_th1 + dL_dth1)
            adj.mu2 = adj.mu2 + cfg.dt * (pF_th2 + dL_dth2)
            adj.p = adj.p + cfg.dt * (adj.p @ A + dL_dx)
        return loss, adj.mu1, adj.mu2, traj

    results = _batch_map(one, list(x0_batch))
    b = len(results)
    loss = sum(r[0] for r in results) / b
    g1 = sum(r[1] for r in results) / b
    g2 = sum(r[2] for r in results) / b
    if with_trajectories:
        return loss, g1, g2, [r[3] for r in results]
    return loss, g1, g2
