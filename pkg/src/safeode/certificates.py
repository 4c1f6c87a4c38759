"""Barrier/Lyapunov certificates and the QP safety filter.

For a control-affine system xdot = f(x) + g(x)u, each barrier B with safe
set {B >= 0} contributes one inequality row to the filter QP

    u_safe = argmin_u 1/2 ||u - u_nn||^2   s.t.  G u <= h.

Relative degree 1:   G_i = -grad(B_i)' g(x),
                     h_i = grad(B_i)' f(x) + kappa_i B_i(x),
so feasible u satisfy Bdot_i + kappa_i B_i >= 0.  Relative degree 2 uses
the recursive chain psi0 = B, psi1 = grad(psi0)'f + kappa1 psi0 (the drift
Lie derivative; grad(B)'g vanishes at relative degree 2) and enforces
grad(psi1)'(f + g u) + kappa2 psi1 >= 0.

Row builders also return exact Jacobians of (G, h) w.r.t. the state and the
class-K parameters; the gradient engines consume these, so barriers carry
analytic Hessians.  Relative-degree-2 rows additionally need the derivative
of the barrier Hessian (zero for every built-in barrier, whose Hessians are
constant) and of the drift Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .policy import ClassKParams, MlpPolicy
from .qp import QpProblem, QpSolution, qp_solve


class RelativeDegreeMismatchError(RuntimeError):
    """A constraint row vanished: the barrier has higher relative degree
    than declared at this state."""


ROW_TOL = 1e-12


@dataclass
class Barrier:
    """Scalar certificate B with safe set {x : B(x) >= 0}.

    hess is required (row Jacobians need it); hess_jac_dot(x, v) must
    return d(H(x) v)/dx for fixed v and may be None when the Hessian is
    constant.
    """

    value: callable
    grad: callable
    relative_degree: int = 1
    hess: callable = None
    hess_jac_dot: callable = None


@dataclass
class Lyapunov:
    """Potential V with decay rate gamma; hess is used by the gradient
    engines' loss source terms."""

    value: callable
    grad: callable
    gamma: float = 1.0
    hess: callable = None


@dataclass
class SafetyFilterSpec:
    """Barriers plus their class-K coefficients, bound to a system.

    theta2 slots are laid out barrier by barrier: one slot for a
    relative-degree-1 barrier, two (kappa1, kappa2) for degree 2.
    """

    system: object
    barriers: list
    class_k: ClassKParams = field(default_factory=ClassKParams)

    def __post_init__(self):
        if self.class_k.theta2.size != self.num_slots():
            raise ValueError(
                f"class_k has {self.class_k.theta2.size} coefficients, "
                f"barriers need {self.num_slots()}"
            )

    def num_slots(self):
        return sum(1 if b.relative_degree == 1 else 2 for b in self.barriers)

    def slot_offsets(self):
        offs, off = [], 0
        for b in self.barriers:
            offs.append(off)
            off += 1 if b.relative_degree == 1 else 2
        return offs


@dataclass
class RowData:
    """Constraint rows and their exact Jacobians.

    JG_x[i, j, l] = dG[i, j]/dx[l];  Jh_x[i, l] = dh[i]/dx[l];
    JG_th2 / Jh_th2 are the analogues w.r.t. theta2.
    """

    G: np.ndarray
    h: np.ndarray
    JG_x: np.ndarray
    Jh_x: np.ndarray
    JG_th2: np.ndarray
    Jh_th2: np.ndarray


def _g_column_jacobians(system, x):
    """d(g(x) e_j)/dx for each control column j."""
    nu = system.control_dim
    eye = np.eye(nu)
    return [system.jac_gu(x, eye[j]) for j in range(nu)]


def build_rows(spec: SafetyFilterSpec, x, t=0.0):
    """(G, h) stacking one row per barrier, dispatching on relative degree."""
    x = np.asarray(x, dtype=float)
    sys_, ck = spec.system, spec.class_k
    kaps = ck.kappas()
    fx = sys_.f(x, t)
    gx = sys_.g(x)
    rows_G, rows_h = [], []
    for bar, off in zip(spec.barriers, spec.slot_offsets()):
        gB = bar.grad(x)
        B = bar.value(x)
        if bar.relative_degree == 1:
            row = -(gB @ gx)
            if np.max(np.abs(row)) < ROW_TOL:
                raise RelativeDegreeMismatchError(
                    "grad(B)'g vanished for a relative-degree-1 barrier"
                )
            rows_G.append(row)
            rows_h.append(gB @ fx + kaps[off] * B)
        else:
            k1, k2 = kaps[off], kaps[off + 1]
            H = bar.hess(x)
            Jf = sys_.jac_f(x, t)
            psi1 = gB @ fx + k1 * B
            gpsi = H @ fx + Jf.T @ gB + k1 * gB
            row = -(gpsi @ gx)
            if np.max(np.abs(row)) < ROW_TOL:
                raise RelativeDegreeMismatchError(
                    "grad(psi1)'g vanished for a relative-degree-2 barrier"
                )
            rows_G.append(row)
            rows_h.append(gpsi @ fx + k2 * psi1)
    return np.array(rows_G), np.array(rows_h)


def build_cbf_rows(spec: SafetyFilterSpec, x, t=0.0):
    """Rows for a filter whose barriers all have relative degree 1."""
    if any(b.relative_degree != 1 for b in spec.barriers):
        raise ValueError("build_cbf_rows requires relative degree 1 throughout")
    return build_rows(spec, x, t)


def build_hocbf_rows(spec: SafetyFilterSpec, x, t=0.0):
    """Rows for a filter whose barriers all have relative degree 2."""
    if any(b.relative_degree != 2 for b in spec.barriers):
        raise ValueError("build_hocbf_rows requires relative degree 2 throughout")
    return build_rows(spec, x, t)


def build_rows_with_jac(spec: SafetyFilterSpec, x, t=0.0) -> RowData:
    """Rows plus exact Jacobians w.r.t. x and theta2."""
    x = np.asarray(x, dtype=float)
    sys_, ck = spec.system, spec.class_k
    kaps = ck.kappas()
    nx, nu = sys_.state_dim, sys_.control_dim
    nth = ck.theta2.size
    fx = sys_.f(x, t)
    gx = sys_.g(x)
    Jf = sys_.jac_f(x, t)
    g_cols = _g_column_jacobians(sys_, x)
    p = len(spec.barriers)
    G = np.zeros((p, nu))
    h = np.zeros(p)
    JG_x = np.zeros((p, nu, nx))
    Jh_x = np.zeros((p, nx))
    JG_th2 = np.zeros((p, nu, nth))
    Jh_th2 = np.zeros((p, nth))
    for i, (bar, off) in enumerate(zip(spec.barriers, spec.slot_offsets())):
        gB = bar.grad(x)
        B = bar.value(x)
        H = bar.hess(x)
        if bar.relative_degree == 1:
            kap = kaps[off]
            G[i] = -(gB @ gx)
            h[i] = gB @ fx + kap * B
            for j in range(nu):
                JG_x[i, j] = -(H @ gx[:, j] + g_cols[j].T @ gB)
            Jh_x[i] = H @ fx + Jf.T @ gB + kap * gB
            Jh_th2[i, off] = kap * B
        else:
            k1, k2 = kaps[off], kaps[off + 1]
            psi1 = gB @ fx + k1 * B
            gpsi = H @ fx + Jf.T @ gB + k1 * gB
            G[i] = -(gpsi @ gx)
            h[i] = gpsi @ fx + k2 * psi1
            # d(gpsi)/dx assembled term by term; hess_jac_dot covers the
            # third-order barrier term and jac_f_dot the drift curvature.
            Dgpsi = H @ Jf + Jf.T @ H + k1 * H
            if bar.hess_jac_dot is not None:
                Dgpsi = Dgpsi + bar.hess_jac_dot(x, fx)
            Dgpsi = Dgpsi + sys_.jac_f_dot(x, gB, t)
            for j in range(nu):
                JG_x[i, j] = -(Dgpsi.T @ gx[:, j] + g_cols[j].T @ gpsi)
            Jh_x[i] = Dgpsi.T @ fx + Jf.T @ gpsi + k2 * gpsi
            JG_th2[i, :, off] = k1 * (-(gB @ gx))
            Jh_th2[i, off] = k1 * (gB @ fx + k2 * B)
            Jh_th2[i, off + 1] = k2 * psi1
        if np.max(np.abs(G[i])) < ROW_TOL:
            raise RelativeDegreeMismatchError("constraint row vanished")
    return RowData(G, h, JG_x, Jh_x, JG_th2, Jh_th2)


_EYE = {n: np.eye(n) for n in (1, 2, 3)}


def filter_problem(u_nn, G, h) -> QpProblem:
    """The projection QP: Q = I, q = -u_nn, rows G u <= h."""
    n = len(u_nn)
    eye = _EYE.get(n)
    if eye is None:
        eye = _EYE[n] = np.eye(n)
    return QpProblem(eye, -np.asarray(u_nn, dtype=float), G=G, h=h)


def safety_filter(spec: SafetyFilterSpec, policy: MlpPolicy, x, t=0.0,
                  tol=1e-9):
    """Minimally modify the controller output to satisfy the barrier rows.

    Returns (u_safe, QpSolution).  When the raw control already satisfies
    every row the filter is inactive and returns it unchanged.
    """
    u_nn = policy.forward(x)
    G, h = build_rows(spec, x, t)
    sol = qp_solve(filter_problem(u_nn, G, h), tol=tol)
    return sol.u_star, sol


def clf_pointwise_loss(lyap: Lyapunov, x, xdot) -> float:
    """Hinge on the decrease condition: max(0, grad(V)'xdot + gamma V)."""
    x = np.asarray(x, dtype=float)
    viol = float(lyap.grad(x) @ np.asarray(xdot, dtype=float)) \
        + lyap.gamma * float(lyap.value(x))
    return max(0.0, viol)


def clf_trajectory_loss(lyap: Lyapunov, traj) -> float:
    """Left-endpoint quadrature of the pointwise loss over one rollout."""
    total = 0.0
    for k in range(len(traj.times) - 1):
        dt = traj.times[k + 1] - traj.times[k]
        total += dt * clf_pointwise_loss(lyap, traj.states[k], traj.xdots[k])
    return total
