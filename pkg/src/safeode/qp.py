"""Dense convex QP layer: forward solve and implicit differentiation.

Solves

    minimize_u  1/2 u'Qu + q'u
    subject to  A u = b,  G u <= h

and differentiates the optimum through the KKT conditions.  Problems here
are tiny (n <= 3, p <= 2), so the forward pass enumerates active sets and
solves one equality-constrained QP per candidate set, which is exact and
matches the closed-form half-space projection used as an oracle in tests.

The backward pass linearizes the KKT system

    F(X, Y) = [ Qu* + q + A'nu* + G'lam* ]
              [ Au* - b                  ]   = 0,   Y = (u, nu, lam),
              [ D(lam*)(Gu* - h)         ]          X = (Q, q, A, b, G, h)

and uses the implicit function theorem: dY/dX = -J_FY^{-1} J_FX.  For a
scalar loss l(u*), solving J_FY' d = -(dl/du, 0, 0) yields

    dl/dQ = (d_u u*' + u* d_u')/2      dl/dq = d_u
    dl/dA = nu* d_u' + d_nu u*'        dl/db = -d_nu
    dl/dG = D(lam*) d_lam u*' + lam* d_u'
    dl/dh = -D(lam*) d_lam

Matrix data is vectorized row-major throughout (numpy's default order).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .numerics import SingularMatrixError, solve_linear

DEFAULT_TOL = 1e-9
DEFAULT_MARGIN = 1e-7
MIN_EIG = 1e-10


class QpInfeasibleError(RuntimeError):
    """No point satisfies the constraints within tolerance."""


class MaxIterationsError(RuntimeError):
    """Iterative solve stalled (signals severe ill-conditioning)."""


class DegenerateActiveSetError(RuntimeError):
    """A constraint has both lam* ~ 0 and zero slack: the solution map is
    nondifferentiable there and the caller must pick a subgradient."""


class ZeroConstraintRowError(ValueError):
    """A constraint row has (numerically) zero norm."""


@dataclass(frozen=True)
class QpProblem:
    """Problem data (Q, q, A, b, G, h); A/b and G/h jointly optional."""

    Q: np.ndarray
    q: np.ndarray
    A: np.ndarray | None = None
    b: np.ndarray | None = None
    G: np.ndarray | None = None
    h: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "Q", np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        n = self.q.size
        if self.Q.shape != (n, n):
            raise ValueError(f"Q shape {self.Q.shape} incompatible with q size {n}")
        if (self.A is None) != (self.b is None):
            raise ValueError("A and b must be jointly present or jointly absent")
        if (self.G is None) != (self.h is None):
            raise ValueError("G and h must be jointly present or jointly absent")
        for name in ("A", "b", "G", "h"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.asarray(val, dtype=float))
        if self.A is not None and self.A.shape != (self.b.size, n):
            raise ValueError(f"A shape {self.A.shape} incompatible with b/{n}")
        if self.G is not None and self.G.shape != (self.h.size, n):
            raise ValueError(f"G shape {self.G.shape} incompatible with h/{n}")
        # The objective only sees the symmetric part of Q; storing it
        # symmetrized makes the symmetrized dQ formula the exact derivative.
        sym = 0.5 * (self.Q + self.Q.T)
        object.__setattr__(self, "Q", sym)
        diag = np.diag(sym)
        if np.any(sym != np.diag(diag)):  # non-diagonal: full eigen check
            if np.min(np.linalg.eigvalsh(sym)) < MIN_EIG:
                raise ValueError("Q must be symmetric positive definite")
        elif np.min(diag) < MIN_EIG:
            raise ValueError("Q must be symmetric positive definite")

    @property
    def n(self):
        return self.q.size

    @property
    def m(self):
        return 0 if self.b is None else self.b.size

    @property
    def p(self):
        return 0 if self.h is None else self.h.size


@dataclass(frozen=True)
class QpSolution:
    """Primal/dual optimum with the worst-case KKT residual."""

    u_star: np.ndarray
    nu_star: np.ndarray
    lambda_star: np.ndarray
    kkt_residual: float


@dataclass(frozen=True)
class QpGradients:
    """Loss gradients w.r.t. every datum of a QpProblem."""

    dQ: np.ndarray
    dq: np.ndarray
    dA: np.ndarray
    db: np.ndarray
    dG: np.ndarray
    dh: np.ndarray


def _kkt_residual(prob, u, nu, lam):
    stat = prob.Q @ u + prob.q
    if prob.m:
        stat = stat + prob.A.T @ nu
    if prob.p:
        stat = stat + prob.G.T @ lam
    res = np.max(np.abs(stat))
    if prob.m:
        res = max(res, np.max(np.abs(prob.A @ u - prob.b)))
    if prob.p:
        viol = prob.G @ u - prob.h
        res = max(res, max(0.0, np.max(viol)))
        res = max(res, np.max(np.abs(lam * viol)))
    return float(res)


def qp_solve(prob: QpProblem, tol: float = DEFAULT_TOL) -> QpSolution:
    """Solve the QP by active-set enumeration.

    Candidate active sets are visited smallest first; the first candidate
    whose equality-constrained solution is primal and dual feasible is the
    global optimum (KKT conditions are sufficient for a strictly convex QP).
    Raises QpInfeasibleError when no candidate is consistent.
    """
    n, m, p = prob.n, prob.m, prob.p
    feas_tol = tol * (1.0 + (np.max(np.abs(prob.h)) if p else 0.0))
    for size in range(p + 1):
        for active in itertools.combinations(range(p), size):
            act = list(active)
            k = m + size
            kkt = np.zeros((n + k, n + k))
            kkt[:n, :n] = prob.Q
            rhs = np.concatenate([-prob.q, np.zeros(k)])
            if m:
                kkt[:n, n:n + m] = prob.A.T
                kkt[n:n + m, :n] = prob.A
                rhs[n:n + m] = prob.b
            if size:
                Ga = prob.G[act]
                kkt[:n, n + m:] = Ga.T
                kkt[n + m:, :n] = Ga
                rhs[n + m:] = prob.h[act]
            try:
                sol = solve_linear(kkt, rhs)
            except SingularMatrixError:
                continue
            u = sol[:n]
            nu = sol[n:n + m]
            lam_act = sol[n + m:]
            if size and np.min(lam_act) < -tol:
                continue
            if p:
                slack = prob.h - prob.G @ u
                inactive = np.setdiff1d(np.arange(p), act, assume_unique=True)
                if inactive.size and np.min(slack[inactive]) < -feas_tol:
                    continue
            lam = np.zeros(p)
            if size:
                lam[act] = np.maximum(lam_act, 0.0)
            return QpSolution(u, nu, lam, _kkt_residual(prob, u, nu, lam))
    raise QpInfeasibleError(
        f"no KKT-consistent active set among 2^{p} candidates (m={m})"
    )


def qp_project_halfspace(u_ref, g, h):
    """Closed-form oracle for min 1/2||u - u_ref||^2 s.t. g'u <= h.

    Returns (u*, lam*).  Equivalent to qp_solve on Q=I, q=-u_ref with the
    single row G=g', used as an independent check of the solver.
    """
    u_ref = np.asarray(u_ref, dtype=float)
    g = np.asarray(g, dtype=float)
    gg = float(g @ g)
    if gg < 1e-24:
        raise ZeroConstraintRowError("constraint row has norm below 1e-12")
    excess = float(g @ u_ref) - float(h)
    if excess <= 0.0:
        return u_ref.copy(), 0.0
    return u_ref - g * (excess / gg), excess / gg


def _kkt_jacobian(prob, sol, margin, degenerate):
    """J_FY with the degenerate-constraint policy applied.

    A constraint with both lam* and slack below `margin` makes J_FY
    singular.  With degenerate="inactive" such rows are rewritten as
    strictly inactive (lam=0, unit slack), the limit from the feasible
    side; with "raise" a DegenerateActiveSetError is raised.
    """
    n, m, p = prob.n, prob.m, prob.p
    lam = sol.lambda_star.copy()
    gu_h = np.zeros(p)
    if p:
        gu_h = prob.G @ sol.u_star - prob.h
        bad = np.maximum(lam, -gu_h) < margin
        if np.any(bad):
            if degenerate == "raise":
                raise DegenerateActiveSetError(
                    f"constraints {np.flatnonzero(bad).tolist()} have "
                    f"lam and slack both below {margin:g}"
                )
            lam[bad] = 0.0
            gu_h[bad] = -1.0
    size = n + m + p
    J = np.zeros((size, size))
    J[:n, :n] = prob.Q
    if m:
        J[:n, n:n + m] = prob.A.T
        J[n:n + m, :n] = prob.A
    if p:
        J[:n, n + m:] = prob.G.T
        J[n + m:, :n] = lam[:, None] * prob.G
        J[n + m:, n + m:] = np.diag(gu_h)
    return J, lam


def qp_backward(
    prob: QpProblem,
    sol: QpSolution,
    dl_du,
    margin: float = DEFAULT_MARGIN,
    degenerate: str = "raise",
) -> QpGradients:
    """Pull a loss cotangent dl/du* back to the problem data.

    Solves J_FY' (d_u, d_nu, d_lam) = -(dl/du, 0, 0) and applies the
    closed-form gradient expressions from the linearized KKT system.
    Requires strict complementarity up to `margin`; see _kkt_jacobian for
    the degenerate-constraint policy.
    """
    n, m, p = prob.n, prob.m, prob.p
    dl_du = np.asarray(dl_du, dtype=float)
    J, lam = _kkt_jacobian(prob, sol, margin, degenerate)
    rhs = np.concatenate([-dl_du, np.zeros(m + p)])
    d = solve_linear(J.T, rhs)
    d_u, d_nu, d_lam = d[:n], d[n:n + m], d[n + m:]
    u = sol.u_star
    return QpGradients(
        dQ=0.5 * (np.outer(d_u, u) + np.outer(u, d_u)),
        dq=d_u,
        dA=np.outer(sol.nu_star, d_u) + np.outer(d_nu, u),
        db=-d_nu,
        dG=np.outer(lam * d_lam, u) + np.outer(lam, d_u),
        dh=-(lam * d_lam),
    )


def x_block_slices(n: int, m: int, p: int):
    """Column slices of the vectorized data X = (Q, q, A, b, G, h)."""
    sizes = {"Q": n * n, "q": n, "A": m * n, "b": m, "G": p * n, "h": p}
    slices, off = {}, 0
    for name, sz in sizes.items():
        slices[name] = slice(off, off + sz)
        off += sz
    return slices


def qp_jacobian_full(
    prob: QpProblem,
    sol: QpSolution,
    margin: float = DEFAULT_MARGIN,
    degenerate: str = "raise",
) -> np.ndarray:
    """Full Jacobian of Y = (u*, nu*, lam*) w.r.t. vectorized problem data.

    Returns -J_FY^{-1} J_FX, shape (n+m+p, n^2+n+mn+m+pn+p), with matrix
    blocks vectorized row-major; use x_block_slices to address columns.
    """
    n, m, p = prob.n, prob.m, prob.p
    J_FY, lam = _kkt_jacobian(prob, sol, margin, degenerate)
    cols = x_block_slices(n, m, p)
    u = sol.u_star
    J_FX = np.zeros((n + m + p, cols["h"].stop))
    J_FX[:n, cols["Q"]] = np.kron(np.eye(n), u[None, :])
    J_FX[:n, cols["q"]] = np.eye(n)
    if m:
        J_FX[:n, cols["A"]] = np.kron(sol.nu_star[None, :], np.eye(n))
        J_FX[n:n + m, cols["A"]] = np.kron(np.eye(m), u[None, :])
        J_FX[n:n + m, cols["b"]] = -np.eye(m)
    if p:
        J_FX[:n, cols["G"]] = np.kron(lam[None, :], np.eye(n))
        J_FX[n + m:, cols["G"]] = lam[:, None] * np.kron(np.eye(p), u[None, :])
        J_FX[n + m:, cols["h"]] = -np.diag(lam)
    return -solve_linear(J_FY, J_FX)
