"""Control-affine dynamics (xdot = f(x) + g(x) u) and the two benchmark
environments: a unicycle steering to a target past a circular obstacle, and
a chain of five cars where only the fourth car's acceleration is controlled.

Systems expose analytic Jacobians of the drift and of g(x)u; the gradient
engines rely on these being exact (each is finite-difference checked in the
test suite).  jac_f_dot (the state derivative of J_f' w) is only consumed by
relative-degree-2 constraint rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .certificates import Barrier, Lyapunov, SafetyFilterSpec
from .policy import ClassKParams


class ControlAffineSystem:
    """Interface for xdot = f(x, t) + g(x) u with analytic derivatives."""

    state_dim = 0
    control_dim = 0

    def f(self, x, t=0.0):
        raise NotImplementedError

    def g(self, x):
        raise NotImplementedError

    def jac_f(self, x, t=0.0):
        raise NotImplementedError

    def jac_gu(self, x, u):
        """d(g(x) u)/dx for fixed u."""
        raise NotImplementedError

    def jac_f_dot(self, x, w, t=0.0):
        """d(J_f(x)' w)/dx for fixed w; required only at relative degree 2."""
        raise NotImplementedError

    def dynamics(self, x, u, t=0.0):
        return self.f(x, t) + self.g(x) @ np.asarray(u, dtype=float)


@dataclass
class Trajectory:
    """One closed-loop rollout on a fixed grid.

    All arrays share the leading length len(times); barrier_values has one
    column per barrier (zero columns when no filter is attached).
    """

    times: np.ndarray
    states: np.ndarray
    u_nn: np.ndarray
    u_safe: np.ndarray
    xdots: np.ndarray
    barrier_values: np.ndarray
    pointwise_loss: np.ndarray


# ---------------------------------------------------------------------------
# unicycle


def unicycle_dynamics(x, u):
    """xdot for the 3-state unicycle: (u1 cos th, u1 sin th, u2)."""
    th = x[2]
    return np.array([u[0] * np.cos(th), u[0] * np.sin(th), u[1]])


def unicycle_lookahead(x, l_p):
    """Point a distance l_p ahead of the unicycle heading."""
    th = x[2]
    return np.array([x[0] + l_p * np.cos(th), x[1] + l_p * np.sin(th)])


class Unicycle(ControlAffineSystem):
    """Driftless unicycle; controls are forward speed and turn rate."""

    state_dim = 3
    control_dim = 2

    def f(self, x, t=0.0):
        return np.zeros(3)

    def g(self, x):
        th = x[2]
        return np.array([[np.cos(th), 0.0], [np.sin(th), 0.0], [0.0, 1.0]])

    def jac_f(self, x, t=0.0):
        return np.zeros((3, 3))

    def jac_gu(self, x, u):
        th = x[2]
        J = np.zeros((3, 3))
        J[0, 2] = -u[0] * np.sin(th)
        J[1, 2] = u[0] * np.cos(th)
        return J

    def jac_f_dot(self, x, w, t=0.0):
        return np.zeros((3, 3))


class Unicycle4(ControlAffineSystem):
    """4-state unicycle with speed as a state; controls are turn rate and
    longitudinal acceleration, so position barriers have relative degree 2."""

    state_dim = 4
    control_dim = 2

    def f(self, x, t=0.0):
        th, v = x[2], x[3]
        return np.array([v * np.cos(th), v * np.sin(th), 0.0, 0.0])

    def g(self, x):
        return np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

    def jac_f(self, x, t=0.0):
        th, v = x[2], x[3]
        J = np.zeros((4, 4))
        J[0, 2] = -v * np.sin(th)
        J[0, 3] = np.cos(th)
        J[1, 2] = v * np.cos(th)
        J[1, 3] = np.sin(th)
        return J

    def jac_gu(self, x, u):
        return np.zeros((4, 4))

    def jac_f_dot(self, x, w, t=0.0):
        th, v = x[2], x[3]
        s, c = np.sin(th), np.cos(th)
        M = np.zeros((4, 4))
        M[2, 2] = -v * c * w[0] - v * s * w[1]
        M[2, 3] = -s * w[0] + c * w[1]
        M[3, 2] = -s * w[0] + c * w[1]
        return M


def _lookahead_quadratic(center, radius, l_p, clamp=False):
    """1/2 (||p(x) - center||^2 - radius^2) on the 3-state unicycle, with
    p(x) the lookahead point; returns (value, grad, hess, hess_jac_dot)."""
    center = np.asarray(center, dtype=float)

    def _parts(x):
        th = x[2]
        s, c = np.sin(th), np.cos(th)
        d = unicycle_lookahead(x, l_p) - center
        Jp = np.array([[1.0, 0.0, -l_p * s], [0.0, 1.0, l_p * c]])
        return d, Jp, s, c

    def value(x):
        d = unicycle_lookahead(x, l_p) - center
        raw = 0.5 * (d @ d - radius ** 2)
        return max(0.0, raw) if clamp else raw

    def grad(x):
        d, Jp, _, _ = _parts(x)
        if clamp and 0.5 * (d @ d - radius ** 2) <= 0.0:
            return np.zeros(3)
        return Jp.T @ d

    def hess(x):
        d, Jp, s, c = _parts(x)
        if clamp and 0.5 * (d @ d - radius ** 2) <= 0.0:
            return np.zeros((3, 3))
        H = Jp.T @ Jp
        H[2, 2] += -l_p * (c * d[0] + s * d[1])
        return H

    def hess_jac_dot(x, v):
        d, _, s, c = _parts(x)
        if clamp and 0.5 * (d @ d - radius ** 2) <= 0.0:
            return np.zeros((3, 3))
        M = np.zeros((3, 3))
        M[2, 0] = -l_p * c * v[2]
        M[2, 1] = -l_p * s * v[2]
        M[0, 2] = -l_p * c * v[2]
        M[1, 2] = -l_p * s * v[2]
        M[2, 2] = (-l_p * c * v[0] - l_p * s * v[1]
                   + l_p * (s * d[0] - c * d[1]) * v[2])
        return M

    return value, grad, hess, hess_jac_dot


def _position_quadratic(center, radius, state_dim, clamp=False):
    """1/2 (||(x1, x2) - center||^2 - radius^2); constant Hessian."""
    center = np.asarray(center, dtype=float)
    H0 = np.zeros((state_dim, state_dim))
    H0[0, 0] = H0[1, 1] = 1.0

    def value(x):
        d = x[:2] - center
        raw = 0.5 * (d @ d - radius ** 2)
        return max(0.0, raw) if clamp else raw

    def grad(x):
        d = x[:2] - center
        g = np.zeros(state_dim)
        if clamp and 0.5 * (d @ d - radius ** 2) <= 0.0:
            return g
        g[:2] = d
        return g

    def hess(x):
        d = x[:2] - center
        if clamp and 0.5 * (d @ d - radius ** 2) <= 0.0:
            return np.zeros((state_dim, state_dim))
        return H0.copy()

    return value, grad, hess


@dataclass
class UnicycleEnv:
    """Unicycle reaching a target region while avoiding a circular obstacle.

    Geometry defaults place the obstacle on the straight line from the
    initial box to the target, so an unfiltered controller that heads
    straight for the target collides.
    """

    l_p: float = 0.1
    p_obs: tuple = (-0.5, -0.5)
    delta1: float = 0.5
    p_tar: tuple = (0.0, 0.0)
    delta2: float = 0.1
    gamma: float = 5.0
    x0_low: tuple = (-2.25, -2.25, np.pi / 4 - 0.5)
    x0_high: tuple = (-1.75, -1.75, np.pi / 4 + 0.5)
    system: Unicycle = field(default_factory=Unicycle)

    def barrier(self) -> Barrier:
        value, grad, hess, third = _lookahead_quadratic(
            self.p_obs, self.delta1, self.l_p)
        return Barrier(value, grad, relative_degree=1, hess=hess,
                       hess_jac_dot=third)

    def lyapunov(self) -> Lyapunov:
        value, grad, hess, _ = _lookahead_quadratic(
            self.p_tar, self.delta2, self.l_p, clamp=True)
        return Lyapunov(value, grad, gamma=self.gamma, hess=hess)

    def filter_spec(self, class_k: ClassKParams) -> SafetyFilterSpec:
        return SafetyFilterSpec(self.system, [self.barrier()], class_k)

    def num_kappa(self):
        return 1

    def sample_x0(self, rng, n):
        low = np.asarray(self.x0_low)
        high = np.asarray(self.x0_high)
        return rng.uniform(low, high, size=(n, low.size))

    def terminal_error(self, traj: Trajectory) -> float:
        p = unicycle_lookahead(traj.states[-1], self.l_p)
        return float(np.linalg.norm(p - np.asarray(self.p_tar)))

    def target_distance(self, x) -> float:
        p = unicycle_lookahead(x, self.l_p)
        return float(np.linalg.norm(p - np.asarray(self.p_tar)))


@dataclass
class Unicycle4Env:
    """Speed-augmented unicycle variant; the position barrier has relative
    degree 2, so the filter uses the two-level barrier chain."""

    p_obs: tuple = (-1.0, -1.0)
    delta1: float = 0.5
    p_tar: tuple = (0.0, 0.0)
    delta2: float = 0.1
    gamma: float = 5.0
    x0_low: tuple = (-2.25, -2.25, np.pi / 4 - 0.5, 0.5)
    x0_high: tuple = (-1.75, -1.75, np.pi / 4 + 0.5, 1.5)
    system: Unicycle4 = field(default_factory=Unicycle4)

    def barrier(self) -> Barrier:
        value, grad, hess = _position_quadratic(self.p_obs, self.delta1, 4)
        return Barrier(value, grad, relative_degree=2, hess=hess)

    def lyapunov(self) -> Lyapunov:
        value, grad, hess = _position_quadratic(
            self.p_tar, self.delta2, 4, clamp=True)
        return Lyapunov(value, grad, gamma=self.gamma, hess=hess)

    def filter_spec(self, class_k: ClassKParams) -> SafetyFilterSpec:
        return SafetyFilterSpec(self.system, [self.barrier()], class_k)

    def num_kappa(self):
        return 2

    def sample_x0(self, rng, n):
        low = np.asarray(self.x0_low)
        high = np.asarray(self.x0_high)
        return rng.uniform(low, high, size=(n, low.size))

    def terminal_error(self, traj: Trajectory) -> float:
        return float(np.linalg.norm(
            traj.states[-1][:2] - np.asarray(self.p_tar)))

    def target_distance(self, x) -> float:
        return float(np.linalg.norm(x[:2] - np.asarray(self.p_tar)))


# ---------------------------------------------------------------------------
# five-car chain

V_S = 3.0
K_V = 4.0
K_B = 20.0
D_I = 0.1
GAP_NEAR = 6.5
GAP_FAR = 13.0
BAND = (5.5, 6.5)
D_DESIRED = 6.0

# state layout (p1, v1, p2, v2, p3, v3, p4, v4, p5, v5)
_P = [0, 2, 4, 6, 8]
_V = [1, 3, 5, 7, 9]


def _car_accels(x, t):
    """Accelerations of the four uncontrolled cars (1, 2, 3, 5)."""
    a1 = K_V * (V_S - 4.0 * np.sin(t) - x[_V[0]])
    a = {0: a1}
    for i in (1, 2):  # cars 2 and 3 react to the car directly ahead
        gap = x[_P[i - 1]] - x[_P[i]]
        a[i] = K_V * (V_S - x[_V[i]])
        if abs(gap) < GAP_NEAR:
            a[i] -= K_B * gap
    gap5 = x[_P[2]] - x[_P[4]]
    a[4] = K_V * (V_S - x[_V[4]])
    if abs(gap5) < GAP_FAR:
        a[4] -= K_B * gap5
    return a


def car_chain_dynamics(x, u, t=0.0):
    """Full 10-state derivative; u is the fourth car's acceleration."""
    x = np.asarray(x, dtype=float)
    a = _car_accels(x, t)
    out = np.zeros(10)
    for i in range(5):
        out[_P[i]] = x[_V[i]]
    for i, ai in a.items():
        out[_V[i]] = (1.0 + D_I) * ai
    out[_V[3]] = float(np.atleast_1d(u)[0])
    return out


class CarChain(ControlAffineSystem):
    """Five-car chain; only car 4's acceleration is actuated.  Switching
    conditions are evaluated on the state passed in (no event detection)."""

    state_dim = 10
    control_dim = 1

    def f(self, x, t=0.0):
        out = car_chain_dynamics(x, np.zeros(1), t)
        return out

    def g(self, x):
        col = np.zeros((10, 1))
        col[_V[3], 0] = 1.0
        return col

    def jac_f(self, x, t=0.0):
        J = np.zeros((10, 10))
        for i in range(5):
            J[_P[i], _V[i]] = 1.0
        scale = 1.0 + D_I
        J[_V[0], _V[0]] = -scale * K_V
        for i in (1, 2):
            J[_V[i], _V[i]] = -scale * K_V
            gap = x[_P[i - 1]] - x[_P[i]]
            if abs(gap) < GAP_NEAR:
                J[_V[i], _P[i - 1]] = -scale * K_B
                J[_V[i], _P[i]] = scale * K_B
        J[_V[4], _V[4]] = -scale * K_V
        if abs(x[_P[2]] - x[_P[4]]) < GAP_FAR:
            J[_V[4], _P[2]] = -scale * K_B
            J[_V[4], _P[4]] = scale * K_B
        return J

    def jac_gu(self, x, u):
        return np.zeros((10, 10))

    def jac_f_dot(self, x, w, t=0.0):
        return np.zeros((10, 10))


def _linear_barrier(w, c, state_dim=10):
    w = np.asarray(w, dtype=float)

    def value(x):
        return float(w @ x) + c

    def grad(x):
        return w.copy()

    def hess(x):
        return np.zeros((state_dim, state_dim))

    return value, grad, hess


@dataclass
class CarChainEnv:
    """Keep car 4 at the desired distance behind car 3 without closing in
    on car 3 or being caught by car 5.  Both barriers are linear in the
    state and have relative degree 2 in the acceleration input."""

    delta: float = 2.0   # minimum allowed inter-car distance
    gamma: float = 1.0
    p4_jitter: float = 0.5
    v4_jitter: float = 0.1
    base_positions: tuple = (36.0, 24.0, 16.0, 9.0, 0.0)
    base_velocity: float = V_S
    system: CarChain = field(default_factory=CarChain)

    def barriers(self):
        w1 = np.zeros(10)
        w1[_P[2]], w1[_P[3]] = 1.0, -1.0
        w2 = np.zeros(10)
        w2[_P[3]], w2[_P[4]] = 1.0, -1.0
        bars = []
        for w in (w1, w2):
            value, grad, hess = _linear_barrier(w, -self.delta)
            bars.append(Barrier(value, grad, relative_degree=2, hess=hess))
        return bars

    def lyapunov(self) -> Lyapunov:
        w = np.zeros(10)
        w[_P[2]], w[_P[3]] = 1.0, -1.0

        def value(x):
            return abs(float(w @ x) - D_DESIRED)

        def grad(x):
            e = float(w @ x) - D_DESIRED
            return np.sign(e) * w

        def hess(x):
            return np.zeros((10, 10))

        return Lyapunov(value, grad, gamma=self.gamma, hess=hess)

    def filter_spec(self, class_k: ClassKParams) -> SafetyFilterSpec:
        return SafetyFilterSpec(self.system, self.barriers(), class_k)

    def num_kappa(self):
        return 4  # (kappa1, kappa2) per barrier

    def sample_x0(self, rng, n):
        out = np.zeros((n, 10))
        for i in range(5):
            out[:, _P[i]] = self.base_positions[i]
            out[:, _V[i]] = self.base_velocity
        out[:, _P[3]] += rng.uniform(-self.p4_jitter, self.p4_jitter, size=n)
        out[:, _V[3]] += rng.uniform(-self.v4_jitter, self.v4_jitter, size=n)
        return out

    def distance(self, x) -> float:
        return float(x[_P[2]] - x[_P[3]])

    def terminal_error(self, traj: Trajectory) -> float:
        return abs(self.distance(traj.states[-1]) - D_DESIRED)

    def target_distance(self, x) -> float:
        return abs(self.distance(x) - D_DESIRED)


# ---------------------------------------------------------------------------
# metrics


def mean_error(trajs, env) -> float:
    """Batch mean of the terminal distance-to-target."""
    return float(np.mean([env.terminal_error(tr) for tr in trajs]))


def collision_check(trajs) -> bool:
    """True iff any barrier goes negative anywhere in the batch."""
    for tr in trajs:
        if tr.barrier_values.size and np.min(tr.barrier_values) < 0.0:
            return True
    return False


def violation_count(trajs) -> int:
    """Number of grid points (summed over the batch) where the smallest
    barrier value is negative."""
    total = 0
    for tr in trajs:
        if tr.barrier_values.size:
            total += int(np.sum(np.min(tr.barrier_values, axis=1) < 0.0))
    return total


def reward_cars(traj: Trajectory) -> float:
    """Fraction of grid points where the car-3/car-4 distance lies in the
    desired band."""
    d = traj.states[:, _P[2]] - traj.states[:, _P[3]]
    return float(np.mean((d >= BAND[0]) & (d <= BAND[1])))
