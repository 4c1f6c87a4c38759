"""Training loop: roll out the filtered closed loop, score the stability
loss, and update the controller and class-K parameters simultaneously.

The default gradient route is the discrete one (exactly consistent with the
Euler forward pass); the adjoint route is selectable and cross-validated in
tests.  Everything is deterministic given (seed, config): batches are drawn
from per-epoch child generators and reductions run in fixed order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import LossWeights, SolveConfig, rollout
from .envs import collision_check, mean_error, violation_count
from .policy import ClassKParams, MlpPolicy, load_checkpoint, save_checkpoint
from .qp import QpInfeasibleError


class DivergedLossError(RuntimeError):
    """Training loss left the finite range; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    optimizer: str = "adam"      # "adam" | "sgd"
    lr1: float = 0.03
    lr2: float = 0.05
    seed: int = 0
    clf_weight: float = 1.0
    terminal_weight: float = 0.0
    train_theta2: bool = True
    grad_method: str = "discrete"  # "discrete" | "adjoint"
    degenerate: str = "inactive"   # QP subgradient policy during training

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr1 < 0 or self.lr2 < 0:
            raise ValueError("learning rates must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.grad_method not in ("discrete", "adjoint"):
            raise ValueError(f"unknown grad method {self.grad_method!r}")


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    mean_errors: list = field(default_factory=list)
    collisions: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    kappas: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    diverged_at: int | None = None
    infeasible_at: int | None = None

    def as_dict(self):
        return {
            "losses": [float(v) for v in self.losses],
            "mean_errors": [float(v) for v in self.mean_errors],
            "collisions": [bool(v) for v in self.collisions],
            "violations": [int(v) for v in self.violations],
            "kappas": [[float(k) for k in row] for row in self.kappas],
            "rewards": [float(v) for v in self.rewards],
            "diverged_at": self.diverged_at,
            "infeasible_at": self.infeasible_at,
        }


class _Adam:
    def __init__(self, size, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad ** 2
        mhat = self.m / (1.0 - self.b1 ** self.t)
        vhat = self.v / (1.0 - self.b2 ** self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self):
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t}

    def load(self, state):
        self.m = np.asarray(state["m"], dtype=float)
        self.v = np.asarray(state["v"], dtype=float)
        self.t = int(state["t"])


class _Sgd:
    def __init__(self, size, lr):
        self.lr = lr

    def step(self, grad):
        return self.lr * grad

    def state(self):
        return {}

    def load(self, state):
        pass


def _make_optimizer(kind, size, lr):
    return _Adam(size, lr) if kind == "adam" else _Sgd(size, lr)


def _epoch_rng(seed, epoch):
    return np.random.default_rng([seed, epoch])


def train(env, policy: MlpPolicy, filter_spec, lyap, cfg: TrainConfig,
          solve_cfg: SolveConfig, start_epoch: int = 0,
          opt_state: dict | None = None) -> TrainReport:
    """Run the training loop and return the per-epoch report.

    filter_spec may be None (controller trained without the safety layer).
    start_epoch/opt_state allow exact resumption from a checkpoint.
    """
    grad_fn = (engine.grad_discrete if cfg.grad_method == "discrete"
               else engine.grad_adjoint)
    weights = LossWeights(clf=cfg.clf_weight, terminal=cfg.terminal_weight)
    n_th2 = filter_spec.class_k.theta2.size if filter_spec is not None else 0
    opt1 = _make_optimizer(cfg.optimizer, policy.theta1.size, cfg.lr1)
    opt2 = _make_optimizer(cfg.optimizer, max(n_th2, 1), cfg.lr2)
    if opt_state:
        opt1.load(opt_state["opt1"])
        opt2.load(opt_state["opt2"])
    report = TrainReport()
    has_reward = hasattr(env, "reward")
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        rng = _epoch_rng(cfg.seed, epoch)
        x0_batch = env.sample_x0(rng, cfg.batch_size)
        try:
            loss, g1, g2, trajs = grad_fn(
                env.system, policy, filter_spec, lyap, x0_batch,
                solve_cfg, weights=weights, degenerate=cfg.degenerate,
                with_trajectories=True)
        except QpInfeasibleError as err:
            report.infeasible_at = epoch
            raise QpInfeasibleError(f"epoch {epoch}: {err}") from err
        if not np.isfinite(loss):
            report.diverged_at = epoch
            raise DivergedLossError(f"loss diverged at epoch {epoch}", report)
        report.losses.append(float(loss))
        report.mean_errors.append(mean_error(trajs, env))
        report.collisions.append(collision_check(trajs))
        report.violations.append(violation_count(trajs))
        report.kappas.append(
            list(filter_spec.class_k.kappas()) if filter_spec is not None
            else [])
        if has_reward:
            report.rewards.append(
                float(np.mean([env.reward(tr) for tr in trajs])))
        policy.theta1 = policy.theta1 - opt1.step(g1)
        if filter_spec is not None and cfg.train_theta2 and n_th2:
            filter_spec.class_k.theta2 = (
                filter_spec.class_k.theta2 - opt2.step(g2))
    report._opt_state = {"opt1": opt1.state(), "opt2": opt2.state()}
    return report


def save_train_state(path, policy, class_k, cfg: TrainConfig, epoch,
                     report: TrainReport):
    extra = {
        "epoch": int(epoch),
        "optimizer": getattr(report, "_opt_state",
                             {"opt1": {}, "opt2": {}}),
    }
    save_checkpoint(path, policy, class_k, seed=cfg.seed, extra=extra)


def load_train_state(path):
    policy, class_k, payload = load_checkpoint(path)
    extra = payload.get("extra", {})
    return policy, class_k, extra.get("epoch", 0), extra.get("optimizer")


def eval_policy(env, policy, filter_spec, lyap, solve_cfg, x0_batch):
    """Roll out an evaluation batch; barrier values are always recorded so
    collisions are scored even without a filter."""
    barriers = (filter_spec.barriers if filter_spec is not None
                else _env_barriers(env))
    trajs = [rollout(env.system, policy, filter_spec, x0, solve_cfg,
                     lyap=lyap, barriers=barriers) for x0 in x0_batch]
    return mean_error(trajs, env), collision_check(trajs), trajs


def _env_barriers(env):
    if hasattr(env, "barriers"):
        return env.barriers()
    return [env.barrier()]


ABLATION_MODES = ("no_qp", "inference_qp", "fixed_kappa_5", "fixed_kappa_10",
                  "learned_kappa")


def _mode_setup(env, mode, policy_seed, kappa_init, inference_kappa=5.0):
    """Fresh (policy, train filter, eval filter, train_theta2) for a mode."""
    policy = MlpPolicy.init_random(
        (env.system.state_dim, 64, env.system.control_dim), seed=policy_seed)
    if mode == "no_qp":
        return policy, None, None, False
    if mode == "inference_qp":
        ck = ClassKParams.from_kappa([inference_kappa] * env.num_kappa())
        return policy, None, env.filter_spec(ck), False
    if mode.startswith("fixed_kappa_"):
        kap = float(mode.rsplit("_", 1)[1])
        ck = ClassKParams.from_kappa([kap] * env.num_kappa())
        spec = env.filter_spec(ck)
        return policy, spec, spec, False
    if mode == "learned_kappa":
        ck = ClassKParams.from_kappa([kappa_init] * env.num_kappa())
        spec = env.filter_spec(ck)
        return policy, spec, spec, True
    raise ValueError(f"unknown ablation mode {mode!r}")


def ablate(env, lyap, cfg: TrainConfig, solve_cfg: SolveConfig,
           modes=ABLATION_MODES, eval_rollouts=50, kappa_init=1.0):
    """Train each mode from the same seed and score it on a shared
    evaluation batch; returns one row per mode."""
    eval_rng = np.random.default_rng([cfg.seed, 0xE7A1])
    eval_x0 = env.sample_x0(eval_rng, eval_rollouts)
    rows = []
    for mode in modes:
        policy, train_spec, eval_spec, train_th2 = _mode_setup(
            env, mode, cfg.seed, kappa_init)
        mode_cfg = TrainConfig(**{**cfg.__dict__, "train_theta2": train_th2})
        report = train(env, policy, train_spec, lyap, mode_cfg, solve_cfg)
        err, collided, _ = eval_policy(env, policy, eval_spec, lyap,
                                       solve_cfg, eval_x0)
        rows.append({
            "mode": mode,
            "mean_error": err,
            "collision": collided,
            "final_loss": report.losses[-1],
            "kappa": (list(eval_spec.class_k.kappas())
                      if eval_spec is not None else []),
        })
    return rows


def report_json(report: TrainReport, **extra):
    payload = report.as_dict()
    payload.update(extra)
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"
