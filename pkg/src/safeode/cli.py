"""Command-line entry point: train | rollout | ablate.

Exit codes: 0 success, 2 configuration error, 3 training failure.  Every
output file embeds the config hash and seed for provenance; JSON is written
with sorted keys and CSV floats with shortest round-trip repr, so reruns
with the same seed/config are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import trainer as trainer_mod
from .config import (
    ConfigError,
    broadcast_kappa,
    build_env,
    build_filter_specs,
    build_policy,
    config_hash,
    load_config,
)
from .engine import NonFiniteStateError, SolveConfig, rollout
from .envs import reward_cars, unicycle_lookahead
from .policy import ClassKParams, load_checkpoint
from .qp import QpInfeasibleError
from .trainer import DivergedLossError, TrainConfig, eval_policy, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path, header, rows, ch, seed):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header) + ["config_hash", "seed"])
        for row in rows:
            writer.writerow([_fmt(v) for v in row] + [ch, str(seed)])


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _solve_config(cfg):
    s = cfg["solve"]
    return SolveConfig(s["t0"], s["tf"], s["dt"], s["method"])


def _train_config(cfg, train_theta2, seed):
    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"],
        optimizer=t["optimizer"], lr1=t["lr1"], lr2=t["lr2"], seed=seed,
        clf_weight=t["clf_weight"], terminal_weight=t["terminal_weight"],
        train_theta2=train_theta2, grad_method=t["grad_method"])


def _metrics_rows(report):
    n_kappa = max((len(k) for k in report.kappas), default=0)
    header = ["epoch", "loss", "mean_error", "collision", "violations"]
    header += [f"kappa_{i}" for i in range(n_kappa)]
    if report.rewards:
        header.append("reward")
    rows = []
    for i in range(len(report.losses)):
        row = [i, report.losses[i], report.mean_errors[i],
               report.collisions[i], report.violations[i]]
        row += list(report.kappas[i]) + [0.0] * (n_kappa - len(report.kappas[i]))
        if report.rewards:
            row.append(report.rewards[i])
        rows.append(row)
    return header, rows


def cmd_train(config_path, out_dir=None, seed=None):
    try:
        cfg = load_config(config_path)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if seed is not None:
        cfg["seed"] = seed
    out = Path(out_dir or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ch = config_hash(cfg)
    env = build_env(cfg)
    policy = build_policy(cfg, env)
    lyap = env.lyapunov()
    train_spec, eval_spec, train_th2 = build_filter_specs(cfg, env)
    tcfg = _train_config(cfg, train_th2, cfg["seed"])
    scfg = _solve_config(cfg)

    def finish(report, status, exit_code):
        final = {}
        if status == "ok":
            rng = np.random.default_rng([cfg["seed"], 0xE7A1])
            x0s = env.sample_x0(rng, cfg["ablate"]["eval_rollouts"])
            err, collided, _ = eval_policy(env, policy, eval_spec, lyap,
                                           scfg, x0s)
            final = {"mean_error": err, "collision": collided}
        payload = report.as_dict()
        payload.update({"config_hash": ch, "seed": cfg["seed"],
                        "mode": cfg["train"]["mode"], "status": status,
                        "final": final})
        _write_json(out / "report.json", payload)
        header, rows = _metrics_rows(report)
        _write_csv(out / "metrics.csv", header, rows, ch, cfg["seed"])
        return exit_code

    try:
        report = train(env, policy, train_spec, lyap, tcfg, scfg)
    except DivergedLossError as err:
        print(f"training failed: {err}", file=sys.stderr)
        return finish(err.report or trainer_mod.TrainReport(), "diverged",
                      EXIT_TRAINING)
    except (QpInfeasibleError, NonFiniteStateError) as err:
        print(f"training failed: {err}", file=sys.stderr)
        return finish(trainer_mod.TrainReport(), "infeasible", EXIT_TRAINING)
    ck = (train_spec or eval_spec)
    class_k = ck.class_k if ck is not None else ClassKParams(np.zeros(0))
    trainer_mod.save_train_state(out / "checkpoint.json", policy, class_k,
                                 tcfg, tcfg.epochs, report)
    return finish(report, "ok", EXIT_OK)


def cmd_rollout(checkpoint_path, config_path, out_dir=None, x0=None,
                seed=None):
    try:
        cfg = load_config(config_path)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if seed is not None:
        cfg["seed"] = seed
    out = Path(out_dir or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ch = config_hash(cfg)
    env = build_env(cfg)
    lyap = env.lyapunov()
    try:
        policy, class_k, _ = load_checkpoint(checkpoint_path)
    except (OSError, ValueError, KeyError) as err:
        print(f"config error: cannot load checkpoint "
              f"{checkpoint_path}: {err}", file=sys.stderr)
        return EXIT_CONFIG
    mode = cfg["train"]["mode"]
    if mode == "no_qp":
        spec = None
    elif class_k.theta2.size == env.num_kappa():
        spec = env.filter_spec(class_k)
    else:
        ck = ClassKParams.from_kappa(
            broadcast_kappa(cfg["train"]["fixed_kappa"], env.num_kappa()))
        spec = env.filter_spec(ck)
    if x0 is not None:
        x0 = np.asarray([float(v) for v in x0.split(",")])
        if x0.size != env.system.state_dim:
            print(f"config error: --x0 needs {env.system.state_dim} values",
                  file=sys.stderr)
            return EXIT_CONFIG
    else:
        rng = np.random.default_rng([cfg["seed"], 0x0F0])
        x0 = env.sample_x0(rng, 1)[0]
    scfg = _solve_config(cfg)
    barriers = (spec.barriers if spec is not None
                else trainer_mod._env_barriers(env))
    try:
        traj = rollout(env.system, policy, spec, x0, scfg, lyap=lyap,
                       barriers=barriers)
    except (QpInfeasibleError, NonFiniteStateError) as err:
        print(f"rollout failed: {err}", file=sys.stderr)
        return EXIT_TRAINING

    nx = traj.states.shape[1]
    nu = traj.u_nn.shape[1]
    nb = traj.barrier_values.shape[1]
    header = (["t"] + [f"x{i}" for i in range(nx)]
              + [f"u_nn{i}" for i in range(nu)]
              + [f"u_safe{i}" for i in range(nu)]
              + [f"B{i}" for i in range(nb)] + ["V", "pointwise_loss"])
    rows = []
    for k in range(len(traj.times)):
        rows.append([traj.times[k], *traj.states[k], *traj.u_nn[k],
                     *traj.u_safe[k], *traj.barrier_values[k],
                     lyap.value(traj.states[k]), traj.pointwise_loss[k]])
    _write_csv(out / "trajectory.csv", header, rows, ch, cfg["seed"])

    dist_rows = [[traj.times[k], env.target_distance(traj.states[k])]
                 for k in range(len(traj.times))]
    _write_csv(out / "distance.csv", ["t", "distance"], dist_rows, ch,
               cfg["seed"])
    return EXIT_OK


def cmd_ablate(config_path, out_dir=None, seed=None):
    try:
        cfg = load_config(config_path)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if seed is not None:
        cfg["seed"] = seed
    out = Path(out_dir or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ch = config_hash(cfg)
    env = build_env(cfg)
    lyap = env.lyapunov()
    tcfg = _train_config(cfg, True, cfg["seed"])
    scfg = _solve_config(cfg)
    kap_init = float(np.atleast_1d(cfg["certificates"]["kappa_init"])[0])
    try:
        rows = trainer_mod.ablate(
            env, lyap, tcfg, scfg, modes=cfg["ablate"]["modes"],
            eval_rollouts=cfg["ablate"]["eval_rollouts"],
            kappa_init=kap_init)
    except (DivergedLossError, QpInfeasibleError, NonFiniteStateError) as err:
        print(f"ablation failed: {err}", file=sys.stderr)
        return EXIT_TRAINING
    table = [[r["mode"], r["mean_error"], r["collision"]] for r in rows]
    _write_csv(out / "table1.csv", ["mode", "mean_error", "collision"],
               table, ch, cfg["seed"])
    return EXIT_OK


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="safeode",
        description="Train and evaluate safety-filtered neural ODE "
                    "controllers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", default=None)
    p_train.add_argument("--seed", type=int, default=None)

    p_roll = sub.add_parser("rollout", help="roll out a trained checkpoint")
    p_roll.add_argument("--checkpoint", required=True)
    p_roll.add_argument("--config", required=True)
    p_roll.add_argument("--out", default=None)
    p_roll.add_argument("--seed", type=int, default=None)
    p_roll.add_argument("--x0", default=None,
                        help="comma-separated initial state")

    p_abl = sub.add_parser("ablate", help="train and compare filter modes")
    p_abl.add_argument("--config", required=True)
    p_abl.add_argument("--out", default=None)
    p_abl.add_argument("--seed", type=int, default=None)

    args = parser.parse_args(argv)
    if args.command == "train":
        return cmd_train(args.config, args.out, args.seed)
    if args.command == "rollout":
        return cmd_rollout(args.checkpoint, args.config, args.out, args.x0,
                           args.seed)
    return cmd_ablate(args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
