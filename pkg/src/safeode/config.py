"""Experiment configuration: one human-editable YAML file.

The schema is flat-ish nested key/value; unknown keys are rejected so typos
fail loudly.  `load_config` returns a plain dict with defaults filled in,
and `config_hash` gives the provenance tag embedded in every output file.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np
import yaml

from .envs import CarChainEnv, Unicycle4Env, UnicycleEnv
from .policy import ClassKParams, MlpPolicy


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "env": (str, "unicycle"),
    "seed": (int, 0),
    "out_dir": (str, "runs/out"),
    "certificates": {
        "gamma": (float, 5.0),
        "kappa_init": (list, [1.0]),
        "obstacle": (list, [-0.5, -0.5]),
        "delta1": (float, 0.5),
        "target": (list, [0.0, 0.0]),
        "delta2": (float, 0.1),
        "lookahead": (float, 0.1),
        "min_distance": (float, 2.0),
    },
    "policy": {
        "hidden": (list, [64]),
        "output_scale": (float, 1.0),
    },
    "train": {
        "mode": (str, "learned_kappa"),
        "fixed_kappa": (list, [5.0]),
        "epochs": (int, 100),
        "batch_size": (int, 32),
        "optimizer": (str, "adam"),
        "lr1": (float, 0.03),
        "lr2": (float, 0.05),
        "clf_weight": (float, 1.0),
        "terminal_weight": (float, 0.0),
        "grad_method": (str, "discrete"),
    },
    "solve": {
        "t0": (float, 0.0),
        "tf": (float, 1.0),
        "dt": (float, 0.01),
        "method": (str, "euler"),
    },
    "ablate": {
        "modes": (list, ["no_qp", "inference_qp", "fixed_kappa_5",
                         "fixed_kappa_10", "learned_kappa"]),
        "eval_rollouts": (int, 50),
    },
}

_ENVS = ("unicycle", "unicycle4", "cars")
_MODES = ("learned_kappa", "fixed_kappa", "no_qp", "inference_qp")


def _merge(schema, data, path):
    out = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    for key in data:
        if key not in schema:
            raise ConfigError(f"unknown key {path + key!r}")
    for key, spec in schema.items():
        if isinstance(spec, dict):
            out[key] = _merge(spec, data.get(key, {}), path + key + ".")
            continue
        typ, default = spec
        if key in data:
            val = data[key]
            if typ is float and isinstance(val, int) \
                    and not isinstance(val, bool):
                val = float(val)
            if typ is list and isinstance(val, (int, float)) \
                    and not isinstance(val, bool):
                val = [float(val)]
            if isinstance(val, bool) or not isinstance(val, typ):
                raise ConfigError(
                    f"{path + key}: expected {typ.__name__}, "
                    f"got {type(val).__name__}")
            out[key] = val
        else:
            out[key] = default
    return out


def validate_config(raw: dict) -> dict:
    cfg = _merge(_SCHEMA, raw or {}, "")
    if cfg["env"] not in _ENVS:
        raise ConfigError(f"env must be one of {_ENVS}, got {cfg['env']!r}")
    if cfg["train"]["mode"] not in _MODES:
        raise ConfigError(
            f"train.mode must be one of {_MODES}, got {cfg['train']['mode']!r}")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as err:
        raise ConfigError(f"config file {path} is not valid YAML: {err}")
    return validate_config(raw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def build_env(cfg: dict):
    cert = cfg["certificates"]
    if cfg["env"] == "unicycle":
        return UnicycleEnv(
            l_p=cert["lookahead"],
            p_obs=tuple(cert["obstacle"]),
            delta1=cert["delta1"],
            p_tar=tuple(cert["target"]),
            delta2=cert["delta2"],
            gamma=cert["gamma"],
        )
    if cfg["env"] == "unicycle4":
        return Unicycle4Env(
            p_obs=tuple(cert["obstacle"]),
            delta1=cert["delta1"],
            p_tar=tuple(cert["target"]),
            delta2=cert["delta2"],
            gamma=cert["gamma"],
        )
    return CarChainEnv(delta=cert["min_distance"], gamma=cert["gamma"])


def build_policy(cfg: dict, env) -> MlpPolicy:
    dims = (env.system.state_dim, *[int(d) for d in cfg["policy"]["hidden"]],
            env.system.control_dim)
    return MlpPolicy.init_random(dims, seed=cfg["seed"],
                                 output_scale=cfg["policy"]["output_scale"])


def broadcast_kappa(values, num_slots) -> list:
    """Spread configured kappa values over the filter's slots: a scalar
    fills every slot, a per-barrier pattern is tiled."""
    vals = [float(v) for v in np.atleast_1d(values)]
    if len(vals) == num_slots:
        return vals
    if len(vals) == 1:
        return vals * num_slots
    if num_slots % len(vals) == 0:
        return vals * (num_slots // len(vals))
    raise ConfigError(
        f"cannot spread {len(vals)} kappa values over {num_slots} slots")


def build_filter_specs(cfg: dict, env):
    """(train_spec, eval_spec, train_theta2) for the configured mode."""
    mode = cfg["train"]["mode"]
    nk = env.num_kappa()
    if mode == "no_qp":
        return None, None, False
    if mode == "inference_qp":
        ck = ClassKParams.from_kappa(
            broadcast_kappa(cfg["train"]["fixed_kappa"], nk))
        return None, env.filter_spec(ck), False
    if mode == "fixed_kappa":
        ck = ClassKParams.from_kappa(
            broadcast_kappa(cfg["train"]["fixed_kappa"], nk))
        spec = env.filter_spec(ck)
        return spec, spec, False
    ck = ClassKParams.from_kappa(
        broadcast_kappa(cfg["certificates"]["kappa_init"], nk))
    spec = env.filter_spec(ck)
    return spec, spec, True
