"""Run configuration: defaults, JSON loading, dotted overrides, validation.

A configuration is a nested dict mirroring the module boundaries.  Values in
a user JSON file override the defaults; ``--set a.b.c=value`` flags override
both (values parse as JSON literals, falling back to plain strings).
"""

import copy
import json

import numpy as np

from .datamodel import CovarianceSpec
from .errors import ConfigurationError, FormatError
from .objective import ObjectiveConfig
from .optimizer import ArmijoConfig, PreconditionerConfig, SolverConfig
from .sensing import SensingConfig
from .unet import UNetSpec

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "out",
    "data": {
        "l": 32,
        "rows": 32,
        "cols": 32,
        "kind": "toeplitz",
        "rho": 0.9,
        "rank": 4,
        "scale": 1.0,
        "covariance_path": "",
        "cube": "cube.hsc",
        "sigma_true": "sigma_true.csv",
    },
    "sensing": {
        "m": 9,
        "p": 256,
        "sigma_n": "auto",  # 0.01 * sqrt(trace(Sigma)/l)
    },
    "objective": {"tau": 0.0, "psi": "none"},
    "diffusion": {
        "p_min": 2,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "calibration_instances": 48,
        "iterate_spread": [0.05, 0.5],
        "trajectory_fraction": 0.5,
        "schedule": "schedule.json",
    },
    "denoiser": {
        "channels": [16, 32, 64],
        "d_emb": 32,
        "records": 8000,
        "noise_source": "measured",  # or "synthetic" forward-process injection
        "lr": 1e-3,
        "batch": 32,
        "steps": 2800,
        "val_fraction": 0.08,
        "weights": "weights.cgdm",
        "log": "train_log.csv",
        "checkpoint": "",
        "max_steps_per_run": 0,  # 0: run to the configured total
    },
    "solver": {
        "lambda0": None,
        "armijo_c": 1e-4,
        "shrink": 0.5,
        "max_backtracks": 30,
        "max_iters": 300,
        "tol_grad": None,
        "tol_obj": 1e-8,
        "stall_limit": 5,
        "preconditioner": "identity",
        "kernel_sigma": 1.0,
        "sigma_scale": 0.0,
        "start_step": None,
        "exact_measurements": False,
    },
    "eval": {
        "seeds": 10,
        "cos_threshold": 0.9,
        "report": "report.csv",
        "heatmaps": True,
    },
}


def _deep_merge(base, extra):
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if key not in out:
            raise ConfigurationError(f"unknown configuration key {key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"section {key!r} must be a mapping")
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def set_by_path(cfg, dotted, raw_value):
    """Apply one ``--set a.b.c=value`` override in place."""
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigurationError(f"unknown configuration path {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigurationError(f"unknown configuration key {dotted!r}")
    node[parts[-1]] = value


def load_config(path=None, overrides=(), seed=None, out_dir=None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigurationError(f"configuration file {path!r} not found")
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise FormatError(f"{path}: top level must be an object")
        cfg = _deep_merge(cfg, user)
    for dotted in overrides:
        if "=" not in dotted:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {dotted!r}")
        key, _, value = dotted.partition("=")
        set_by_path(cfg, key, value)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out_dir is not None:
        cfg["out_dir"] = str(out_dir)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    data, sensing = cfg["data"], cfg["sensing"]
    l, n = int(data["l"]), int(data["rows"]) * int(data["cols"])
    m, p = int(sensing["m"]), int(sensing["p"])
    if m >= l:
        raise ConfigurationError(f"need m < l, got m={m}, l={l}")
    if n % p != 0:
        raise ConfigurationError(f"partition count {p} does not divide n={n}")
    diffusion_used = (
        cfg["solver"]["preconditioner"] == "diffusion" or True
    )  # training always possible; enforce the stricter rule up front
    if diffusion_used and l % 4 != 0:
        raise ConfigurationError(
            f"l={l} must be divisible by 4 when the diffusion path is enabled"
        )
    lo, hi = cfg["diffusion"]["iterate_spread"]
    if not 0 < lo <= hi:
        raise ConfigurationError("iterate_spread must be 0 < lo <= hi")
    if int(cfg["diffusion"]["p_min"]) < 2:
        raise ConfigurationError("p_min must be >= 2")
    if cfg["objective"]["psi"] not in ("none", "frobenius_ridge"):
        raise ConfigurationError(f"unknown regularizer {cfg['objective']['psi']!r}")
    return cfg


def samples_from(cfg):
    return int(cfg["data"]["rows"]) * int(cfg["data"]["cols"])


def cov_spec_from(cfg):
    data = cfg["data"]
    return CovarianceSpec(
        kind=data["kind"],
        l=int(data["l"]),
        rho=float(data["rho"]),
        rank=int(data["rank"]),
        scale=float(data["scale"]),
        path=data["covariance_path"],
    )


def sigma_n_from(cfg, sigma_true):
    raw = cfg["sensing"]["sigma_n"]
    if raw in (None, "auto"):
        l = sigma_true.shape[0]
        return 0.01 * float(np.sqrt(np.trace(sigma_true) / l))
    return float(raw)


def sensing_config_from(cfg, sigma_true):
    return SensingConfig(
        l=int(cfg["data"]["l"]),
        m=int(cfg["sensing"]["m"]),
        p=int(cfg["sensing"]["p"]),
        sigma_n=sigma_n_from(cfg, sigma_true),
    )


def objective_config_from(cfg):
    return ObjectiveConfig(
        tau=float(cfg["objective"]["tau"]), psi=cfg["objective"]["psi"]
    )


def unet_spec_from(cfg):
    c1, c2, c3 = (int(c) for c in cfg["denoiser"]["channels"])
    return UNetSpec(c1=c1, c2=c2, c3=c3, d_emb=int(cfg["denoiser"]["d_emb"]))


def solver_config_from(cfg, kind=None, schedule=None, params=None):
    solver = cfg["solver"]
    kind = kind if kind is not None else solver["preconditioner"]
    precond = PreconditionerConfig(
        kind=kind,
        kernel_sigma=float(solver["kernel_sigma"]),
        schedule=schedule,
        params=params,
        start_step=solver["start_step"],
        sigma_scale=float(solver["sigma_scale"]),
    )
    return SolverConfig(
        lambda0=solver["lambda0"],
        armijo=ArmijoConfig(
            c=float(solver["armijo_c"]),
            shrink=float(solver["shrink"]),
            max_backtracks=int(solver["max_backtracks"]),
        ),
        max_iters=int(solver["max_iters"]),
        tol_grad=solver["tol_grad"],
        tol_obj=float(solver["tol_obj"]),
        stall_limit=int(solver["stall_limit"]),
        preconditioner=precond,
    )
