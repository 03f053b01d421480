"""Command-line interface.

Subcommands: train, limit, expand, ensemble, mnist, selftest. Runs are
configured by a line-oriented key=value file plus repeatable --set KEY=VALUE
overrides; unknown keys are rejected. Every run writes its outputs and a
manifest (version, seed, echoed overrides, sha256 of the effective
configuration) into --out, and reruns with identical inputs produce byte
identical files.

Exit codes: 0 success, 1 domain errors (bad values, diverged runs), 2 usage
and filesystem errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from .core_model import ActivationSpec, DomainError, ScalingConfig
from .experiments import (
    Dataset,
    load_mnist,
    mc_ensemble,
    mnist_sweep,
    synth_dataset,
    synth_image_set,
)
from .kernels import InitLaw, assemble_A, kernel_B
from .limit_ode import OdeState, expansion_recursion, integrate_K, integrate_h
from .rates import rates_three_layer, rates_two_layer
from .trainer import TrainConfig, train

__all__ = ["main"]

GAMMA2_MESSAGE = "gamma2 out of range (1/2,1]"

_SCHEMA: dict[str, tuple] = {
    # (caster, default)
    "n1": (int, 4),
    "n2": (int, 64),
    "n3": (int, 0),
    "gamma1": (float, 1.0),
    "gamma2": (float, 0.75),
    "gamma3": (float, 1.0),
    "alpha_c": (float, 1.0),
    "alpha_w1": (float, 1.0),
    "alpha_w2": (float, 1.0),
    "alpha_w3": (float, 1.0),
    "activation": (str, "tanh"),
    "m": (int, 3),
    "d": (int, 3),
    "data_seed": (int, 0),
    "seed": (int, 0),
    "T": (float, 1.0),
    "dt": (float, 1e-3),
    "batch": (int, 1),
    "record_stride": (int, 1),
    "param_bound": (float, 1e6),
    "ic": (str, "auto"),
    "n_members": (int, 8),
    "epochs": (int, 2),
    "train_subset": (int, 256),
    "test_subset": (int, 128),
    "mnist_dir": (str, ""),
}


def _parse_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DomainError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _resolve_config(args) -> tuple[dict, dict[str, str]]:
    raw: dict[str, str] = {}
    if args.config:
        raw.update(_parse_config_file(args.config))
    overrides: dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise DomainError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    raw.update(overrides)
    cfg = {}
    for key, (caster, default) in _SCHEMA.items():
        if key in raw:
            try:
                cfg[key] = caster(raw.pop(key))
            except ValueError as exc:
                raise DomainError(f"config key {key}: {exc}") from exc
        else:
            cfg[key] = default
    if raw:
        bad = sorted(raw)
        raise DomainError(f"unknown config key {bad[0]!r}")
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    return cfg, overrides


def _effective_text(cfg: dict) -> str:
    return "\n".join(f"{k}={cfg[k]!r}" for k in sorted(cfg)) + "\n"


def _write_manifest(out_dir: str, command: str, cfg: dict, overrides: dict, outputs: list[str]) -> None:
    from . import __version__

    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg["seed"],
        "config_sha256": hashlib.sha256(_effective_text(cfg).encode()).hexdigest(),
        "overrides": overrides,
        "effective_config": {k: cfg[k] for k in sorted(cfg)},
        "outputs": sorted(outputs),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _check_gamma2(value: float) -> None:
    if not 0.5 <= value <= 1.0:
        raise DomainError(GAMMA2_MESSAGE)


def _scaling_and_rates(cfg: dict):
    depth = 3 if cfg["n3"] > 0 else 2
    _check_gamma2(cfg["gamma2"])
    act = ActivationSpec(cfg["activation"])
    if depth == 2:
        widths = (cfg["n1"], cfg["n2"])
        gammas = (cfg["gamma1"], cfg["gamma2"])
        alphas = (cfg["alpha_c"], cfg["alpha_w1"], cfg["alpha_w2"])
        rates = rates_two_layer(*widths, *gammas, *alphas)
    else:
        widths = (cfg["n1"], cfg["n2"], cfg["n3"])
        gammas = (cfg["gamma1"], cfg["gamma2"], cfg["gamma3"])
        alphas = (cfg["alpha_c"], cfg["alpha_w1"], cfg["alpha_w2"], cfg["alpha_w3"])
        rates = rates_three_layer(*widths, *gammas, *alphas)
    scaling = ScalingConfig(widths, gammas, alphas, act)
    return scaling, rates


def _regression_setup(cfg: dict):
    dataset = synth_dataset(cfg["m"], cfg["d"], cfg["data_seed"])
    law = InitLaw.default(cfg["n1"], cfg["d"], cfg["data_seed"])
    return dataset, law


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(cfg: dict, out_dir: str, threads: int | None) -> list[str]:
    scaling, rates = _scaling_and_rates(cfg)
    dataset, law = _regression_setup(cfg)
    tc = TrainConfig(
        scaling,
        rates,
        horizon=cfg["T"],
        batch=cfg["batch"],
        record_stride=cfg["record_stride"],
        seed=cfg["seed"],
        param_bound=cfg["param_bound"],
    )
    traj = train(tc, dataset, law)
    path = os.path.join(out_dir, "trajectory.csv")
    traj.to_csv(path)
    return [path]


def _cmd_limit(cfg: dict, out_dir: str, threads: int | None) -> list[str]:
    _check_gamma2(cfg["gamma2"])
    dataset, law = _regression_setup(cfg)
    act = ActivationSpec(cfg["activation"])
    tables = kernel_B(dataset.X, law, cfg["n1"], cfg["gamma1"], act)
    A = assemble_A(tables, dataset.X)
    h_state = integrate_h(A, dataset.y, cfg["T"], cfg["dt"])
    if cfg["gamma2"] < 1.0:
        k_state = integrate_K(
            h_state, cfg["gamma2"], tables, law, dataset.X, ic=cfg["ic"], seed=cfg["seed"]
        )
        combined = OdeState(h_state.t, {"h": h_state["h"], "K": k_state["K"]}, h_state.meta)
    else:
        combined = h_state
    path = os.path.join(out_dir, "limit.csv")
    combined.to_csv(path)
    return [path]


def _cmd_expand(cfg: dict, out_dir: str, threads: int | None) -> list[str]:
    _check_gamma2(cfg["gamma2"])
    dataset, law = _regression_setup(cfg)
    state = expansion_recursion(
        dataset,
        law,
        cfg["gamma2"],
        cfg["T"],
        cfg["dt"],
        n1=cfg["n1"],
        gamma1=cfg["gamma1"],
        seed=cfg["seed"],
        ic=cfg["ic"],
    )
    path = os.path.join(out_dir, "expansion.csv")
    state.to_csv(path)
    return [path]


def _cmd_ensemble(cfg: dict, out_dir: str, threads: int | None) -> list[str]:
    scaling, rates = _scaling_and_rates(cfg)
    dataset, law = _regression_setup(cfg)
    tc = TrainConfig(
        scaling,
        rates,
        horizon=cfg["T"],
        record_stride=cfg["record_stride"],
        seed=cfg["seed"],
        param_bound=cfg["param_bound"],
    )
    result = mc_ensemble(tc, dataset, law, cfg["n_members"], threads=threads)
    path = os.path.join(out_dir, "ensemble.csv")
    result.to_csv(path, n2=cfg["n2"], gamma2=cfg["gamma2"])
    return [path]


def _cmd_mnist(cfg: dict, out_dir: str, threads: int | None) -> list[str]:
    _check_gamma2(cfg["gamma2"])
    data_dir = cfg["mnist_dir"]
    created: list[str] = []
    if data_dir:
        paths = {
            "train_images": os.path.join(data_dir, "train-images-idx3-ubyte"),
            "train_labels": os.path.join(data_dir, "train-labels-idx1-ubyte"),
            "test_images": os.path.join(data_dir, "t10k-images-idx3-ubyte"),
            "test_labels": os.path.join(data_dir, "t10k-labels-idx1-ubyte"),
        }
    else:
        paths = synth_image_set(
            os.path.join(out_dir, "data"),
            n_train=max(cfg["train_subset"], 256),
            n_test=max(cfg["test_subset"], 128),
            seed=cfg["data_seed"],
        )
        created = sorted(paths.values())
    train_set = load_mnist(
        paths["train_images"], paths["train_labels"], subset=cfg["train_subset"], seed=cfg["data_seed"]
    )
    test_set = load_mnist(
        paths["test_images"], paths["test_labels"], subset=cfg["test_subset"], seed=cfg["data_seed"]
    )
    depth = 3 if cfg["n3"] > 0 else 2
    widths = (cfg["n1"], cfg["n2"], cfg["n3"])[:depth]
    gammas = (cfg["gamma1"], cfg["gamma2"], cfg["gamma3"])[:depth]
    path = os.path.join(out_dir, "mnist_metrics.csv")
    mnist_sweep(
        train_set,
        test_set,
        [gammas],
        widths,
        cfg["epochs"],
        batch=cfg["batch"],
        seed=cfg["seed"],
        out_csv=path,
    )
    return [path] + created


def _cmd_selftest(cfg: dict, out_dir: str, threads: int | None) -> list[str]:
    # scalar problem A = 2, target 1, unit horizon: h_1 = 1 - e^-2 and the
    # decaying fluctuation started at 1 reaches e^-2
    T, dt = 1.0, 1e-3
    A = np.array([[2.0]])
    y = np.array([1.0])
    h_state = integrate_h(A, y, T, dt)
    h_err = abs(float(h_state["h"][-1, 0]) - (1.0 - math.exp(-2.0)))
    k_state = integrate_K(h_state, gamma2=0.6, ic=np.array([1.0]))
    k_err = abs(float(k_state["K"][-1, 0]) - math.exp(-2.0))
    tol = 1e-8
    print(f"limit ODE closed form: err={h_err:.3e} {'PASS' if h_err < tol else 'FAIL'}")
    print(f"fluctuation decay closed form: err={k_err:.3e} {'PASS' if k_err < tol else 'FAIL'}")
    if max(h_err, k_err) >= tol:
        raise DomainError("selftest failed")
    print("selftest PASS")
    return []


_COMMANDS = {
    "train": _cmd_train,
    "limit": _cmd_limit,
    "expand": _cmd_expand,
    "ensemble": _cmd_ensemble,
    "mnist": _cmd_mnist,
    "selftest": _cmd_selftest,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scalednn",
        description="Normalization-scaled networks: training, limits, expansions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value configuration file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="override one configuration key (repeatable)",
        )
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, overrides = _resolve_config(args)
        threads = args.threads
        if threads is None:
            env = os.environ.get("SCALED_NN_THREADS")
            threads = int(env) if env else None
        out_dir = args.out if args.out else f"scalednn_{args.command}"
        if args.command != "selftest":
            os.makedirs(out_dir, exist_ok=True)
        outputs = _COMMANDS[args.command](cfg, out_dir, threads)
        if args.command != "selftest":
            _write_manifest(out_dir, args.command, cfg, overrides, outputs)
        return 0
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
