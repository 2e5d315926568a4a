"""Command-line entry point.

Subcommands: gen-data, train, sample, eval, check-brackets,
export-trajectory. Training is driven by a flat key=value config file whose
keys mirror the run configuration; unknown keys are rejected to catch
typos. All file outputs are written atomically (temp file then rename).

Exit codes: 0 success, 2 usage or config error, 3 I/O failure, 4 numeric
abort, 5 certification failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, fields as dataclass_fields

import numpy as np

from . import data as datamod
from .checkpoint import (
    CheckpointVersionError,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .diffcore import ContractError, NumericError
from .fields import FIELD_SET_NAMES, coordinate_field, named_field_set, rank_certificate
from .flow import (
    SAMPLE_STEPS_DEFAULT,
    SolverConfig,
    build_model,
    integrate_augmented,
    log_p0,
    sample,
    trajectory,
)
from .rng import SplitMix64
from .train import TrainConfig, TrainingAborted, train_loop

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CERT_FAIL = 5

EVAL_CHUNK = 1024


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    d: int = 3
    k: int = 2
    field_set: str = "chain-pair"
    permutation: list[int] | None = None
    hidden_widths: tuple[int, ...] = (128, 128, 128)
    dataset: str = "mixture"
    data_path: str | None = None
    train_size: int = 20_000
    iterations: int = 3000
    batch: int = 512
    learning_rate: float = 1e-3
    clip_norm: float = 10.0
    k_steps: int = 16
    horizon: float = 1.0
    seed: int = 0
    out_dir: str = "run"


def _parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


_CONFIG_PARSERS = {
    "d": ("d", int),
    "k": ("k", int),
    "field-set": ("field_set", str),
    "permutation": ("permutation", _parse_int_list),
    "hidden-widths": ("hidden_widths", lambda s: tuple(_parse_int_list(s))),
    "dataset": ("dataset", str),
    "data-path": ("data_path", str),
    "train-size": ("train_size", int),
    "iterations": ("iterations", int),
    "batch": ("batch", int),
    "learning-rate": ("learning_rate", float),
    "clip-norm": ("clip_norm", float),
    "k-steps": ("k_steps", int),
    "horizon": ("horizon", float),
    "seed": ("seed", int),
    "out-dir": ("out_dir", str),
}


def parse_config(path: str) -> RunConfig:
    """Flat key=value file with # comments; unknown keys are errors."""
    cfg = RunConfig()
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_PARSERS:
                raise ContractError(f"{path}:{lineno}: unknown config key '{key}'")
            attr, parse = _CONFIG_PARSERS[key]
            try:
                setattr(cfg, attr, parse(value))
            except ValueError as err:
                raise ContractError(f"{path}:{lineno}: bad value for '{key}': {err}")
    if cfg.k > cfg.d:
        raise ContractError(f"config has k={cfg.k} > d={cfg.d}")
    return cfg


def config_echo(cfg: RunConfig) -> dict[str, str]:
    """Training configuration keys for the checkpoint (paths excluded)."""
    echo = {}
    for f in dataclass_fields(cfg):
        if f.name in ("out_dir", "data_path"):
            continue
        value = getattr(cfg, f.name)
        if value is None:
            continue
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        echo[f.name.replace("_", "-")] = str(value)
    return echo


# ---------------------------------------------------------------------------
# helpers


@contextmanager
def atomic_output(path: str):
    """Yield a temp path that replaces `path` only on success."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def write_loss_csv(path: str, history) -> None:
    with atomic_output(path) as tmp:
        with open(tmp, "w") as fh:
            fh.write("iteration,nll\n")
            for i, value in history.rows():
                fh.write(f"{i},{value:.17g}\n")


def _load_model(path: str):
    ckpt = load_checkpoint(path)
    return ckpt, model_from_checkpoint(ckpt)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    kwargs = {}
    if args.noise_sd is not None:
        kwargs["noise_sd"] = args.noise_sd
    if args.d is not None:
        kwargs["d"] = args.d
    dataset = datamod.generate(args.name, args.n, seed=args.seed, **kwargs)
    with atomic_output(args.out) as tmp:
        datamod.write_points_csv(tmp, dataset.points)
    with atomic_output(args.out + ".meta") as tmp:
        datamod.write_sidecar(tmp, dataset)
    print(f"wrote {len(dataset)} x {dataset.dim} points to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    field_set = named_field_set(cfg.field_set, cfg.d, cfg.k, cfg.permutation)
    model = build_model(field_set, hidden=cfg.hidden_widths, seed=cfg.seed,
                        horizon=cfg.horizon)
    if cfg.data_path:
        points = datamod.read_points_csv(cfg.data_path)
    else:
        points = datamod.generate(cfg.dataset, cfg.train_size, seed=cfg.seed).points
    if points.shape[1] != cfg.d:
        raise ContractError(
            f"dataset dimension {points.shape[1]} does not match d={cfg.d}"
        )
    train_cfg = TrainConfig(
        iterations=cfg.iterations, batch=cfg.batch,
        learning_rate=cfg.learning_rate, clip_norm=cfg.clip_norm,
        k_steps=cfg.k_steps, horizon=cfg.horizon, seed=cfg.seed,
        dataset=cfg.dataset,
    )
    try:
        model, history = train_loop(model, points, train_cfg,
                                    log_every=args.log_every)
    except TrainingAborted as err:
        print(f"numeric abort at iteration {err.iteration}: {err.cause}", file=sys.stderr)
        write_loss_csv(os.path.join(cfg.out_dir, "loss_history.csv"), err.history)
        return EXIT_NUMERIC
    final_loss = history.values[-1] if len(history) else None
    ckpt_path = os.path.join(cfg.out_dir, "checkpoint.txt")
    with atomic_output(ckpt_path) as tmp:
        save_checkpoint(
            tmp, model, field_set=cfg.field_set, permutation=cfg.permutation,
            seed=cfg.seed, final_loss=final_loss, train_echo=config_echo(cfg),
        )
    write_loss_csv(os.path.join(cfg.out_dir, "loss_history.csv"), history)
    if final_loss is None:
        print("final nll: n/a (0 iterations)")
    else:
        print(f"final nll: {final_loss:.6f}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_sample(args) -> int:
    _, model = _load_model(args.checkpoint)
    cfg = SolverConfig(steps=args.k_steps, direction="forward")
    points = sample(model, args.n, seed=args.seed, cfg=cfg)
    with atomic_output(args.out) as tmp:
        datamod.write_points_csv(tmp, points)
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _, model = _load_model(args.checkpoint)
    points = datamod.read_points_csv(args.data)
    if points.shape[1] != model.dim:
        raise ContractError(
            f"data dimension {points.shape[1]} does not match model dim {model.dim}"
        )
    cfg = SolverConfig(steps=args.k_steps, direction="backward")
    loglik = np.empty(points.shape[0])
    for start in range(0, points.shape[0], EVAL_CHUNK):
        chunk = points[start : start + EVAL_CHUNK]
        state = integrate_augmented(model, chunk, cfg)
        loglik[start : start + len(chunk)] = log_p0(state.x) - state.delta
    if args.out:
        with atomic_output(args.out) as tmp:
            with open(tmp, "w") as fh:
                fh.write("row,log_likelihood\n")
                for i, v in enumerate(loglik):
                    fh.write(f"{i},{v:.17g}\n")
    print(f"mean nll: {-float(np.mean(loglik)):.6f} over {len(loglik)} rows")
    return EXIT_OK


def cmd_check_brackets(args) -> int:
    if args.field_set == "coordinate":
        if not 1 <= args.k <= args.d:
            raise ContractError(f"need 1 <= k <= d, got k={args.k}, d={args.d}")
        field_list = [coordinate_field(i, args.d) for i in range(1, args.k + 1)]
    else:
        field_list = list(
            named_field_set(args.field_set, args.d, args.k, args.permutation)
        )
    depth = args.depth if args.depth is not None else max(args.d - 2, 0)
    points = SplitMix64(args.seed).normal((args.n_points, args.d))
    ranks = rank_certificate(field_list, points, depth=depth, tol=args.tol)
    ok = bool(np.all(ranks == args.d))
    print(
        f"field-set {args.field_set} d={args.d} k={len(field_list)} depth={depth}: "
        f"rank min={ranks.min()} max={ranks.max()} over {args.n_points} points"
    )
    if args.out:
        with atomic_output(args.out) as tmp:
            with open(tmp, "w") as fh:
                fh.write("point," + ",".join(f"x{j+1}" for j in range(args.d)) + ",rank\n")
                for i, (x, r) in enumerate(zip(points, ranks)):
                    coords = ",".join(f"{v:.17g}" for v in x)
                    fh.write(f"{i},{coords},{r}\n")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CERT_FAIL


def cmd_export_trajectory(args) -> int:
    _, model = _load_model(args.checkpoint)
    if args.x0 is not None:
        x0 = np.array([float(v) for v in args.x0.split(",")])
        if x0.size != model.dim:
            raise ContractError(f"--x0 needs {model.dim} coordinates")
    else:
        x0 = SplitMix64(args.seed).normal((1, model.dim))[0]
    times, states, deltas = trajectory(model, x0, steps=args.k_steps)
    with atomic_output(args.out) as tmp:
        with open(tmp, "w") as fh:
            header = ",".join(f"x{j+1}" for j in range(model.dim))
            fh.write(f"step,t,{header},delta\n")
            for i in range(len(times)):
                coords = ",".join(f"{v:.17g}" for v in states[i])
                fh.write(f"{i},{times[i]:.17g},{coords},{deltas[i]:.17g}\n")
    print(f"wrote {len(times)} trajectory rows to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chowflow",
        description="Generative flows from scalar controls over fixed "
                    "bracket-generating vector fields.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset CSV")
    p.add_argument("name", help="moons3d | mixture | torus3d | base_gaussian")
    p.add_argument("--n", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--noise-sd", type=float, default=None)
    p.add_argument("--d", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a key=value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-steps", type=int, default=SAMPLE_STEPS_DEFAULT)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="mean NLL of a dataset under a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k-steps", type=int, default=SAMPLE_STEPS_DEFAULT)
    p.add_argument("--out", default=None, help="per-row log-likelihood CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check-brackets", help="bracket-generating rank certificate")
    p.add_argument("--field-set", default="chain-pair",
                   help=" | ".join(FIELD_SET_NAMES))
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--permutation", type=_parse_int_list, default=None)
    p.add_argument("--depth", type=int, default=None, help="default d - 2")
    p.add_argument("--n-points", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out", default=None, help="per-point rank CSV")
    p.set_defaults(func=cmd_check_brackets)

    p = sub.add_parser("export-trajectory", help="per-step CSV of one flow path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--x0", default=None, help="comma-separated start point")
    p.add_argument("--seed", type=int, default=0, help="base draw if no --x0")
    p.add_argument("--k-steps", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_trajectory)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CheckpointVersionError, ContractError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
