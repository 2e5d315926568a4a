"""Versioned plain-text checkpoints.

The format is line-oriented key=value headers followed by one `param <name>
<length>` section per parameter slice with one decimal value per line.
Values are written with 17 significant digits, so a save/load round trip
reproduces every float64 bit-exactly while staying diffable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .controlnets import MLPSpec
from .diffcore import ContractError
from .fields import named_field_set
from .flow import ControlledFlowModel, build_model

FORMAT_VERSION = 1


class CheckpointVersionError(ContractError):
    """The file's format-version does not match this implementation."""


@dataclass
class Checkpoint:
    d: int
    k: int
    field_set: str
    permutation: list[int] | None
    hidden: tuple[int, ...]
    horizon: float
    seed: int
    final_loss: float | None
    train_echo: dict[str, str] = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    param_order: list[str] = field(default_factory=list)


def save_checkpoint(path: str, model: ControlledFlowModel, *, field_set: str,
                    permutation=None, seed: int = 0,
                    final_loss: float | None = None,
                    train_echo: dict | None = None) -> None:
    hidden = model.controls[0].spec.hidden
    with open(path, "w") as fh:
        fh.write(f"format-version={FORMAT_VERSION}\n")
        fh.write(f"d={model.dim}\n")
        fh.write(f"k={model.k}\n")
        fh.write(f"field-set={field_set}\n")
        if permutation is not None:
            fh.write("permutation=" + ",".join(str(i) for i in permutation) + "\n")
        fh.write("hidden-widths=" + ",".join(str(w) for w in hidden) + "\n")
        fh.write(f"horizon={model.horizon:.17g}\n")
        fh.write(f"seed={seed}\n")
        if final_loss is not None:
            fh.write(f"final-loss={final_loss:.17g}\n")
        for key, value in (train_echo or {}).items():
            fh.write(f"train.{key}={value}\n")
        for name in model.store.names():
            values = model.store.view(name).ravel()
            fh.write(f"param {name} {values.size}\n")
            for v in values:
                fh.write(f"{v:.17g}\n")


def load_checkpoint(path: str) -> Checkpoint:
    with open(path) as fh:
        lines = iter(fh.read().splitlines())
    first = next(lines, None)
    if first is None or not first.startswith("format-version="):
        raise CheckpointVersionError(f"'{path}' is not a checkpoint file")
    version = int(first.split("=", 1)[1])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {version} not supported (expected {FORMAT_VERSION})"
        )
    header: dict[str, str] = {}
    train_echo: dict[str, str] = {}
    params: dict[str, np.ndarray] = {}
    order: list[str] = []
    for line in lines:
        if line.startswith("param "):
            _, name, size = line.split()
            values = np.empty(int(size))
            for j in range(int(size)):
                values[j] = float(next(lines))
            params[name] = values
            order.append(name)
        elif "=" in line:
            key, value = line.split("=", 1)
            if key.startswith("train."):
                train_echo[key[len("train."):]] = value
            else:
                header[key] = value
        elif line.strip():
            raise ContractError(f"malformed checkpoint line: {line!r}")
    try:
        permutation = None
        if "permutation" in header:
            permutation = [int(v) for v in header["permutation"].split(",")]
        hidden = tuple(
            int(w) for w in header["hidden-widths"].split(",") if w
        )
        ckpt = Checkpoint(
            d=int(header["d"]),
            k=int(header["k"]),
            field_set=header["field-set"],
            permutation=permutation,
            hidden=hidden,
            horizon=float(header["horizon"]),
            seed=int(header["seed"]),
            final_loss=float(header["final-loss"]) if "final-loss" in header else None,
            train_echo=train_echo,
            params=params,
            param_order=order,
        )
    except KeyError as missing:
        raise ContractError(f"checkpoint missing header key {missing}") from None
    return ckpt


def model_from_checkpoint(ckpt: Checkpoint) -> ControlledFlowModel:
    """Rebuild the model and restore every parameter slice bit-exactly."""
    field_set = named_field_set(ckpt.field_set, ckpt.d, ckpt.k, ckpt.permutation)
    model = build_model(field_set, hidden=ckpt.hidden, seed=ckpt.seed,
                        horizon=ckpt.horizon)
    expected = model.store.names()
    if ckpt.param_order != expected:
        raise ContractError(
            f"checkpoint parameters {ckpt.param_order[:3]}... do not match "
            f"model layout {expected[:3]}..."
        )
    spec = MLPSpec(input_dim=ckpt.d + 1, hidden=ckpt.hidden)
    if len(model.store) != spec.param_count * ckpt.k:
        raise ContractError("checkpoint parameter count mismatch")
    for name in expected:
        view = model.store.view(name)
        values = ckpt.params[name]
        if values.size != view.size:
            raise ContractError(f"parameter '{name}' has wrong length")
        view[:] = values.reshape(view.shape)
    return model
