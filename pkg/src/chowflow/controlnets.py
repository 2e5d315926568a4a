"""Scalar control functions a_i(t, x) as small MLPs over the joined input.

Each control is an MLP taking (t, x) in R^{1+d} to a single scalar. Hidden
layers use SiLU. Fresh networks output exactly zero: hidden layers get
Glorot-uniform weights, but the final layer starts at zero, so the initial
flow is the identity and the initial likelihood equals the base density.

Forward passes come in three flavors sharing one arithmetic order:
  - control_forward: graph nodes, differentiable in x and parameters;
  - control_forward_dual: graph forward-mode, for directional derivatives
    that must stay differentiable (the divergence term);
  - control_value / control_value_and_dir: plain numpy, for sampling and
    integration paths that need no gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, DualNode, Node, ParamStore
from .rng import SplitMix64


@dataclass(frozen=True)
class MLPSpec:
    """Architecture of one scalar control network."""

    input_dim: int
    hidden: tuple[int, ...] = (128, 128, 128)
    output_dim: int = 1

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ContractError("MLPSpec dims must be positive")
        if any(w <= 0 for w in self.hidden):
            raise ContractError(f"hidden widths must be positive, got {self.hidden}")

    def layer_dims(self) -> list[tuple[int, int]]:
        sizes = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def param_count(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_dims())


@dataclass
class ControlNet:
    """One control network bound to named slices of a parameter store."""

    spec: MLPSpec
    store: ParamStore
    prefix: str = ""

    def param_entries(self) -> list[tuple[str, tuple[int, ...]]]:
        return param_entries(self.spec, self.prefix)

    def weight_name(self, layer: int) -> str:
        return f"{self.prefix}W{layer}"

    def bias_name(self, layer: int) -> str:
        return f"{self.prefix}b{layer}"


def param_entries(spec: MLPSpec, prefix: str = "") -> list[tuple[str, tuple[int, ...]]]:
    """Layout entries for one net: per layer, weight (row-major) then bias."""
    entries = []
    for layer, (fi, fo) in enumerate(spec.layer_dims()):
        entries.append((f"{prefix}W{layer}", (fi, fo)))
        entries.append((f"{prefix}b{layer}", (fo,)))
    return entries


def init_params(net: ControlNet, seed: int) -> None:
    """Glorot-uniform hidden layers, zero biases, zero final layer."""
    rng = SplitMix64(seed)
    dims = net.spec.layer_dims()
    last = len(dims) - 1
    for layer, (fi, fo) in enumerate(dims):
        w = net.store.view(net.weight_name(layer))
        b = net.store.view(net.bias_name(layer))
        if layer == last:
            w[:] = 0.0
        else:
            bound = math.sqrt(6.0 / (fi + fo))
            w[:] = (rng.uniform(fi * fo) * 2.0 - 1.0).reshape(fi, fo) * bound
        b[:] = 0.0


def init_control_net(spec: MLPSpec, seed: int, store: ParamStore | None = None,
                     prefix: str = "") -> ControlNet:
    """Build a control net, allocating its own store unless one is given."""
    if store is None:
        store = ParamStore(param_entries(spec, prefix))
    net = ControlNet(spec, store, prefix)
    init_params(net, seed)
    return net


def _check_input(net: ControlNet, x_shape: tuple) -> None:
    d = net.spec.input_dim - 1
    if x_shape[-1] != d or len(x_shape) not in (1, 2):
        raise ContractError(
            f"control input shape {x_shape} does not match spec dim {d}"
        )


def control_forward(net: ControlNet, t: float, x, params: dict[str, Node] | None = None) -> Node:
    """Scalar control value as a graph node; x is a point or a batch of rows."""
    x_node = x if isinstance(x, Node) else dc.leaf(np.asarray(x, dtype=np.float64))
    _check_input(net, x_node.value.shape)
    if params is None:
        params = net.store.leaf_nodes()
    h = dc.with_time(t, x_node)
    last = len(net.spec.layer_dims()) - 1
    for layer in range(last + 1):
        h = dc.affine(h, params[net.weight_name(layer)], params[net.bias_name(layer)])
        if layer < last:
            h = dc.silu(h)
    return h


def control_forward_dual(net: ControlNet, t: float, x: DualNode,
                         params: dict[str, Node]) -> DualNode:
    """Same as control_forward on a dual input; t gets a zero tangent slot."""
    _check_input(net, x.primal.value.shape)
    h = dc.dual_with_time(t, x)
    last = len(net.spec.layer_dims()) - 1
    for layer in range(last + 1):
        h = dc.dual_affine(h, params[net.weight_name(layer)], params[net.bias_name(layer)])
        if layer < last:
            h = dc.dual_silu(h)
    return h


def control_value(net: ControlNet, t: float, x: np.ndarray) -> np.ndarray:
    """Plain-numpy forward, same arithmetic order as the graph version."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(net, x.shape)
    if x.ndim == 1:
        h = np.concatenate([[t], x])
    else:
        h = np.concatenate([np.full((x.shape[0], 1), t), x], axis=1)
    last = len(net.spec.layer_dims()) - 1
    for layer in range(last + 1):
        h = h @ net.store.view(net.weight_name(layer)) + net.store.view(net.bias_name(layer))
        if layer < last:
            h = h * dc._sigmoid_value(h)
    return h


def control_value_and_dir(net: ControlNet, t: float, x: np.ndarray,
                          direction: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Numpy forward returning (value, directional derivative along direction)."""
    x = np.asarray(x, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    _check_input(net, x.shape)
    if direction.shape != x.shape:
        raise ContractError("direction shape must match x")
    if x.ndim == 1:
        h = np.concatenate([[t], x])
        dh = np.concatenate([[0.0], direction])
    else:
        h = np.concatenate([np.full((x.shape[0], 1), t), x], axis=1)
        dh = np.concatenate([np.zeros((x.shape[0], 1)), direction], axis=1)
    last = len(net.spec.layer_dims()) - 1
    for layer in range(last + 1):
        w = net.store.view(net.weight_name(layer))
        h = h @ w + net.store.view(net.bias_name(layer))
        dh = dh @ w
        if layer < last:
            s = dc._sigmoid_value(h)
            dh = dh * (s * (1.0 + h * (1.0 - s)))
            h = h * s
    return h, dh
