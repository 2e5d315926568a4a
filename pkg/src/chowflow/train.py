"""Likelihood training: minibatched NLL, gradient clipping, Adam.

Each iteration samples a minibatch uniformly with replacement (seeded),
integrates it backward through the flow to build the mean negative
log-likelihood as one graph, backpropagates through every solver step,
clips the gradient by global norm, and applies a bias-corrected Adam step.
The whole loop is a pure function of (model init, dataset, config), so the
loss history is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Node, NumericError, ParamStore
from .flow import ControlledFlowModel, SolverConfig, log_likelihood
from .rng import SplitMix64


@dataclass
class TrainConfig:
    iterations: int = 3000
    batch: int = 512
    learning_rate: float = 1e-3
    clip_norm: float = 10.0
    k_steps: int = 16
    horizon: float = 1.0
    seed: int = 0
    dataset: str = "mixture"

    def __post_init__(self):
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")
        for name in ("batch", "learning_rate", "clip_norm", "k_steps", "horizon"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def zeros(n: int) -> "AdamState":
        return AdamState(m=np.zeros(n), v=np.zeros(n))


@dataclass
class LossHistory:
    values: list[float] = field(default_factory=list)

    def append(self, nll: float) -> None:
        self.values.append(nll)

    def __len__(self):
        return len(self.values)

    def rows(self) -> list[tuple[int, float]]:
        return list(enumerate(self.values))


class TrainingAborted(RuntimeError):
    """An iteration failed numerically; partial history is retained."""

    def __init__(self, iteration: int, cause: Exception, history: LossHistory):
        super().__init__(f"training aborted at iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause
        self.history = history


def nll_batch(model: ControlledFlowModel, batch: np.ndarray, cfg: TrainConfig,
              params: dict[str, Node] | None = None) -> Node:
    """Mean negative log-likelihood of a batch, as a differentiable node."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != model.dim:
        raise ContractError(f"batch shape {batch.shape} does not match dim {model.dim}")
    if not np.all(np.isfinite(batch)):
        raise NumericError("non-finite batch row", op="nll")
    solver = SolverConfig(steps=cfg.k_steps, direction="backward")
    logp = log_likelihood(model, batch, solver, params)
    return dc.node_sum(logp) * (-1.0 / batch.shape[0])


def clip_by_global_norm(grads: np.ndarray, max_norm: float) -> np.ndarray:
    """Scale grads to have 2-norm at most max_norm, preserving direction."""
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient", op="clip")
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads


def adam_update(params: ParamStore, grads: np.ndarray, state: AdamState,
                lr: float) -> tuple[ParamStore, AdamState]:
    """Standard bias-corrected Adam step, applied in place to the store."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.flat.shape:
        raise ContractError(
            f"gradient length {grads.shape} does not match parameters {params.flat.shape}"
        )
    if state.m.shape != params.flat.shape or state.v.shape != params.flat.shape:
        raise ContractError("Adam state layout does not match parameters")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    params.flat[:] = params.flat - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def train_loop(model: ControlledFlowModel, dataset: np.ndarray,
               cfg: TrainConfig,
               log_every: int = 0) -> tuple[ControlledFlowModel, LossHistory]:
    """Run the likelihood training loop; returns the model and loss history.

    The minibatch stream is seeded by cfg.seed. A numeric failure raises
    TrainingAborted carrying the iteration index and the partial history.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != model.dim:
        raise ContractError(
            f"dataset shape {data.shape} does not match model dim {model.dim}"
        )
    batch_rng = SplitMix64(cfg.seed)
    state = AdamState.zeros(len(model.store))
    history = LossHistory()
    leaf_names = model.store.names()
    for iteration in range(cfg.iterations):
        try:
            idx = batch_rng.integers(cfg.batch, data.shape[0])
            params = model.store.leaf_nodes()
            loss = nll_batch(model, data[idx], cfg, params)
            leaves = [params[name] for name in leaf_names]
            grads = dc.reverse_grad(loss, leaves)
            flat = model.store.flatten(dict(zip(leaf_names, grads)))
            clipped = clip_by_global_norm(flat, cfg.clip_norm)
            adam_update(model.store, clipped, state, cfg.learning_rate)
            history.append(float(loss.value))
        except NumericError as err:
            raise TrainingAborted(iteration, err, history) from err
        if log_every and (iteration + 1) % log_every == 0:
            print(
                f"iteration {iteration + 1}/{cfg.iterations}  nll {history.values[-1]:.4f}",
                flush=True,
            )
    return model, history
