"""The moving-window (MoW) optimiser.

Each step reads ``k`` fresh examples, pairs their live latents with the
``n - k`` frozen latents of previously read examples, takes one gradient step
and slides the window: the ``k`` new examples are encoded under the updated
parameters and the ``k`` oldest codes are evicted. Only latents are kept,
never inputs.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autoencoder import BatchCost, CostConfig, NetSpec, batch_cost, encode, init_params, recon_errors
from .data import DataQueue, Dataset, philox
from .metrics import MetricsLog, MetricsRow

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """A step produced a non-finite cost or gradient; carries the offending state."""

    def __init__(self, message: str, state: MowState):
        super().__init__(message)
        self.state = state


@dataclass(frozen=True)
class MowConfig:
    n: int = 64
    k: int = 1
    eta: float = 1e-3
    cost: CostConfig = field(default_factory=CostConfig)
    update_rule: Literal["sgd", "adam"] = "sgd"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    steps: int = 1000
    seed: int = 0
    eval_interval: int = 100

    def __post_init__(self):
        if self.n < 1 or not 1 <= self.k <= self.n:
            raise ValueError(f"need 1 <= k <= n, got n={self.n}, k={self.k}")
        if self.eta < 0:
            raise ValueError("learning rate must be non-negative")
        if self.update_rule not in ("sgd", "adam"):
            raise ValueError(f"unknown update rule {self.update_rule!r}")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.steps < 0 or self.eval_interval < 1:
            raise ValueError("steps must be >= 0 and eval_interval >= 1")


@dataclass
class LatentBuffer:
    """Frozen latent codes, oldest first, with (source index, generation) tags."""

    vectors: np.ndarray
    sources: np.ndarray
    generations: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> LatentBuffer:
        return cls(np.zeros((0, dim)), np.zeros(0, np.int64), np.zeros(0, np.int64))

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def slide(self, codes: np.ndarray, sources: np.ndarray, generation: int) -> LatentBuffer:
        """Append the new codes and evict the oldest so the length is unchanged."""
        size = len(self)
        if size == 0:
            return self
        gens = np.full(len(sources), generation, np.int64)
        return LatentBuffer(
            np.concatenate([self.vectors, codes])[-size:],
            np.concatenate([self.sources, sources])[-size:],
            np.concatenate([self.generations, gens])[-size:],
        )


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class MowState:
    theta: ad.ParamVector
    buffer: LatentBuffer
    l: int
    rng: np.random.Generator
    moments: AdamMoments | None = None

    def examples_consumed(self, cfg: MowConfig) -> int:
        return cfg.n - cfg.k + self.l * cfg.k


@dataclass
class StepRecord:
    step: int
    live_rec_error: float
    distance_value: float
    train_cost: float


def sgd_update(theta: np.ndarray, grad: np.ndarray, eta: float) -> np.ndarray:
    return theta - eta * grad


def adam_update(theta: np.ndarray, grad: np.ndarray, moments: AdamMoments, eta: float,
                betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8
                ) -> tuple[np.ndarray, AdamMoments]:
    b1, b2 = betas
    t = moments.t + 1
    m = b1 * moments.m + (1.0 - b1) * grad
    v = b2 * moments.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    return theta - eta * m_hat / (np.sqrt(v_hat) + eps), AdamMoments(m, v, t)


def mow_init(theta0: ad.ParamVector, queue: DataQueue, cfg: MowConfig, spec: NetSpec,
             rng: np.random.Generator | None = None) -> MowState:
    """Fill the window with ``n - k`` codes of fresh examples under ``theta0``."""
    rng = philox(cfg.seed, 2) if rng is None else rng
    size = cfg.n - cfg.k
    if size:
        x, idx = queue.next(size)
        buffer = LatentBuffer(encode(theta0, spec, x), idx, np.zeros(size, np.int64))
    else:
        buffer = LatentBuffer.empty(spec.latent_dim)
    moments = None
    if cfg.update_rule == "adam":
        moments = AdamMoments(np.zeros(len(theta0)), np.zeros(len(theta0)))
    return MowState(theta0.copy(), buffer, 0, rng, moments)


def mow_step(state: MowState, queue: DataQueue, cfg: MowConfig, spec: NetSpec
             ) -> tuple[MowState, StepRecord]:
    x, idx = queue.next(cfg.k)
    prior, dirs = cfg.cost.distance.draw(state.rng, cfg.n, spec.latent_dim)
    try:
        res: BatchCost = batch_cost(state.theta, spec, cfg.cost, x, state.buffer.vectors, prior, dirs)
    except ad.NonFiniteError as exc:
        raise NumericalError(f"step {state.l + 1}: {exc}", state) from exc
    if not np.all(np.isfinite(res.grad)):
        raise NumericalError(f"non-finite gradient at step {state.l + 1}", state)

    moments = state.moments
    if cfg.update_rule == "adam":
        values, moments = adam_update(state.theta.values, res.grad, moments, cfg.eta, cfg.betas, cfg.adam_eps)
    else:
        values = sgd_update(state.theta.values, res.grad, cfg.eta)
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite parameters after step {state.l + 1}", state)
    theta = state.theta.with_values(values)

    buffer = state.buffer
    if len(buffer):
        try:
            codes = encode(theta, spec, x)
        except ad.NonFiniteError as exc:
            raise NumericalError(f"step {state.l + 1}: {exc}", state) from exc
        buffer = buffer.slide(codes, idx, state.l + 1)
    new = MowState(theta, buffer, state.l + 1, state.rng, moments)
    return new, StepRecord(new.l, res.recon, res.distance, res.value)


def evaluate_model(theta: ad.ParamVector, spec: NetSpec, cost: CostConfig, test: Dataset,
                   seed: int, step: int) -> tuple[float, float]:
    """Mean test reconstruction error and distance of encoded test set vs a fresh prior draw.

    The MMD used here keeps the diagonal so the value stays positive and its
    logarithm is defined for model selection.
    """
    x = test.examples
    rec = float(np.mean(recon_errors(theta, spec, x)))
    z = encode(theta, spec, x)
    prior, dirs = cost.distance.draw(philox(seed, 3, step), x.shape[0], spec.latent_dim)
    dist = float(cost.distance(z, prior, dirs, unbiased=False))
    return rec, dist


@dataclass
class TrainingResult:
    log: MetricsLog
    state: MowState
    queue: DataQueue
    history: list[StepRecord]


def run_training(cfg: MowConfig, spec: NetSpec, dataset: Dataset, test: Dataset | None = None,
                 *, state: MowState | None = None, queue: DataQueue | None = None,
                 theta0: ad.ParamVector | None = None) -> TrainingResult:
    """Initialise (unless resuming from ``state``/``queue``) and run up to ``cfg.steps`` steps.

    Metric rows are written at every multiple of ``eval_interval`` and at the
    final step.
    """
    test = dataset if test is None else test
    if state is None:
        queue = DataQueue(dataset, cfg.seed)
        if theta0 is None:
            theta0 = init_params(spec, philox(cfg.seed, 0))
        state = mow_init(theta0, queue, cfg, spec)
    elif queue is None:
        raise ValueError("resuming needs the queue saved with the state")

    metrics = MetricsLog()
    history = []
    start = time.perf_counter()
    while state.l < cfg.steps:
        state, rec = mow_step(state, queue, cfg, spec)
        history.append(rec)
        if state.l % cfg.eval_interval == 0 or state.l == cfg.steps:
            test_rec, test_dist = evaluate_model(state.theta, spec, cfg.cost, test, cfg.seed, state.l)
            metrics.rows.append(MetricsRow(
                step=state.l,
                examples_seen=queue.draws_served,
                live_rec_error=rec.live_rec_error,
                distance_value=rec.distance_value,
                train_cost=rec.train_cost,
                test_rec_error=test_rec,
                test_distance=test_dist,
                selection_metric=cfg.cost.selection(test_rec, test_dist),
                wall_ms=(time.perf_counter() - start) * 1e3,
            ))
            log.debug("step %d rec %.5g dist %.5g", state.l, test_rec, test_dist)
    return TrainingResult(metrics, state, queue, history)


def with_k(cfg: MowConfig, k: int, eta: float | None = None, seed: int | None = None) -> MowConfig:
    return replace(cfg, k=k, eta=cfg.eta if eta is None else eta, seed=cfg.seed if seed is None else seed)
