"""Bi-level optimization: per-task inner adaptation on the combined
dual-branch objective, outer update on the primary query loss only.

Second-order mode differentiates through the inner gradient steps exactly
(the whole inner loop lives on one tape, built with create_graph).  First
order adapts with detached gradients and evaluates the query gradient at
the adapted point.  The engine is generic over "loss closures", so the
same machinery drives both the video model and the tiny analytic models
used as oracles in the tests.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .episodes import EpisodeTask, Pool, episode_arrays, sample_episode
from .graph import ComputationGraph, Tensor, backward
from .losses import (KernelConfig, LossWeights, cross_entropy, inner_objective,
                     mmd2_biased, cross_kernel_mean)
from .model import ModelConfig, ParamSet, apply_update, forward, init_params

ORDERS = ("second", "first")

# seed-derivation tags for independent episode streams
TAG_TRAIN_EPISODE = 101
TAG_EVAL_EPISODE = 102


def derive_seed(*keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(tuple(int(k) for k in keys))


@dataclass(frozen=True)
class EpisodeShape:
    way: int = 5
    shots: int = 5
    queries: int = 2
    aux_per_class: int = 5

    def validate(self) -> None:
        if min(self.way, self.shots, self.queries, self.aux_per_class) < 1:
            raise ConfigError(f"episode shape fields must be positive, got {self}")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.2
    beta: float = 0.01  # see notes: 0.1 collapses the net within ~10 Adam steps at this scale
    weights: LossWeights = field(default_factory=LossWeights)
    inner_steps: int = 1
    order: str = "second"
    meta_batch: int = 2
    outer_steps: int = 350
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    kernel: KernelConfig = field(default_factory=KernelConfig)
    aux_loss: str = "mmd"
    aux_in_outer: bool = False
    task_pool_size: int | None = None  # None: stream fresh episodes every step
    eval_adapt_steps: int = 3
    seed: int = 0

    def validate(self) -> None:
        if not (self.alpha > 0 and self.beta > 0):
            raise ConfigError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")
        if self.inner_steps < 1:
            raise ConfigError(f"inner_steps must be >= 1, got {self.inner_steps}")
        if self.order not in ORDERS:
            raise ConfigError(f"order must be one of {ORDERS}, got {self.order!r}")
        if self.meta_batch < 1 or self.outer_steps < 0:
            raise ConfigError("meta_batch must be >= 1 and outer_steps >= 0")
        if self.task_pool_size is not None and self.task_pool_size < 1:
            raise ConfigError("task_pool_size must be positive when set")
        self.weights.validate()
        self.kernel.validate()


@dataclass
class AdaptedParams:
    params: Mapping[str, Tensor]
    task_id: int
    steps: int
    differentiable: bool
    graph: ComputationGraph | None = None
    base: Mapping[str, Tensor] | None = None


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam_state(params: Mapping[str, Tensor]) -> AdamState:
    return AdamState(m={n: np.zeros(params[n].shape) for n in params},
                     v={n: np.zeros(params[n].shape) for n in params})


# ---------------------------------------------------------------------------
# generic closure-based engine

LossFn = Callable[[Mapping[str, Tensor]], Tensor]


def adapt_on_loss(params: Mapping[str, Tensor], loss_fn: LossFn, alpha: float,
                  steps: int, differentiable: bool,
                  graph: ComputationGraph | None = None) -> AdaptedParams:
    """Run ``steps`` full-batch gradient descent steps on ``loss_fn``.

    Differentiable mode keeps everything on one tape so an outer backward
    flows through the updates; otherwise every step detaches.
    """
    if steps < 1:
        raise ConfigError(f"adaptation needs at least 1 step, got {steps}")

    def grad_or_zero(gm, t: Tensor) -> Tensor:
        # A parameter the loss never touched (e.g. the unused head when one
        # branch weight is zero) gets an exact zero gradient.
        g = gm.get(t)
        return g if g is not None else Tensor(np.zeros(t.shape))

    if differentiable:
        g = graph or ComputationGraph()
        base = {n: g.watch(params[n]) for n in params}
        current: Mapping[str, Tensor] = base
        for _ in range(steps):
            loss = loss_fn(current)
            gm = backward(g, loss, create_graph=True)
            grads = {n: grad_or_zero(gm, current[n]) for n in current}
            current = apply_update(current, grads, alpha, differentiable=True)
        return AdaptedParams(params=current, task_id=-1, steps=steps,
                             differentiable=True, graph=g, base=base)

    current = {n: params[n].detach() for n in params}
    for _ in range(steps):
        g = ComputationGraph()
        watched = {n: g.watch(current[n]) for n in current}
        loss = loss_fn(watched)
        gm = backward(g, loss, create_graph=False)
        grads = {n: gm.grad(watched[n]) for n in watched}
        current = apply_update(current, grads, alpha, differentiable=False)
        g.release()
    return AdaptedParams(params=current, task_id=-1, steps=steps, differentiable=False)


def task_meta_gradient(params: Mapping[str, Tensor], support_loss: LossFn,
                       query_loss: LossFn, alpha: float, steps: int,
                       order: str) -> tuple[dict[str, np.ndarray], float]:
    """Meta-gradient of one task's query loss w.r.t. the base parameters.

    second: differentiate through the unrolled inner updates.
    first:  adapt with detached gradients, then take the query gradient at
            the adapted point as if it were the base gradient.
    """
    if order == "second":
        adapted = adapt_on_loss(params, support_loss, alpha, steps, differentiable=True)
        qloss = query_loss(adapted.params)
        gm = backward(adapted.graph, qloss, create_graph=False)
        grads = {n: gm.grad(adapted.base[n]).data for n in adapted.base}
        return grads, qloss.item()
    if order == "first":
        adapted = adapt_on_loss(params, support_loss, alpha, steps, differentiable=False)
        g = ComputationGraph()
        watched = {n: g.watch(adapted.params[n]) for n in adapted.params}
        qloss = query_loss(watched)
        gm = backward(g, qloss, create_graph=False)
        return {n: gm.grad(watched[n]).data for n in watched}, qloss.item()
    raise ConfigError(f"order must be one of {ORDERS}, got {order!r}")


# ---------------------------------------------------------------------------
# episode-level operations

def _support_loss_fn(cfg: TrainConfig, model_cfg: ModelConfig,
                     sx: np.ndarray, sy: np.ndarray, ax: np.ndarray) -> LossFn:
    def fn(p: Mapping[str, Tensor]) -> Tensor:
        return inner_objective(p, sx, sy, ax, cfg.weights, cfg.kernel, model_cfg,
                               aux_loss=cfg.aux_loss)
    return fn


def _query_outer_loss(p: Mapping[str, Tensor], cfg: TrainConfig, model_cfg: ModelConfig,
                      qx: np.ndarray, qy: np.ndarray, ax: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Outer objective on the query set; returns (loss, query logits).

    The default outer objective is the primary loss alone; aux_in_outer is
    an ablation flag that adds the alignment term on query embeddings.
    """
    out = forward(p, qx, model_cfg)
    loss = cross_entropy(out.logits, qy)
    if cfg.aux_in_outer and cfg.weights.lambda2 != 0.0:
        aux_out = forward(p, ax, model_cfg)
        fn = mmd2_biased if cfg.aux_loss == "mmd" else cross_kernel_mean
        aux_term = fn(out.aux_embedding, aux_out.aux_embedding, cfg.kernel)
        loss = loss + cfg.weights.lambda2 * aux_term
    return loss, out.logits.data


def inner_adapt(params: Mapping[str, Tensor], task: EpisodeTask, cfg: TrainConfig,
                model_cfg: ModelConfig) -> AdaptedParams:
    """Task-specific adaptation on the combined dual-branch objective
    (plain gradient descent at rate alpha; the outer optimizer is Adam)."""
    cfg.validate()
    sx, sy, _, _, ax = episode_arrays(task)
    loss_fn = _support_loss_fn(cfg, model_cfg, sx, sy, ax)
    adapted = adapt_on_loss(params, loss_fn, cfg.alpha, cfg.inner_steps,
                            differentiable=(cfg.order == "second"))
    adapted.task_id = task.task_id
    return adapted


def test_adapt(params: Mapping[str, Tensor], task: EpisodeTask, cfg: TrainConfig,
               model_cfg: ModelConfig, steps: int = 1) -> AdaptedParams:
    """Adaptation for evaluation: values only, no outer graph."""
    if steps < 1:
        raise ConfigError(f"test_adapt needs steps >= 1, got {steps}")
    sx, sy, _, _, ax = episode_arrays(task)
    loss_fn = _support_loss_fn(cfg, model_cfg, sx, sy, ax)
    adapted = adapt_on_loss(params, loss_fn, cfg.alpha, steps, differentiable=False)
    adapted.task_id = task.task_id
    return adapted


@dataclass
class TaskResult:
    grads: dict[str, np.ndarray]
    query_loss: float
    query_acc: float


def _run_task(params: Mapping[str, Tensor], task: EpisodeTask, cfg: TrainConfig,
              model_cfg: ModelConfig) -> TaskResult:
    sx, sy, qx, qy, ax = episode_arrays(task)
    support_loss = _support_loss_fn(cfg, model_cfg, sx, sy, ax)

    if cfg.order == "second":
        adapted = adapt_on_loss(params, support_loss, cfg.alpha, cfg.inner_steps,
                                differentiable=True)
        qloss, logits = _query_outer_loss(adapted.params, cfg, model_cfg, qx, qy, ax)
        gm = backward(adapted.graph, qloss, create_graph=False)
        grads = {n: gm.grad(adapted.base[n]).data.copy() for n in adapted.base}
        qloss_value = qloss.item()
        adapted.graph.release()
    else:
        adapted = adapt_on_loss(params, support_loss, cfg.alpha, cfg.inner_steps,
                                differentiable=False)
        g = ComputationGraph()
        watched = {n: g.watch(adapted.params[n]) for n in adapted.params}
        qloss, logits = _query_outer_loss(watched, cfg, model_cfg, qx, qy, ax)
        gm = backward(g, qloss, create_graph=False)
        grads = {n: gm.grad(watched[n]).data.copy() for n in watched}
        qloss_value = qloss.item()
        g.release()

    acc = float((logits.argmax(axis=1) == qy).mean())
    return TaskResult(grads=grads, query_loss=qloss_value, query_acc=acc)


def meta_gradient(params: Mapping[str, Tensor], tasks: Sequence[EpisodeTask],
                  cfg: TrainConfig, model_cfg: ModelConfig,
                  threads: int = 1) -> tuple[dict[str, np.ndarray], list[TaskResult]]:
    """Mean over tasks of the per-task meta-gradient, accumulated in
    ascending task order so results do not depend on scheduling."""
    if not tasks:
        raise ConfigError("meta_gradient needs at least one task")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda t: _run_task(params, t, cfg, model_cfg), tasks))
    else:
        results = [_run_task(params, t, cfg, model_cfg) for t in tasks]

    acc: dict[str, np.ndarray] = {n: np.zeros(params[n].shape) for n in params}
    for r in results:
        for n in acc:
            acc[n] += r.grads[n]
    scale = 1.0 / len(results)
    for n in acc:
        acc[n] *= scale
    return acc, results


@dataclass
class StepMetrics:
    mean_query_loss: float
    mean_query_acc: float


def adam_update(params: ParamSet, grads: Mapping[str, np.ndarray], cfg: TrainConfig,
                state: AdamState) -> tuple[ParamSet, AdamState]:
    """Adam with bias correction and decoupled weight decay."""
    t = state.step + 1
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_m, new_v, updates = {}, {}, {}
    for n in params:
        g = np.asarray(grads[n])
        m = b1 * state.m[n] + (1.0 - b1) * g
        v = b2 * state.v[n] + (1.0 - b2) * g * g
        step_dir = (m / c1) / (np.sqrt(v / c2) + eps)
        p = params[n].data
        updates[n] = Tensor(p - cfg.beta * step_dir - cfg.beta * cfg.weight_decay * p)
        new_m[n], new_v[n] = m, v
    return params.replace(updates), AdamState(m=new_m, v=new_v, step=t)


def outer_step(params: ParamSet, tasks: Sequence[EpisodeTask], cfg: TrainConfig,
               model_cfg: ModelConfig, state: AdamState,
               threads: int = 1) -> tuple[ParamSet, AdamState, StepMetrics]:
    grads, results = meta_gradient(params, tasks, cfg, model_cfg, threads=threads)
    metrics = StepMetrics(
        mean_query_loss=float(np.mean([r.query_loss for r in results])),
        mean_query_acc=float(np.mean([r.query_acc for r in results])),
    )
    new_params, new_state = adam_update(params, grads, cfg, state)
    return new_params, new_state, metrics


def sample_train_tasks(pool: Pool, shape: EpisodeShape, cfg: TrainConfig,
                       step: int) -> list[EpisodeTask]:
    tasks = []
    for i in range(cfg.meta_batch):
        if cfg.task_pool_size is not None:
            idx = (step * cfg.meta_batch + i) % cfg.task_pool_size
            seed = derive_seed(cfg.seed, TAG_TRAIN_EPISODE, idx).generate_state(1)[0]
        else:
            seed = derive_seed(cfg.seed, TAG_TRAIN_EPISODE, step, i).generate_state(1)[0]
        tasks.append(sample_episode(pool, shape.way, shape.shots, shape.queries,
                                    shape.aux_per_class, int(seed)))
    return tasks


def meta_train(pool: Pool, cfg: TrainConfig, model_cfg: ModelConfig,
               shape: EpisodeShape, threads: int = 1,
               log_every: int = 0) -> tuple[ParamSet, list[dict]]:
    """Full training loop; deterministic given cfg.seed in single-threaded
    mode (multi-threaded runs reduce in task order, preserving values)."""
    cfg.validate()
    shape.validate()
    model_cfg.validate()
    params = init_params(model_cfg, cfg.seed)
    state = init_adam_state(params)
    history: list[dict] = []
    for step in range(cfg.outer_steps):
        t0 = time.perf_counter()
        tasks = sample_train_tasks(pool, shape, cfg, step)
        params, state, metrics = outer_step(params, tasks, cfg, model_cfg, state,
                                            threads=threads)
        record = {
            "step": step,
            "mean_query_loss": metrics.mean_query_loss,
            "mean_query_acc": metrics.mean_query_acc,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        }
        history.append(record)
        if log_every and (step + 1) % log_every == 0:
            print(f"step {step + 1}/{cfg.outer_steps} "
                  f"loss={metrics.mean_query_loss:.4f} acc={metrics.mean_query_acc:.3f}")
    return params, history
