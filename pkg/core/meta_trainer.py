import logging
import math
from typing import Callable, Iterable, Optional, Sequence

import torch

from config import settings
from core.exceptions import ConfigurationError, DivergenceError, NumericOverflowError
from core.metastnet import MetaSTNet, WindowBatch, collate
from core.numerics import (
    CgResult,
    DiffFunction,
    Params,
    cg_solve,
    eval_with_grad,
    hvp,
    sgd_step,
)
from db.models import CgConfig, MetaConfig, MetaDataset, MetaState, ParameterSet
from utils.rng import derive_seed, make_rng

logger = logging.getLogger(__name__)

EpochCallback = Callable[[int, float], None]


# --- Bilevel primitives ---

def _check_finite(loss: float, grads: Params, step: int, limit: float):
    if not math.isfinite(loss) or loss > limit:
        raise DivergenceError(f"loss {loss:.6g} left the finite range", step=step)
    for key, grad in grads.items():
        if not torch.isfinite(grad).all():
            raise DivergenceError(f"gradient of {key!r} is not finite", step=step)


def inner_adapt(fn: DiffFunction, params: Params, batch, head_slots: Sequence[str],
                steps: int, lr: float, limit: float = settings.DIVERGENCE_LOSS_LIMIT) -> Params:
    """P gradient steps on the head slots only; every other slot is returned untouched."""
    if steps < 1:
        raise ConfigurationError(f"inner adaptation needs at least one step, got {steps}")
    head_slots = list(head_slots)
    current = dict(params)
    for step in range(steps):
        try:
            loss, grads = eval_with_grad(fn, current, batch, wrt=head_slots)
        except NumericOverflowError as e:
            raise DivergenceError(f"inner loss overflow: {e}", step=step) from e
        _check_finite(loss, grads, step, limit)
        current = sgd_step(current, grads, lr)
    return current


def hypergradient(outer: DiffFunction, inner: DiffFunction, params: Params,
                  body_slots: Sequence[str], head_slots: Sequence[str],
                  outer_batch, inner_batch, cg: CgConfig) -> tuple[float, Params, CgResult]:
    """
    Implicit hypergradient of the outer loss w.r.t. the body:

        grad_theta f - (d_theta d_omega g) v,   with (d2_omega g + damping) v = grad_omega f

    evaluated at the adapted heads in `params`. Returns (outer loss, gradient, CG result).
    """
    body_slots, head_slots = list(body_slots), list(head_slots)
    f_value, f_grads = eval_with_grad(outer, params, outer_batch, wrt=body_slots + head_slots)
    rhs = {k: f_grads[k] for k in head_slots}

    def apply_hessian(v: Params) -> Params:
        return hvp(inner, params, inner_batch, v, wrt=head_slots)

    solve = cg_solve(apply_hessian, rhs, cg)
    cross = hvp(inner, params, inner_batch, solve.x, wrt=head_slots, of=body_slots)
    grad = {k: f_grads[k] - cross[k] for k in body_slots}
    return f_value, grad, solve


# --- Multi-task losses ---

def head_key(task: int, name: str) -> str:
    return f"task{task}/{name}"


def composite_loss(model: MetaSTNet, n_tasks: int, seeds: Sequence[Optional[int]], name: str) -> DiffFunction:
    """
    Mean of per-task MSEs over one shared body and N renamed heads. The batch
    argument is a list of N WindowBatch objects in task order.
    """
    shapes = model.param_shapes()
    body, heads = model.body_names, model.head_names
    slots = {k: shapes[k] for k in body}
    for i in range(n_tasks):
        slots.update({head_key(i, h): shapes[h] for h in heads})

    def loss(params: Params, batches: list) -> torch.Tensor:
        total = torch.zeros((), dtype=torch.float64)
        for i, batch in enumerate(batches):
            task_params = {k: params[k] for k in body}
            task_params.update({h: params[head_key(i, h)] for h in heads})
            total = total + model.loss(task_params, batch, seeds[i])
        return total / len(batches)

    return DiffFunction(slots=slots, loss=loss, name=name)


def _task_batches(meta: MetaDataset) -> tuple[list[WindowBatch], list[WindowBatch]]:
    support, query = [], []
    for task in meta.tasks:
        if not task.support or not task.query:
            raise ConfigurationError(f"task {task.name!r} needs nonempty support and query sets")
        support.append(collate(task.support, task.adjacency))
        query_adjacency = task.adjacency if task.query_adjacency is None else task.query_adjacency
        query.append(collate(task.query, query_adjacency))
    return support, query


# --- Training loops ---

def meta_train(model: MetaSTNet, meta: MetaDataset, cfg: MetaConfig, seed: int,
               init: Optional[ParameterSet] = None,
               callbacks: Iterable[EpochCallback] = (),
               limit: float = settings.DIVERGENCE_LOSS_LIMIT) -> MetaState:
    """
    J epochs of: adapt every task head on its support set, estimate the
    hypergradient on the query sets, take one outer step on the body.
    The recorded loss for epoch j is the query loss before that epoch's outer step.
    """
    if len(meta) < 1:
        raise ConfigurationError("meta-training needs at least one auxiliary task")
    callbacks = list(callbacks)
    n_tasks = len(meta)
    support, query = _task_batches(meta)
    start = init.copy() if init is not None else model.init_params(make_rng(seed, 10))
    theta = dict(start.body)
    heads = [model.init_head(make_rng(seed, 11, i)) for i in range(n_tasks)]
    body_slots = model.body_names
    head_slots = [head_key(i, h) for i in range(n_tasks) for h in model.head_names]
    history = []

    logger.info(f"Meta-training {n_tasks} tasks for {cfg.epochs} epochs (P={cfg.inner_steps}, Q={cfg.cg_steps})")
    for epoch in range(cfg.epochs):
        if cfg.reinit_heads:
            heads = [model.init_head(make_rng(seed, 12, epoch, i)) for i in range(n_tasks)]
        inner = composite_loss(model, n_tasks, [derive_seed(seed, epoch, i, 0) for i in range(n_tasks)], "support")
        outer = composite_loss(model, n_tasks, [derive_seed(seed, epoch, i, 1) for i in range(n_tasks)], "query")

        params = dict(theta)
        for i, head in enumerate(heads):
            params.update({head_key(i, k): v for k, v in head.items()})

        try:
            adapted = inner_adapt(inner, params, support, head_slots, cfg.inner_steps, cfg.inner_lr, limit)
            query_loss, grad, solve = hypergradient(
                outer, inner, adapted, body_slots, head_slots, query, support, cfg.cg
            )
        except (DivergenceError, NumericOverflowError) as e:
            raise DivergenceError(f"meta-training diverged: {e}", step=epoch) from e
        _check_finite(query_loss, grad, epoch, limit)

        if cfg.outer_lr > 0:
            theta = sgd_step(theta, grad, cfg.outer_lr)
        heads = [{h: adapted[head_key(i, h)] for h in model.head_names} for i in range(n_tasks)]
        history.append(query_loss)
        if not solve.converged:
            logger.debug(f"Epoch {epoch}: CG stopped after {solve.iterations} iterations")
        for callback in callbacks:
            callback(epoch, query_loss)
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            logger.info(f"Epoch {epoch}: query loss {query_loss:.6g}")

    return MetaState(theta=theta, heads=heads, epoch=cfg.epochs, loss_history=history)


def mean_head(heads: Sequence[dict]) -> dict:
    """Target-task head initialisation: elementwise mean of the auxiliary heads."""
    if not heads:
        raise ConfigurationError("no auxiliary heads to average")
    return {k: torch.stack([h[k] for h in heads]).mean(dim=0) for k in heads[0]}


def meta_initialization(state: MetaState) -> ParameterSet:
    return ParameterSet(body=dict(state.theta), head=mean_head(state.heads))


def cold_start(model: MetaSTNet, seed: int) -> ParameterSet:
    return model.init_params(make_rng(seed, 13))


def finetune(model: MetaSTNet, params: ParameterSet, batch: WindowBatch, steps: int, lr: float,
             seed: int, losses: Optional[list] = None,
             limit: float = settings.DIVERGENCE_LOSS_LIMIT) -> ParameterSet:
    """Full-parameter gradient descent (body and head) on the target training window."""
    if len(batch) == 0:
        raise ConfigurationError("fine-tuning needs a nonempty training set")
    result = params.copy()
    current = result.merged()
    for step in range(steps):
        fn = model.diff_function(train_seed=derive_seed(seed, 14, step), name="finetune")
        try:
            loss, grads = eval_with_grad(fn, current, batch)
        except NumericOverflowError as e:
            raise DivergenceError(f"fine-tuning loss overflow: {e}", step=step) from e
        _check_finite(loss, grads, step, limit)
        current = sgd_step(current, grads, lr)
        if losses is not None:
            losses.append(loss)
    return result.with_params(current)
