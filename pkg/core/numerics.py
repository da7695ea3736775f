"""
Floating-point core shared by the model and the meta-trainer.

Parameters travel as plain ``dict[str, torch.Tensor]`` collections (float64,
CPU). A DiffFunction pairs named parameter slots with a loss rule; gradients and
Hessian-vector products come from torch.autograd, the linear solve from a
hand-written conjugate gradient that only needs an operator.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional

import numpy as np
import torch

from core.exceptions import ConfigurationError, NumericOverflowError
from db.models import CgConfig

logger = logging.getLogger(__name__)

DTYPE = torch.float64
Params = dict


def as_tensor(data, shape: Optional[tuple] = None) -> torch.Tensor:
    """Float64 tensor with finite entries; NaN/Inf are rejected."""
    tensor = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    if shape is not None and tuple(tensor.shape) != tuple(shape):
        raise ConfigurationError(f"expected shape {tuple(shape)}, got {tuple(tensor.shape)}")
    if not torch.isfinite(tensor).all():
        raise NumericOverflowError("tensor contains non-finite entries")
    return tensor


@dataclass
class DiffFunction:
    """
    slots: name -> shape of every parameter the loss reads.
    loss: (params, batch) -> scalar tensor; must be pure in its arguments.
    """
    slots: dict
    loss: Callable[[Params, Any], torch.Tensor]
    name: str = field(default="loss")

    def check(self, params: Params, names: Iterable[str] = ()):
        missing = set(self.slots) - set(params)
        if missing:
            raise ConfigurationError(f"{self.name}: missing parameter slots {sorted(missing)}")
        for key, shape in self.slots.items():
            if tuple(params[key].shape) != tuple(shape):
                raise ConfigurationError(
                    f"{self.name}: slot {key!r} expects {tuple(shape)}, got {tuple(params[key].shape)}"
                )
        unknown = set(names) - set(self.slots)
        if unknown:
            raise ConfigurationError(f"{self.name}: unknown slots {sorted(unknown)}")


# --- Collections ---

def tree_zeros_like(tree: Params) -> Params:
    return {k: torch.zeros_like(v) for k, v in tree.items()}


def tree_dot(a: Params, b: Params) -> float:
    # Fixed key order keeps the reduction reproducible.
    total = torch.zeros((), dtype=DTYPE)
    for key in a:
        total = total + (a[key] * b[key]).sum()
    return float(total)


def tree_axpy(alpha: float, x: Params, y: Params) -> Params:
    """alpha * x + y"""
    return {k: alpha * x[k] + y[k] for k in y}


def tree_norm(a: Params) -> float:
    return math.sqrt(max(tree_dot(a, a), 0.0))


def _check_mirror(reference: Params, other: Params, what: str):
    if set(reference) != set(other):
        raise ConfigurationError(f"{what}: keys {sorted(other)} do not mirror {sorted(reference)}")
    for key in reference:
        if reference[key].shape != other[key].shape:
            raise ConfigurationError(
                f"{what}: {key!r} has shape {tuple(other[key].shape)}, expected {tuple(reference[key].shape)}"
            )


def _leaves(params: Params, differentiable: set) -> Params:
    return {k: v.detach().clone().requires_grad_(k in differentiable) for k, v in params.items()}


def _finite_or_raise(loss: torch.Tensor, name: str):
    if loss.dim() != 0:
        raise ConfigurationError(f"{name}: loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise NumericOverflowError(f"{name}: non-finite loss {float(loss)}")


# --- Differentiation ---

def eval_with_grad(fn: DiffFunction, params: Params, batch, wrt: Optional[Iterable[str]] = None):
    """Returns (loss, grads) with grads keyed like `wrt` (default: every slot)."""
    wrt = list(fn.slots) if wrt is None else list(wrt)
    fn.check(params, wrt)
    leaves = _leaves(params, set(wrt))
    loss = fn.loss(leaves, batch)
    _finite_or_raise(loss, fn.name)
    grads = torch.autograd.grad(loss, [leaves[k] for k in wrt], allow_unused=True)
    out = {}
    for key, grad in zip(wrt, grads):
        out[key] = torch.zeros_like(params[key]) if grad is None else grad.detach()
    return float(loss.detach()), out


def hvp(fn: DiffFunction, params: Params, batch, v: Params,
        wrt: Optional[Iterable[str]] = None, of: Optional[Iterable[str]] = None) -> Params:
    """
    Second-order product  d/d(of) [ grad_wrt(loss) . v ].

    With of == wrt this is the Hessian-vector product; with of set to another
    slot group it is the mixed (cross) derivative applied to v.
    """
    wrt = list(v) if wrt is None else list(wrt)
    of = list(wrt) if of is None else list(of)
    fn.check(params, wrt + of)
    _check_mirror({k: params[k] for k in wrt}, v, f"{fn.name} hvp vector")

    leaves = _leaves(params, set(wrt) | set(of))
    loss = fn.loss(leaves, batch)
    _finite_or_raise(loss, fn.name)
    grads = torch.autograd.grad(loss, [leaves[k] for k in wrt], create_graph=True, allow_unused=True)

    inner = torch.zeros((), dtype=DTYPE)
    for key, grad in zip(wrt, grads):
        if grad is not None:
            inner = inner + (grad * v[key].detach()).sum()
    if not inner.requires_grad:
        return {k: torch.zeros_like(params[k]) for k in of}

    second = torch.autograd.grad(inner, [leaves[k] for k in of], allow_unused=True)
    out = {}
    for key, grad in zip(of, second):
        out[key] = torch.zeros_like(params[key]) if grad is None else grad.detach()
    return out


# --- Linear solve ---

@dataclass
class CgResult:
    x: Params
    iterations: int
    residual_norms: list      # residual of the best iterate after each step
    converged: bool


def cg_solve(apply_A: Callable[[Params], Params], b: Params, cfg: CgConfig) -> CgResult:
    """
    Conjugate gradient on (A + damping*I) x = b, starting from x = 0.

    Stops once the residual norm is <= residual_tol or after max_iters steps;
    the iterate with the smallest residual seen is returned.
    """
    for key, value in b.items():
        if not torch.isfinite(value).all():
            raise NumericOverflowError(f"CG right-hand side {key!r} is not finite")

    def operator(p: Params) -> Params:
        ap = apply_A(p)
        if cfg.damping:
            ap = tree_axpy(cfg.damping, p, ap)
        return ap

    x = tree_zeros_like(b)
    r = {k: v.detach().clone() for k, v in b.items()}
    p = {k: v.clone() for k, v in r.items()}
    rs = tree_dot(r, r)
    best_x, best_res = x, math.sqrt(rs)
    history = [best_res]
    if best_res <= cfg.residual_tol:
        return CgResult(x=best_x, iterations=0, residual_norms=history, converged=True)

    iterations = 0
    for _ in range(cfg.max_iters):
        ap = operator(p)
        curvature = tree_dot(p, ap)
        if not math.isfinite(curvature):
            raise NumericOverflowError("CG curvature is not finite")
        if curvature <= 0:
            logger.warning(f"CG stopped on non-positive curvature {curvature:.3e}")
            break
        step = rs / curvature
        x = tree_axpy(step, p, x)
        r = tree_axpy(-step, ap, r)
        rs_new = tree_dot(r, r)
        iterations += 1
        if not math.isfinite(rs_new):
            raise NumericOverflowError(f"CG residual diverged at iteration {iterations}")
        res = math.sqrt(rs_new)
        if res < best_res:
            best_x, best_res = x, res
        history.append(best_res)
        if res <= cfg.residual_tol:
            break
        p = tree_axpy(rs_new / rs, p, r)
        rs = rs_new

    return CgResult(x=best_x, iterations=iterations, residual_norms=history,
                    converged=best_res <= cfg.residual_tol)


# --- Optimisers ---

def sgd_step(params: Params, grads: Params, lr: float) -> Params:
    """params - lr * grads; keys absent from `grads` are carried over untouched."""
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    _check_mirror({k: params[k] for k in grads if k in params}, grads, "sgd_step")
    return {k: (v - lr * grads[k]).detach() if k in grads else v for k, v in params.items()}


# --- Finite differences ---

def finite_difference_grad(fn: DiffFunction, params: Params, batch, key: str,
                           h: float = 1e-5, indices: Optional[Iterable[int]] = None) -> torch.Tensor:
    """Central differences of the loss w.r.t. (a subset of) the entries of one slot."""
    base = params[key].detach().clone()
    flat_grad = torch.zeros(base.numel(), dtype=DTYPE)
    idx = range(base.numel()) if indices is None else indices
    with torch.no_grad():
        for i in idx:
            shifted = dict(params)
            plus = base.clone().reshape(-1)
            plus[i] += h
            shifted[key] = plus.reshape(base.shape)
            f_plus = float(fn.loss(shifted, batch))
            minus = base.clone().reshape(-1)
            minus[i] -= h
            shifted[key] = minus.reshape(base.shape)
            f_minus = float(fn.loss(shifted, batch))
            flat_grad[i] = (f_plus - f_minus) / (2 * h)
    return flat_grad.reshape(base.shape)


def finite_difference_directional(fn: DiffFunction, params: Params, batch,
                                  direction: Params, h: float = 1e-5) -> float:
    """(f(p + h*u) - f(p - h*u)) / 2h for a direction u over any subset of slots."""
    with torch.no_grad():
        plus = {k: (v + h * direction[k]) if k in direction else v for k, v in params.items()}
        minus = {k: (v - h * direction[k]) if k in direction else v for k, v in params.items()}
        return (float(fn.loss(plus, batch)) - float(fn.loss(minus, batch))) / (2 * h)


def finite_difference_hvp(fn: DiffFunction, params: Params, batch, v: Params,
                          of: Optional[Iterable[str]] = None, h: float = 1e-5) -> Params:
    """(grad(p + h*v) - grad(p - h*v)) / 2h, gradients taken w.r.t. `of` (default: keys of v)."""
    of = list(v) if of is None else list(of)
    plus = {k: (p + h * v[k]) if k in v else p for k, p in params.items()}
    minus = {k: (p - h * v[k]) if k in v else p for k, p in params.items()}
    _, g_plus = eval_with_grad(fn, plus, batch, wrt=of)
    _, g_minus = eval_with_grad(fn, minus, batch, wrt=of)
    return {k: (g_plus[k] - g_minus[k]) / (2 * h) for k in of}


def relative_error(actual, expected, floor: float = 1e-12) -> float:
    a = torch.as_tensor(actual, dtype=DTYPE)
    e = torch.as_tensor(expected, dtype=DTYPE)
    return float(torch.linalg.norm((a - e).reshape(-1)) / max(float(torch.linalg.norm(e.reshape(-1))), floor))
