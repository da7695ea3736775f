import numpy as np
import pytest
import torch

from core.exceptions import ConfigurationError, DivergenceError
from core.meta_trainer import (
    cold_start,
    composite_loss,
    finetune,
    head_key,
    hypergradient,
    inner_adapt,
    mean_head,
    meta_initialization,
    meta_train,
)
from core.metastnet import MetaSTNet, collate
from core.numerics import DTYPE, DiffFunction, relative_error
from db.models import CgConfig, MetaConfig, MetaDataset, ModelConfig, MultimodalWindow, TaskDataset
from utils.rng import make_rng

ADJ = np.array([[0.0, 0.4], [0.4, 0.0]])


def _windows(n, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    image = rng.uniform(size=(3, 3, 1))
    out = []
    for i in range(n):
        x_close = rng.uniform(size=(2, 2)) * scale
        out.append(MultimodalWindow(
            x_close=x_close,
            txt_close=rng.integers(0, 2, size=(2, 3)).astype(float),
            x_period=rng.uniform(size=(1, 2)) * scale,
            txt_period=rng.integers(0, 2, size=(1, 3)).astype(float),
            image=image,
            y=x_close[-1] * 0.8 + 0.1,
            horizon=1,
            target_index=i,
            anchor_index=i - 1,
        ))
    return out


def _task(name, seed, scale=1.0):
    windows = _windows(12, seed, scale)
    return TaskDataset(name=name, support=windows[:8], query=windows[8:], adjacency=ADJ)


@pytest.fixture
def model():
    return MetaSTNet(ModelConfig(n_cells=2, n_exog=3, image_shape=(3, 3, 1), hidden=4, heads=2, blocks=1,
                                 dropout=0.1, cnn_channels=2, closeness=2, period=1))


@pytest.fixture
def meta():
    return MetaDataset(tasks=[_task("a", 1), _task("b", 2, scale=1.5), _task("c", 3, scale=0.7)])


@pytest.fixture
def meta_cfg():
    return MetaConfig(inner_steps=2, inner_lr=0.05, cg_steps=3, outer_lr=0.01, epochs=3,
                      finetune_steps=5, finetune_lr=0.01)


# --- Bilevel oracles ---

def _scalar_bilevel():
    inner = DiffFunction(slots={"theta": (1,), "omega": (1,)},
                         loss=lambda p, _: 0.5 * ((p["omega"] - p["theta"]) ** 2).sum(), name="g")
    outer = DiffFunction(slots={"theta": (1,), "omega": (1,)},
                         loss=lambda p, _: 0.5 * (p["omega"] ** 2).sum(), name="f")
    return inner, outer


def test_inner_adapt_quadratic_unit_step():
    c = torch.tensor([2.5, -1.0], dtype=DTYPE)
    fn = DiffFunction(slots={"w": (2,), "body": (1,)}, loss=lambda p, _: 0.5 * ((p["w"] - c) ** 2).sum())
    params = {"w": torch.zeros(2, dtype=DTYPE), "body": torch.ones(1, dtype=DTYPE)}
    out = inner_adapt(fn, params, None, ["w"], steps=1, lr=1.0)
    assert torch.equal(out["w"], c)
    assert out["body"] is params["body"]


@pytest.mark.parametrize("seed", range(5))
def test_inner_adapt_reaches_least_squares_head(seed):
    rng = make_rng(seed)
    n, d = 40, 3
    basis, _ = np.linalg.qr(rng.normal(size=(n, d)))
    x = basis * np.sqrt(n * rng.uniform(4.0, 8.0, size=d))    # x^T x / n has eigenvalues in [4, 8]
    y = rng.normal(size=n)
    xt, yt = torch.as_tensor(x, dtype=DTYPE), torch.as_tensor(y, dtype=DTYPE)
    fn = DiffFunction(slots={"w": (d,), "body": (1,)},
                      loss=lambda p, _: 0.5 * ((xt @ p["w"] + p["body"] - yt) ** 2).mean())
    params = {"w": torch.zeros(d, dtype=DTYPE), "body": torch.zeros(1, dtype=DTYPE)}

    adapted = inner_adapt(fn, params, None, ["w"], steps=50, lr=0.1)
    solution, *_ = np.linalg.lstsq(x, y, rcond=None)
    np.testing.assert_allclose(adapted["w"].numpy(), solution, atol=1e-3)
    assert adapted["body"] is params["body"]


def test_inner_adapt_needs_a_step():
    inner, _ = _scalar_bilevel()
    with pytest.raises(ConfigurationError):
        inner_adapt(inner, {"theta": torch.ones(1, dtype=DTYPE), "omega": torch.ones(1, dtype=DTYPE)},
                    None, ["omega"], steps=0, lr=0.1)


def test_inner_adapt_flags_divergence():
    inner, _ = _scalar_bilevel()
    params = {"theta": torch.zeros(1, dtype=DTYPE), "omega": torch.full((1,), 10.0, dtype=DTYPE)}
    with pytest.raises(DivergenceError):
        inner_adapt(inner, params, None, ["omega"], steps=3, lr=0.1, limit=1.0)


def test_hypergradient_scalar_case_equals_theta():
    inner, outer = _scalar_bilevel()
    theta = torch.tensor([1.7], dtype=DTYPE)
    params = {"theta": theta, "omega": theta.clone()}
    value, grad, solve = hypergradient(outer, inner, params, ["theta"], ["omega"], None, None,
                                       CgConfig(max_iters=1, residual_tol=0.0, damping=0.0))
    assert value == pytest.approx(0.5 * 1.7 ** 2)
    assert float(grad["theta"][0]) == pytest.approx(1.7, rel=1e-12)
    assert solve.iterations == 1


def _quadratic_bilevel(seed):
    """Random quadratic bilevel problem (dim <= 10) and its analytic hypergradient."""
    rng = make_rng(seed)
    n_theta, n_omega = (int(n) for n in rng.integers(2, 11, size=2))
    m = rng.normal(size=(n_omega, n_omega))
    a = torch.as_tensor(m @ m.T + n_omega * np.eye(n_omega), dtype=DTYPE)
    b = torch.as_tensor(rng.normal(size=(n_omega, n_theta)), dtype=DTYPE)
    c = torch.as_tensor(rng.normal(size=n_omega), dtype=DTYPE)
    theta = torch.as_tensor(rng.normal(size=n_theta), dtype=DTYPE)

    slots = {"theta": (n_theta,), "omega": (n_omega,)}
    inner = DiffFunction(slots, lambda p, _: 0.5 * p["omega"] @ a @ p["omega"] - p["omega"] @ b @ p["theta"])
    outer = DiffFunction(slots, lambda p, _: 0.5 * ((p["omega"] - c) ** 2).sum() + 0.5 * (p["theta"] ** 2).sum())

    omega_star = torch.linalg.solve(a, b @ theta)
    expected = theta + b.T @ torch.linalg.solve(a, omega_star - c)
    return inner, outer, {"theta": theta, "omega": omega_star}, expected, n_omega


@pytest.mark.parametrize("seed", range(100))
def test_hypergradient_matches_implicit_function_oracle(seed):
    inner, outer, params, expected, dim = _quadratic_bilevel(seed)
    _, grad, solve = hypergradient(outer, inner, params, ["theta"], ["omega"], None, None,
                                   CgConfig(max_iters=dim, residual_tol=0.0, damping=0.0))
    assert solve.iterations <= dim
    assert relative_error(grad["theta"], expected) < 1e-6


@pytest.mark.parametrize("seed", range(100))
def test_damped_hypergradient_stays_close_to_oracle(seed):
    inner, outer, params, expected, _ = _quadratic_bilevel(seed)
    _, grad, solve = hypergradient(outer, inner, params, ["theta"], ["omega"], None, None,
                                   CgConfig(max_iters=10, residual_tol=0.0, damping=1e-4))
    assert solve.iterations <= 10
    assert relative_error(grad["theta"], expected) < 1e-3


def test_hypergradient_with_identical_losses_reduces_to_gradient():
    # At the inner optimum grad_omega f = 0, so the cross term vanishes.
    slots = {"theta": (2,), "omega": (2,)}
    g = DiffFunction(slots, lambda p, _: 0.5 * ((p["omega"] - 2 * p["theta"]) ** 2).sum() + (p["theta"] ** 2).sum())
    theta = torch.tensor([0.3, -1.2], dtype=DTYPE)
    _, grad, _ = hypergradient(g, g, {"theta": theta, "omega": 2 * theta}, ["theta"], ["omega"], None, None,
                               CgConfig(max_iters=2, residual_tol=0.0, damping=0.0))
    assert torch.allclose(grad["theta"], 2 * theta, atol=1e-8)


# --- Multi-task loss ---

def test_composite_loss_is_mean_of_task_losses(model, meta):
    params = model.init_params(np.random.default_rng(0))
    merged = dict(params.body)
    for i in range(len(meta)):
        merged.update({head_key(i, k): v for k, v in params.head.items()})
    batches = [collate(t.support, t.adjacency) for t in meta.tasks]
    fn = composite_loss(model, len(meta), [None] * len(meta), "support")
    expected = np.mean([float(model.loss(params.merged(), b)) for b in batches])
    assert float(fn.loss(merged, batches)) == pytest.approx(expected, rel=1e-12)
    assert set(fn.slots) == set(merged)


def test_mean_head():
    heads = [{"w": torch.tensor([1.0, 3.0], dtype=DTYPE)}, {"w": torch.tensor([3.0, 5.0], dtype=DTYPE)}]
    assert torch.equal(mean_head(heads)["w"], torch.tensor([2.0, 4.0], dtype=DTYPE))
    with pytest.raises(ConfigurationError):
        mean_head([])


# --- Training loops ---

def test_meta_train_records_one_loss_per_epoch(model, meta, meta_cfg):
    seen = []
    state = meta_train(model, meta, meta_cfg, seed=5, callbacks=[lambda epoch, loss: seen.append((epoch, loss))])
    assert state.epoch == 3
    assert [e for e, _ in seen] == [0, 1, 2]
    assert [loss for _, loss in seen] == state.loss_history
    assert all(np.isfinite(state.loss_history))
    assert len(state.heads) == 3
    assert set(state.theta) == set(model.body_names)


def test_meta_train_is_deterministic(model, meta, meta_cfg):
    a = meta_initialization(meta_train(model, meta, meta_cfg, seed=5))
    b = meta_initialization(meta_train(model, meta, meta_cfg, seed=5))
    assert a.checksum() == b.checksum()


def test_zero_outer_lr_keeps_body(model, meta):
    cfg = MetaConfig(inner_steps=1, inner_lr=0.05, cg_steps=2, outer_lr=0.0, epochs=2)
    init = cold_start(model, 3)
    state = meta_train(model, meta, cfg, seed=3, init=init)
    for k, v in init.body.items():
        assert torch.equal(state.theta[k], v)


def test_meta_train_with_real_queries(model, meta, meta_cfg):
    real = _windows(6, 42)
    for task in meta.tasks:
        task.query = real
        task.query_adjacency = np.zeros((2, 2))
    state = meta_train(model, meta, meta_cfg, seed=1)
    assert len(state.loss_history) == meta_cfg.epochs


def test_meta_train_rejects_empty_query(model, meta, meta_cfg):
    meta.tasks[0].query = []
    with pytest.raises(ConfigurationError):
        meta_train(model, meta, meta_cfg, seed=1)


def test_meta_train_divergence_names_epoch(model, meta, meta_cfg):
    with pytest.raises(DivergenceError, match="step 0"):
        meta_train(model, meta, meta_cfg, seed=1, limit=1e-12)


def test_finetune_lowers_the_training_loss(model, meta):
    params = cold_start(model, 4)
    batch = collate(meta.tasks[0].support, ADJ)
    losses = []
    tuned = finetune(model, params, batch, steps=40, lr=0.05, seed=4, losses=losses)
    assert len(losses) == 40
    assert float(model.loss(tuned.merged(), batch)) < float(model.loss(params.merged(), batch))
    # the input set is never modified in place
    assert params.checksum() == cold_start(model, 4).checksum()


def test_finetune_zero_steps_returns_copy(model, meta):
    params = cold_start(model, 4)
    tuned = finetune(model, params, collate(meta.tasks[0].support, ADJ), steps=0, lr=0.05, seed=4)
    assert tuned.checksum() == params.checksum()
