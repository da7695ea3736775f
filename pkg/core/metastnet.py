"""
Functional MetaSTNet forecaster.

The network is written against a flat ``{name: tensor}`` parameter dict so the
meta-trainer can differentiate any slot group (body or head) with
core.numerics. Two branches (closeness, period) each stack S ST-blocks:

    fused    = fusion_gate(h, h_txt)
    x1       = LN(fused + drop(MHA(fused)))
    temporal = LN(x1 + drop(FFN(x1)))
    h        = temporal * (GCN(x) * CNN(image))

Each branch is mean-pooled over time and the output layer combines them:
    y_hat = h_c w1^T + h_p w2^T + b
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from core.data_pipeline import normalized_adjacency
from core.exceptions import ConfigurationError
from core.numerics import DTYPE, DiffFunction
from db.models import ModelConfig, MultimodalWindow, ParameterSet
from utils.rng import make_rng

logger = logging.getLogger(__name__)

BRANCHES = ("close", "period")
LN_EPS = 1e-12


# --- Batches ---

@dataclass
class WindowBatch:
    x_close: torch.Tensor       # N x p_c x D
    txt_close: torch.Tensor     # N x p_c x D_txt
    x_period: torch.Tensor      # N x p_p x D
    txt_period: torch.Tensor    # N x p_p x D_txt
    image: torch.Tensor         # C x W x H
    adj_hat: torch.Tensor       # D x D, normalized with self-loops
    y: torch.Tensor             # N x D

    def __len__(self):
        return self.y.shape[0]

    def subset(self, index) -> "WindowBatch":
        index = torch.as_tensor(np.asarray(index), dtype=torch.long)
        return WindowBatch(
            self.x_close[index], self.txt_close[index], self.x_period[index],
            self.txt_period[index], self.image, self.adj_hat, self.y[index],
        )


def collate(windows: list[MultimodalWindow], adjacency) -> WindowBatch:
    if not windows:
        raise ConfigurationError("cannot collate an empty window list")

    def stack(attr):
        return torch.as_tensor(np.stack([getattr(w, attr) for w in windows]), dtype=DTYPE)

    image = torch.as_tensor(np.asarray(windows[0].image, dtype=np.float64), dtype=DTYPE).permute(2, 0, 1)
    return WindowBatch(
        x_close=stack("x_close"),
        txt_close=stack("txt_close"),
        x_period=stack("x_period"),
        txt_period=stack("txt_period"),
        image=image.contiguous(),
        adj_hat=torch.as_tensor(normalized_adjacency(adjacency), dtype=DTYPE),
        y=stack("y"),
    )


# --- Building blocks ---

def embed(x_tra, x_txt, params: dict, prefix: str):
    h_tra = x_tra @ params[f"{prefix}embed.tra.w"] + params[f"{prefix}embed.tra.b"]
    if x_txt is None:
        return h_tra, torch.zeros_like(h_tra)
    h_txt = x_txt @ params[f"{prefix}embed.txt.w"] + params[f"{prefix}embed.txt.b"]
    return h_tra, h_txt


def fusion_gate(h_tra, h_txt):
    if h_tra.shape != h_txt.shape:
        raise ConfigurationError(f"fusion inputs differ in shape: {tuple(h_tra.shape)} vs {tuple(h_txt.shape)}")
    z = torch.sigmoid(h_tra + h_txt)
    return z * h_tra + (1.0 - z) * h_txt


def attention_weights(h, params: dict, prefix: str):
    """Per-head softmax(Q_i K_i^T / sqrt(d_a)); shape ... x n x T x T."""
    q = torch.einsum("...td,hda->...hta", h @ params[f"{prefix}attn.wq"], params[f"{prefix}attn.head_q"])
    k = torch.einsum("...td,hda->...hta", h @ params[f"{prefix}attn.wk"], params[f"{prefix}attn.head_k"])
    scale = math.sqrt(q.shape[-1])
    return torch.softmax(q @ k.transpose(-1, -2) / scale, dim=-1)


def multi_head_attention(h, params: dict, prefix: str):
    weights = attention_weights(h, params, prefix)
    v = torch.einsum("...td,hda->...hta", h @ params[f"{prefix}attn.wv"], params[f"{prefix}attn.head_v"])
    heads = weights @ v                                   # ... x n x T x d_a
    concat = heads.movedim(-3, -2).flatten(-2)            # ... x T x (n * d_a)
    return concat @ params[f"{prefix}attn.w0"]


def ffn(x, params: dict, prefix: str):
    hidden = torch.relu(x @ params[f"{prefix}ffn.w1"] + params[f"{prefix}ffn.b1"])
    return hidden @ params[f"{prefix}ffn.w2"] + params[f"{prefix}ffn.b2"]


def layer_norm(x, gamma, beta):
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + LN_EPS) * gamma + beta


def gcn_propagate(x_tra, adj_hat):
    # A_hat is symmetric, so row-vector propagation x A_hat equals A_hat x.
    return x_tra @ adj_hat


def gcn_layer(x_tra, adj_hat, params: dict, prefix: str):
    return torch.relu(gcn_propagate(x_tra, adj_hat) @ params[f"{prefix}gcn.w"] + params[f"{prefix}gcn.b"])


def cnn_features(image, params: dict, prefix: str):
    """image: C x W x H -> d-vector (two 3x3 same convs, ReLU, global mean pool, projection)."""
    x = image.unsqueeze(0)
    x = torch.relu(F.conv2d(x, params[f"{prefix}cnn.conv1.w"], params[f"{prefix}cnn.conv1.b"], padding=1))
    x = torch.relu(F.conv2d(x, params[f"{prefix}cnn.conv2.w"], params[f"{prefix}cnn.conv2.b"], padding=1))
    pooled = x.mean(dim=(-2, -1)).squeeze(0)
    return pooled @ params[f"{prefix}cnn.proj.w"] + params[f"{prefix}cnn.proj.b"]


def st_block(h_temporal, h_gcn, h_cnn):
    if not h_temporal.shape == h_gcn.shape == h_cnn.shape:
        raise ConfigurationError(
            f"ST-block inputs must align: {tuple(h_temporal.shape)}, {tuple(h_gcn.shape)}, {tuple(h_cnn.shape)}"
        )
    return h_temporal * (h_gcn * h_cnn)


def dropout(x, rate: float, rng: Optional[np.random.Generator]):
    if rng is None or rate == 0:
        return x
    keep = rng.uniform(size=tuple(x.shape)) >= rate
    return x * torch.as_tensor(keep, dtype=DTYPE) / (1.0 - rate)


# --- Model ---

class MetaSTNet:
    """
    Parameter layout, per branch br in (close, period) and block s:
      {br}.embed.tra.{w,b}  {br}.embed.txt.{w,b}
      {br}.block{s}.attn.{wq,wk,wv,head_q,head_k,head_v,w0}
      {br}.block{s}.norm{1,2}.{gamma,beta}  {br}.block{s}.ffn.{w1,b1,w2,b2}
      {br}.block{s}.gcn.{w,b}  {br}.block{s}.cnn.{conv1,conv2,proj}.{w,b}
    Head: head.w1, head.w2, head.b (scalar head mode adds body slot out.proj.w).
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self._spec = self._build_spec()

    def _build_spec(self) -> dict:
        cfg = self.config
        d, n, d_a, dff = cfg.hidden, cfg.heads, cfg.head_width, cfg.ffn_hidden
        D, Dt = cfg.n_cells, cfg.n_exog
        c_in, c = cfg.image_shape[2], cfg.cnn_channels
        spec = {}   # name -> (shape, init) with init = fan_in, "ones" or "zeros"
        for br in BRANCHES:
            spec[f"{br}.embed.tra.w"] = ((D, d), D)
            spec[f"{br}.embed.tra.b"] = ((d,), D)
            if cfg.use_external:
                spec[f"{br}.embed.txt.w"] = ((Dt, d), Dt)
                spec[f"{br}.embed.txt.b"] = ((d,), Dt)
            for s in range(cfg.blocks):
                p = f"{br}.block{s}."
                for w in ("wq", "wk", "wv", "w0"):
                    spec[p + f"attn.{w}"] = ((d, d), d)
                for w in ("head_q", "head_k", "head_v"):
                    spec[p + f"attn.{w}"] = ((n, d, d_a), d)
                for k in ("norm1", "norm2"):
                    spec[p + f"{k}.gamma"] = ((d,), "ones")
                    spec[p + f"{k}.beta"] = ((d,), "zeros")
                spec[p + "ffn.w1"] = ((d, dff), d)
                spec[p + "ffn.b1"] = ((dff,), d)
                spec[p + "ffn.w2"] = ((dff, d), dff)
                spec[p + "ffn.b2"] = ((d,), dff)
                spec[p + "gcn.w"] = ((D, d), D)
                spec[p + "gcn.b"] = ((d,), D)
                if cfg.use_external:
                    spec[p + "cnn.conv1.w"] = ((c, c_in, 3, 3), c_in * 9)
                    spec[p + "cnn.conv1.b"] = ((c,), c_in * 9)
                    spec[p + "cnn.conv2.w"] = ((c, c, 3, 3), c * 9)
                    spec[p + "cnn.conv2.b"] = ((c,), c * 9)
                    spec[p + "cnn.proj.w"] = ((c, d), c)
                    spec[p + "cnn.proj.b"] = ((d,), c)
        if cfg.head_mode == "scalar":
            spec["out.proj.w"] = ((d, D), d)
            spec["head.w1"] = ((), 1)
            spec["head.w2"] = ((), 1)
        else:
            spec["head.w1"] = ((D, d), d)
            spec["head.w2"] = ((D, d), d)
        spec["head.b"] = ((D,), d)
        return spec

    # --- Slots ---

    @property
    def head_names(self) -> list[str]:
        return [k for k in self._spec if k.startswith("head.")]

    @property
    def body_names(self) -> list[str]:
        return [k for k in self._spec if not k.startswith("head.")]

    def param_shapes(self) -> dict:
        return {k: shape for k, (shape, _) in self._spec.items()}

    def _init(self, names, rng: np.random.Generator) -> dict:
        out = {}
        for name in names:
            shape, init = self._spec[name]
            if init == "ones":
                values = np.ones(shape)
            elif init == "zeros":
                values = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(init)
                values = rng.uniform(-bound, bound, size=shape)
            out[name] = torch.as_tensor(values, dtype=DTYPE)
        return out

    def init_params(self, rng: np.random.Generator) -> ParameterSet:
        values = self._init(list(self._spec), rng)
        return ParameterSet(
            body={k: values[k] for k in self.body_names},
            head={k: values[k] for k in self.head_names},
        )

    def init_head(self, rng: np.random.Generator) -> dict:
        return self._init(self.head_names, rng)

    # --- Forward ---

    def branch(self, x, txt, batch: WindowBatch, params: dict, br: str, rng=None):
        cfg = self.config
        h, h_txt = embed(x, txt if cfg.use_external else None, params, f"{br}.")
        for s in range(cfg.blocks):
            p = f"{br}.block{s}."
            fused = fusion_gate(h, h_txt)
            x1 = layer_norm(
                fused + dropout(multi_head_attention(fused, params, p), cfg.dropout, rng),
                params[p + "norm1.gamma"], params[p + "norm1.beta"],
            )
            temporal = layer_norm(
                x1 + dropout(ffn(x1, params, p), cfg.dropout, rng),
                params[p + "norm2.gamma"], params[p + "norm2.beta"],
            )
            spatial_gcn = gcn_layer(x, batch.adj_hat, params, p)
            if cfg.use_external:
                spatial_cnn = cnn_features(batch.image, params, p).expand_as(temporal)
            else:
                spatial_cnn = torch.ones_like(temporal)
            h = st_block(temporal, spatial_gcn, spatial_cnn)
        return h.mean(dim=-2)

    def head(self, h_close, h_period, params: dict):
        if self.config.head_mode == "scalar":
            mixed = params["head.w1"] * h_close + params["head.w2"] * h_period
            return mixed @ params["out.proj.w"] + params["head.b"]
        return h_close @ params["head.w1"].T + h_period @ params["head.w2"].T + params["head.b"]

    def forward(self, batch: WindowBatch, params: dict, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> torch.Tensor:
        """N x D predictions. Dropout is active only with train=True and an rng."""
        if train and rng is None:
            raise ConfigurationError("train-mode forward needs an rng for dropout masks")
        self._check_batch(batch)
        rng = rng if train else None
        h_close = self.branch(batch.x_close, batch.txt_close, batch, params, "close", rng)
        h_period = self.branch(batch.x_period, batch.txt_period, batch, params, "period", rng)
        return self.head(h_close, h_period, params)

    def _check_batch(self, batch: WindowBatch):
        cfg = self.config
        if batch.x_close.shape[1:] != (cfg.closeness, cfg.n_cells):
            raise ConfigurationError(
                f"closeness block {tuple(batch.x_close.shape[1:])} != ({cfg.closeness}, {cfg.n_cells})"
            )
        if batch.x_period.shape[1:] != (cfg.period, cfg.n_cells):
            raise ConfigurationError(
                f"period block {tuple(batch.x_period.shape[1:])} != ({cfg.period}, {cfg.n_cells})"
            )
        if cfg.use_external and batch.txt_close.shape[-1] != cfg.n_exog:
            raise ConfigurationError(f"exogenous width {batch.txt_close.shape[-1]} != {cfg.n_exog}")
        w, h, c = cfg.image_shape
        if cfg.use_external and tuple(batch.image.shape) != (c, w, h):
            raise ConfigurationError(f"image {tuple(batch.image.shape)} != ({c}, {w}, {h})")

    # --- Losses ---

    def loss(self, params: dict, batch: WindowBatch, train_seed: Optional[int] = None) -> torch.Tensor:
        """MSE over all N x D outputs. A train_seed turns dropout on with masks fixed by that seed."""
        rng = make_rng(train_seed) if train_seed is not None else None
        pred = self.forward(batch, params, train=rng is not None, rng=rng)
        return torch.mean((pred - batch.y) ** 2)

    def diff_function(self, train_seed: Optional[int] = None, name: str = "mse") -> DiffFunction:
        return DiffFunction(
            slots=self.param_shapes(),
            loss=lambda params, batch: self.loss(params, batch, train_seed),
            name=name,
        )

    def predict(self, batch: WindowBatch, params: ParameterSet) -> np.ndarray:
        with torch.no_grad():
            return self.forward(batch, params.merged()).numpy().copy()
