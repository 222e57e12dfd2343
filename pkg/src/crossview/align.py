"""Satellite branch: identity-initialized adapter followed by the residual
projection head.

Head, per item::

    proj = W1 x + b1
    z    = dropout(W2 gelu(proj) + b2)
    y    = l2_normalize(layer_norm(z + proj))
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import CheckpointError, DimensionError, ParameterError
from .pooling import AttentionScorer
from .store import ModelCheckpoint

DEFAULT_DROPOUT = 0.1
LN_EPS = 1e-5

ADAPTER_PARAMS = ("adapter.W", "adapter.b")
HEAD_PARAMS = ("head.W1", "head.b1", "head.W2", "head.b2", "head.ln_gain", "head.ln_bias")
SCORER_PARAMS = ("scorer.w", "scorer.b")


@dataclass
class AdapterParams:
    W: np.ndarray
    b: np.ndarray

    def __call__(self, x):
        return np.asarray(x, dtype=np.float64) @ self.W.T + self.b


@dataclass
class HeadParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    dropout_rate: float = DEFAULT_DROPOUT

    @property
    def dim_in(self):
        return self.W1.shape[1]

    @property
    def dim_out(self):
        return self.W1.shape[0]


def _glorot(rng, fan_out, fan_in):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_params(dim, dim_out=None, seed=0, dropout_rate=DEFAULT_DROPOUT):
    """Fresh (adapter, head, scorer). Adapter is identity, scorer is zero,
    head weights are Glorot-uniform with zero biases."""
    dim_out = dim if dim_out is None else dim_out
    if dim < 1 or dim_out < 1:
        raise ParameterError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    adapter = AdapterParams(np.eye(dim), np.zeros(dim))
    head = HeadParams(
        W1=_glorot(rng, dim_out, dim),
        b1=np.zeros(dim_out),
        W2=_glorot(rng, dim_out, dim_out),
        b2=np.zeros(dim_out),
        ln_gain=np.ones(dim_out),
        ln_bias=np.zeros(dim_out),
        dropout_rate=dropout_rate,
    )
    return adapter, head, AttentionScorer.zeros(dim)


def flatten_params(adapter: AdapterParams, head: HeadParams, scorer: AttentionScorer) -> dict:
    return {
        "adapter.W": adapter.W.copy(),
        "adapter.b": adapter.b.copy(),
        "head.W1": head.W1.copy(),
        "head.b1": head.b1.copy(),
        "head.W2": head.W2.copy(),
        "head.b2": head.b2.copy(),
        "head.ln_gain": head.ln_gain.copy(),
        "head.ln_bias": head.ln_bias.copy(),
        "scorer.w": np.asarray(scorer.w, dtype=np.float64).copy(),
        "scorer.b": np.array([scorer.b], dtype=np.float64),
    }


def unflatten_params(params: dict, dropout_rate=DEFAULT_DROPOUT):
    try:
        adapter = AdapterParams(params["adapter.W"], params["adapter.b"])
        head = HeadParams(
            params["head.W1"], params["head.b1"], params["head.W2"], params["head.b2"],
            params["head.ln_gain"], params["head.ln_bias"], dropout_rate,
        )
        scorer = AttentionScorer(params["scorer.w"], float(np.asarray(params["scorer.b"]).reshape(-1)[0]))
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks tensor {exc}") from None
    return adapter, head, scorer


def head_apply(x, p: dict, training=False, seed=0, dropout_rate=0.0, tape=None) -> nc.Var:
    """Differentiable head over Vars keyed like ``HEAD_PARAMS``."""
    proj = nc.affine(x, p["head.W1"], p["head.b1"], tape=tape)
    hidden = nc.affine(nc.gelu(proj, tape=tape), p["head.W2"], p["head.b2"], tape=tape)
    z, _ = nc.dropout(hidden, dropout_rate, seed, training=training, tape=tape)
    normed = nc.layer_norm(nc.add(z, proj, tape=tape), p["head.ln_gain"], p["head.ln_bias"], LN_EPS, tape=tape)
    return nc.l2_normalize(normed, tape=tape)


def model_apply(x, p: dict, training=False, seed=0, dropout_rate=0.0, tape=None) -> nc.Var:
    """Adapter then head."""
    adapted = nc.affine(x, p["adapter.W"], p["adapter.b"], tape=tape)
    return head_apply(adapted, p, training, seed, dropout_rate, tape)


def _check_mode(mode):
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def head_forward(x, p: HeadParams, mode="eval", seed=0) -> np.ndarray:
    training = _check_mode(mode)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.dim_in:
        raise DimensionError(f"head expects width {p.dim_in}, got {x.shape[-1]}")
    flat = {
        "head.W1": p.W1, "head.b1": p.b1, "head.W2": p.W2, "head.b2": p.b2,
        "head.ln_gain": p.ln_gain, "head.ln_bias": p.ln_bias,
    }
    return head_apply(x, flat, training, seed, p.dropout_rate).value


def checkpoint_dropout(ckpt: ModelCheckpoint) -> float:
    return float(ckpt.hyperparameters.get("dropout_rate", DEFAULT_DROPOUT))


def sen_embed(sat_feature, ckpt: ModelCheckpoint, mode="eval", seed=0) -> np.ndarray:
    """Satellite embedding ``head(adapter(x))`` for one feature or a batch."""
    training = _check_mode(mode)
    x = np.asarray(sat_feature, dtype=np.float64)
    d_in = int(ckpt.dims.get("D_in", -1))
    if x.shape[-1] != d_in or ckpt.params.get("adapter.W", np.empty((0, 0))).shape != (d_in, d_in):
        raise CheckpointError(f"feature width {x.shape[-1]} does not match checkpoint D_in={d_in}")
    return model_apply(x, ckpt.params, training, seed, checkpoint_dropout(ckpt)).value


def initial_checkpoint(dim, dim_out=None, seed=0, dropout_rate=DEFAULT_DROPOUT, pool_mode="avg",
                       hyperparameters=None) -> ModelCheckpoint:
    adapter, head, scorer = init_params(dim, dim_out, seed, dropout_rate)
    hp = dict(hyperparameters or {})
    hp.setdefault("dropout_rate", dropout_rate)
    return ModelCheckpoint(
        dims={"D_in": dim, "D_hidden": head.dim_out, "D_out": head.dim_out},
        params=flatten_params(adapter, head, scorer),
        hyperparameters=hp,
        seed=seed,
        epoch=0,
        pool_mode=pool_mode,
    )
