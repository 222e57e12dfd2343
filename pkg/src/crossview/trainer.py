"""Queue-augmented InfoNCE training with AdamW and a step LR schedule."""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .align import ADAPTER_PARAMS, HEAD_PARAMS, SCORER_PARAMS, initial_checkpoint, model_apply
from .errors import ContractError, CrossviewError, DimensionError, ParameterError, TrainingError
from .pooling import POOL_MODES, att_pool_var, avg_pool_var
from .store import ModelCheckpoint, QuadrupletDataset, save_checkpoint

log = logging.getLogger(__name__)

LOSS_FORMS = ("moco", "ground_anchor")
UNIT_ROW_TOL = 1e-6


class KeyQueue:
    """Fixed-capacity FIFO of detached key rows; oldest rows are evicted first."""

    def __init__(self, capacity: int, dim: int | None = None):
        if capacity < 0:
            raise ParameterError("queue capacity must be >= 0")
        self.capacity = capacity
        self.dim = dim
        self._rows = deque(maxlen=capacity)

    def __len__(self):
        return len(self._rows)

    def push(self, batch):
        batch = np.array(batch, dtype=np.float64, ndmin=2)
        if self.dim is None:
            self.dim = batch.shape[1]
        elif batch.shape[1] != self.dim:
            raise DimensionError(f"queue holds width {self.dim}, got {batch.shape[1]}")
        _check_unit(batch, "queue batch")
        for row in batch:
            row = row.copy()
            row.flags.writeable = False
            self._rows.append(row)
        return self

    def keys(self) -> np.ndarray:
        """Rows in push order, oldest first, as an ``(len, dim)`` array."""
        if not self._rows:
            return np.zeros((0, self.dim or 0))
        return np.stack(self._rows)


def queue_update(q: KeyQueue, batch) -> KeyQueue:
    return q.push(batch)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    tau: float = 0.07
    step_size: int = 5
    gamma: float = 0.95
    queue_capacity: int = 4096
    weight_decay: float = 0.01
    pool: str = "avg"
    loss_form: str = "moco"
    dropout_rate: float = 0.1
    dim_out: int | None = None
    seed: int = 0

    def validate(self):
        if self.tau <= 0:
            raise ParameterError("tau must be positive")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2")
        if self.queue_capacity < 0 or self.queue_capacity % self.batch_size:
            raise ParameterError("queue_capacity must be a non-negative multiple of batch_size")
        if self.epochs < 0 or self.step_size < 1 or self.gamma <= 0 or self.lr < 0:
            raise ParameterError("epochs >= 0, step_size >= 1, gamma > 0 and lr >= 0 are required")
        if self.weight_decay < 0:
            raise ParameterError("weight_decay must be >= 0")
        if self.pool not in POOL_MODES:
            raise ParameterError(f"pool must be one of {POOL_MODES}")
        if self.loss_form not in LOSS_FORMS:
            raise ParameterError(f"loss_form must be one of {LOSS_FORMS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError("dropout_rate must be in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr, weight_decay):
    """One decoupled-weight-decay Adam step, in place on ``params``.

    Only names present in ``grads`` are updated.
    """
    b1, b2 = state.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name in sorted(grads):
        p, g = params[name], np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat, v_hat = m / c1, v / c2
        p -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + weight_decay * p)
    return params, state


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ParameterError("epoch must be >= 0")
    return cfg.lr * cfg.gamma ** (epoch // cfg.step_size)


def _check_unit(rows, what):
    if rows.size and np.any(np.abs(np.linalg.norm(rows, axis=-1) - 1.0) > UNIT_ROW_TOL):
        raise ContractError(f"{what}: rows must be unit-norm")


def _ce_rows(logits):
    """Mean over rows of -log softmax(logits)[i, i], and its gradient."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    diag = np.arange(n)
    loss = float(np.mean(np.log(denom[:, 0]) - shifted[diag, diag]))
    grad = e / denom
    grad[diag, diag] -= 1.0
    return loss, grad / n


def info_nce_var(anchors, positives, extra_keys=None, tau=0.07, form="moco", tape=None) -> nc.Var:
    """Differentiable InfoNCE.

    ``moco``: anchor s_i against keys {G_j} plus ``extra_keys`` (detached).
    ``ground_anchor``: anchor G_i against satellite keys {s_j}; ``extra_keys`` ignored.
    Here ``anchors`` are the satellite embeddings and ``positives`` the pooled
    ground embeddings in both forms.
    """
    if tau <= 0:
        raise ParameterError("tau must be positive")
    if form not in LOSS_FORMS:
        raise ParameterError(f"unknown loss form {form!r}")
    s, g = nc.as_var(anchors), nc.as_var(positives)
    if s.value.ndim != 2 or s.shape != g.shape or s.shape[0] < 1:
        raise DimensionError(f"anchors {s.shape} and positives {g.shape} must be matching B x D")
    extra = np.zeros((0, s.shape[1])) if extra_keys is None else np.asarray(extra_keys, dtype=np.float64)
    if extra.size == 0:
        extra = np.zeros((0, s.shape[1]))
    if extra.ndim != 2 or extra.shape[1] != s.shape[1]:
        raise DimensionError(f"extra keys {extra.shape} do not match width {s.shape[1]}")
    _check_unit(s.value, "anchors")
    _check_unit(g.value, "positives")
    if form == "ground_anchor":
        extra = extra[:0]
    _check_unit(extra, "extra keys")
    B = s.shape[0]

    if form == "moco":
        keys = np.concatenate([g.value, extra]) if extra.shape[0] else g.value
        logits = s.value @ keys.T / tau
        loss, dlog = _ce_rows(logits)

        def backward(grad):
            d = grad.item() * dlog / tau
            s.accumulate(d @ keys)
            g.accumulate(d[:, :B].T @ s.value)
    else:
        logits = g.value @ s.value.T / tau
        loss, dlog = _ce_rows(logits)

        def backward(grad):
            d = grad.item() * dlog / tau
            g.accumulate(d @ s.value)
            s.accumulate(d.T @ g.value)

    out = nc.Var(np.array(loss))
    if tape is not None and (s.requires_grad or g.requires_grad):
        out.requires_grad = True
        tape.record("info_nce", out, backward)
    return out


def info_nce(anchors, positives, extra_keys=None, tau=0.07, form="moco") -> float:
    return float(info_nce_var(anchors, positives, extra_keys, tau, form).value)


def trainable_names(pool_mode):
    names = ADAPTER_PARAMS + HEAD_PARAMS
    return names + SCORER_PARAMS if pool_mode == "att" else names


def batch_loss(params: dict, quads, sat, queue_keys, cfg: TrainConfig, seed, training=True, tape=None):
    """Forward pass for one batch: returns (loss Var, pooled ground Var)."""
    if cfg.pool == "att":
        pooled, _ = att_pool_var(quads, params["scorer.w"], params["scorer.b"], tape=tape)
    else:
        pooled = avg_pool_var(quads, tape=tape)
    s = model_apply(sat, params, training, seed, cfg.dropout_rate, tape=tape)
    loss = info_nce_var(s, pooled, queue_keys, cfg.tau, cfg.loss_form, tape=tape)
    return loss, pooled


def _dropout_seed(seed, epoch, batch):
    return [int(seed), int(epoch), int(batch)]


def checkpoint_from_state(params, state: OptimizerState, cfg: TrainConfig, dims, epoch) -> ModelCheckpoint:
    return ModelCheckpoint(
        dims=dict(dims),
        params={k: v.copy() for k, v in params.items()},
        hyperparameters=cfg.to_dict(),
        seed=cfg.seed,
        epoch=epoch,
        pool_mode=cfg.pool,
        opt_m={k: v.copy() for k, v in state.m.items()},
        opt_v={k: v.copy() for k, v in state.v.items()},
        opt_step=state.t,
        opt_betas=state.betas,
        opt_eps=state.eps,
    )


def train(ds: QuadrupletDataset, cfg: TrainConfig | None = None, checkpoint_dir=None, log_path=None,
          init: ModelCheckpoint | None = None):
    """Train adapter, head (and scorer in ``att`` mode).

    Returns ``(checkpoint, loss_log)``; ``loss_log`` holds one
    ``{epoch, batch, loss, lr}`` record per batch. When ``checkpoint_dir`` is
    given the checkpoint is rewritten there after every epoch; ``log_path``
    receives the log as JSON lines.
    """
    cfg = (cfg or TrainConfig()).validate()
    if ds.n < cfg.batch_size:
        raise ParameterError(f"dataset has {ds.n} locations, fewer than batch_size={cfg.batch_size}")
    if init is None:
        init = initial_checkpoint(ds.sat_dim, cfg.dim_out, cfg.seed, cfg.dropout_rate, cfg.pool, cfg.to_dict())
    dims = init.dims
    if dims["D_out"] != ds.dim:
        raise ParameterError(f"output width {dims['D_out']} must equal ground embedding width {ds.dim}")
    params = {k: np.array(v, dtype=np.float64) for k, v in init.params.items()}
    state = OptimizerState()
    queue = KeyQueue(cfg.queue_capacity, dims["D_out"])
    names = trainable_names(cfg.pool)
    rng = np.random.default_rng(cfg.seed)
    n_batches = ds.n // cfg.batch_size
    quads_all = ds.quads()
    sat_all = ds.sat_features()
    loss_log = []
    ckpt = checkpoint_from_state(params, state, cfg, dims, 0)
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            order = rng.permutation(ds.n)
            epoch_losses = []
            for bi in range(n_batches):
                idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
                try:
                    tape = nc.GradTape()
                    vs = {k: nc.Var(params[k], requires_grad=k in names) for k in params}
                    loss, pooled = batch_loss(
                        vs, quads_all[idx], sat_all[idx], queue.keys(), cfg,
                        _dropout_seed(cfg.seed, epoch, bi), training=True, tape=tape,
                    )
                    tape.backward(loss)
                    grads = {k: vs[k].grad if vs[k].grad is not None else np.zeros_like(params[k]) for k in names}
                    adamw_step(params, grads, state, lr, cfg.weight_decay)
                    queue.push(pooled.value)
                except CrossviewError as exc:
                    raise TrainingError(f"epoch {epoch} batch {bi}: {exc}", batch_index=bi) from exc
                value = float(loss.value)
                if not np.isfinite(value):
                    raise TrainingError(f"epoch {epoch} batch {bi}: non-finite loss", batch_index=bi)
                rec = {"epoch": epoch, "batch": bi, "loss": value, "lr": lr}
                loss_log.append(rec)
                epoch_losses.append(value)
                if log_file:
                    log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            ckpt = checkpoint_from_state(params, state, cfg, dims, epoch + 1)
            if checkpoint_dir is not None:
                save_checkpoint(ckpt, checkpoint_dir)
            log.info("epoch %d/%d lr=%.6g mean_loss=%.6f", epoch + 1, cfg.epochs, lr, float(np.mean(epoch_losses)))
    finally:
        if log_file:
            log_file.close()
    if cfg.epochs == 0 and checkpoint_dir is not None:
        save_checkpoint(ckpt, checkpoint_dir)
    return ckpt, loss_log


def epoch_means(loss_log) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for rec in loss_log:
        by_epoch.setdefault(rec["epoch"], []).append(rec["loss"])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def write_loss_log(loss_log, path):
    with open(Path(path), "w", encoding="utf-8") as fh:
        for rec in loss_log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
