"""Dense float64 primitives with hand-written backward passes.

Every primitive takes :class:`Var` (or plain arrays, treated as constants)
and, when given a :class:`GradTape`, records a closure that pushes the
output gradient back to its inputs. Vectors live on the last axis, so the
same primitive serves a single item or a batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf

from .errors import DegenerateInputError, DimensionError, NormalizationError, ParameterError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Var:
    """An array plus its accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.value.shape:
            g = _unbroadcast(g, self.value.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


class GradTape:
    """Ordered record of primitive applications.

    ``backward`` replays the recorded closures in exact reverse order.
    """

    def __init__(self):
        self.entries: list[tuple[str, Var, Callable[[np.ndarray], None]]] = []

    def record(self, name, out, backward):
        self.entries.append((name, out, backward))

    def backward(self, loss: Var):
        if loss.value.size != 1:
            raise DimensionError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.value)
        visited = []
        for name, out, fn in reversed(self.entries):
            visited.append(name)
            if out.grad is not None:
                fn(out.grad)
        return visited


def _wants_grad(*xs):
    return any(x.requires_grad for x in xs)


def _emit(tape, name, out, inputs, backward):
    if tape is not None and _wants_grad(*inputs):
        out.requires_grad = True
        tape.record(name, out, backward)
    return out


def affine(x, W, b, tape=None) -> Var:
    """y = W x + b over the last axis of ``x``."""
    x, W, b = as_var(x), as_var(W), as_var(b)
    if W.value.ndim != 2 or b.value.ndim != 1:
        raise DimensionError(f"affine expects W 2-d and b 1-d, got {W.shape} and {b.shape}")
    m, n = W.shape
    if x.shape[-1:] != (n,) or b.shape != (m,):
        raise DimensionError(f"affine shapes disagree: x {x.shape}, W {W.shape}, b {b.shape}")
    out = Var(x.value @ W.value.T + b.value)

    def backward(g):
        x.accumulate(g @ W.value)
        g2 = g.reshape(-1, m)
        W.accumulate(g2.T @ x.value.reshape(-1, n))
        b.accumulate(g2.sum(axis=0))

    return _emit(tape, "affine", out, (x, W, b), backward)


def gelu(x, tape=None) -> Var:
    """Exact GELU, 0.5 x (1 + erf(x / sqrt 2))."""
    x = as_var(x)
    cdf = 0.5 * (1.0 + erf(x.value * _INV_SQRT2))
    out = Var(x.value * cdf)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.value**2)
        x.accumulate(g * (cdf + x.value * pdf))

    return _emit(tape, "gelu", out, (x,), backward)


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x**2)


def layer_norm(x, gain, bias, eps=1e-5, tape=None) -> Var:
    x, gain, bias = as_var(x), as_var(gain), as_var(bias)
    n = x.shape[-1]
    if n < 2:
        raise DegenerateInputError("layer_norm needs at least 2 features")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({n},)")
    if eps <= 0:
        raise ParameterError("layer_norm eps must be positive")
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = Var(gain.value * xhat + bias.value)

    def backward(g):
        dxhat = g * gain.value
        x.accumulate(
            rstd
            * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        )
        gain.accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        bias.accumulate(g.reshape(-1, n).sum(axis=0))

    return _emit(tape, "layer_norm", out, (x, gain, bias), backward)


def l2_normalize(x, min_norm=1e-12, tape=None) -> Var:
    x = as_var(x)
    norm = np.sqrt((x.value**2).sum(axis=-1, keepdims=True))
    if np.any(~(norm > min_norm)):
        raise NormalizationError(f"cannot normalize a vector with norm <= {min_norm}")
    y = x.value / norm
    out = Var(y)

    def backward(g):
        x.accumulate((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm)

    return _emit(tape, "l2_normalize", out, (x,), backward)


def softmax(x, tape=None) -> Var:
    x = as_var(x)
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Var(y)

    def backward(g):
        x.accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _emit(tape, "softmax", out, (x,), backward)


def dropout(x, rate, seed, training=True, tape=None) -> tuple[Var, np.ndarray]:
    """Inverted dropout. Returns the output and the scaled mask it applied."""
    x = as_var(x)
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        mask = np.ones_like(x.value)
    else:
        rng = np.random.default_rng(seed)
        keep = rng.random(x.shape) >= rate
        mask = keep / (1.0 - rate)
    out = Var(x.value * mask)

    def backward(g):
        x.accumulate(g * mask)

    return _emit(tape, "dropout", out, (x,), backward), mask


def add(a, b, tape=None) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value + b.value)

    def backward(g):
        a.accumulate(g)
        b.accumulate(g)

    return _emit(tape, "add", out, (a, b), backward)


def reshape(x, shape, tape=None) -> Var:
    x = as_var(x)
    out = Var(x.value.reshape(shape))

    def backward(g):
        x.accumulate(g.reshape(x.shape))

    return _emit(tape, "reshape", out, (x,), backward)


def weighted_sum(weights, rows, tape=None) -> Var:
    """Sum_k weights[..., k] * rows[..., k, :]."""
    weights, rows = as_var(weights), as_var(rows)
    if rows.value.ndim < 2 or weights.shape != rows.shape[:-1]:
        raise DimensionError(f"weighted_sum shapes disagree: {weights.shape} vs {rows.shape}")
    out = Var(np.einsum("...k,...kd->...d", weights.value, rows.value))

    def backward(g):
        weights.accumulate(np.einsum("...d,...kd->...k", g, rows.value))
        rows.accumulate(weights.value[..., None] * g[..., None, :])

    return _emit(tape, "weighted_sum", out, (weights, rows), backward)


# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst: tuple[str, tuple] | None
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def relative_error(analytic, numeric, floor=1e-4):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from
    turning roundoff into a large ratio."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def value_and_grad(build):
    """Wrap ``build(vars, tape) -> Var`` into ``f(params) -> (loss, grads)``."""

    def f(params):
        tape = GradTape()
        vs = {k: Var(np.array(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
        loss = build(vs, tape)
        tape.backward(loss)
        grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in vs.items()}
        return float(loss.value), grads

    return f


def grad_check(f, params, h=1e-6, tol=1e-4, floor=1e-4) -> GradCheckReport:
    """Compare the analytic gradients of ``f`` against central differences.

    ``f(params) -> (loss, grads)`` where ``params`` and ``grads`` are dicts of
    float64 arrays. Every coordinate of every parameter is perturbed.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = f(params)
    worst_err, worst = 0.0, None
    per_param = {}
    count = 0
    for name in sorted(params):
        p = params[name]
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            fp, _ = f(params)
            p[idx] = orig - h
            fm, _ = f(params)
            p[idx] = orig
            numeric[idx] = (fp - fm) / (2.0 * h)
            count += 1
        err = relative_error(analytic[name], numeric, floor) if p.size else np.zeros(0)
        per_param[name] = float(err.max()) if err.size else 0.0
        if err.size and err.max() > worst_err:
            worst_err = float(err.max())
            worst = (name, tuple(int(i) for i in np.unravel_index(int(err.argmax()), p.shape)))
    return GradCheckReport(worst_err, tol, worst, per_param, count)
