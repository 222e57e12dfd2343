"""Consolidate a location's four directional ground embeddings into one
unit-norm target.

Two modes: ``avg`` (uniform mean) and ``att`` (softmax over per-view logits
from a linear scorer). A zero scorer makes the two coincide.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import DimensionError, NormalizationError, ParameterError
from .store import K_DIRECTIONS, QuadrupletDataset

POOL_MODES = ("avg", "att")


@dataclass
class AttentionScorer:
    w: np.ndarray  # (D,)
    b: float = 0.0

    @classmethod
    def zeros(cls, dim):
        return cls(np.zeros(dim), 0.0)

    @property
    def dim(self):
        return self.w.shape[0]


def _check_quad(quad):
    quad = np.asarray(quad.value if isinstance(quad, nc.Var) else quad, dtype=np.float64)
    if quad.ndim < 2 or quad.shape[-2] != K_DIRECTIONS:
        raise DimensionError(f"expected {K_DIRECTIONS} ground rows per location, got shape {quad.shape}")
    if not np.all(np.isfinite(quad)):
        raise ParameterError("ground embeddings must be finite")
    return quad


def avg_pool_var(quad, tape=None) -> nc.Var:
    quad = _check_quad(quad)
    return nc.l2_normalize(quad.mean(axis=-2), tape=tape)


def att_pool_var(quad, w, b, tape=None) -> tuple[nc.Var, nc.Var]:
    """Differentiable attention pooling; ``w`` is (D,), ``b`` is (1,)."""
    quad = _check_quad(quad)
    w, b = nc.as_var(w), nc.as_var(b)
    if w.shape != quad.shape[-1:]:
        raise DimensionError(f"scorer width {w.shape} does not match embedding dim {quad.shape[-1]}")
    logits = nc.affine(quad, nc.reshape(w, (1, -1), tape=tape), nc.reshape(b, (1,), tape=tape), tape=tape)
    logits = nc.reshape(logits, quad.shape[:-1], tape=tape)
    weights = nc.softmax(logits, tape=tape)
    pooled = nc.weighted_sum(weights, quad, tape=tape)
    return nc.l2_normalize(pooled, tape=tape), weights


def avg_pool(quad) -> np.ndarray:
    """Mean of the four rows, L2-normalized. Accepts ``(4, D)`` or ``(B, 4, D)``."""
    return avg_pool_var(quad).value


def att_pool(quad, scorer: AttentionScorer) -> tuple[np.ndarray, np.ndarray]:
    """Returns the pooled embedding and the four softmax weights."""
    g, weights = att_pool_var(quad, scorer.w, np.array([scorer.b], dtype=np.float64))
    return g.value, weights.value


def pool_dataset(ds: QuadrupletDataset, mode="avg", scorer: AttentionScorer | None = None) -> np.ndarray:
    """One pooled unit-norm row per location, in manifest order."""
    if mode not in POOL_MODES:
        raise ParameterError(f"unknown pooling mode {mode!r}")
    if (mode == "att") != (scorer is not None):
        raise ParameterError("a scorer is required for att pooling and only for att pooling")
    quads = ds.quads()
    try:
        if mode == "avg":
            return avg_pool(quads)
        return att_pool(quads, scorer)[0]
    except NormalizationError:
        pass
    # locate the offending location for the error message
    for loc, quad in zip(ds.locations, quads):
        try:
            avg_pool(quad) if mode == "avg" else att_pool(quad, scorer)
        except NormalizationError as exc:
            raise NormalizationError(f"location {loc.id!r}: {exc}") from None
    raise AssertionError("unreachable")
