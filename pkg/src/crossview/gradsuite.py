"""Finite-difference gradient suite over the full trainable path:
attention scorer -> pooled targets, adapter -> head -> satellite embeddings,
both feeding InfoNCE with extra queue keys."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .trainer import TrainConfig, batch_loss

PARAM_NAMES = (
    "adapter.W", "adapter.b",
    "head.W1", "head.b1", "head.W2", "head.b2", "head.ln_gain", "head.ln_bias",
    "scorer.w", "scorer.b",
)


@dataclass
class SuiteCase:
    index: int
    dim: int
    batch: int
    n_extra: int
    tau: float
    loss_form: str
    report: nc.GradCheckReport


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_case(rng, loss_form="moco"):
    """Random params and inputs for one composite check."""
    D = int(rng.integers(3, 7))
    B = int(rng.integers(2, 5))
    M = int(rng.integers(0, 4))
    params = {
        "adapter.W": np.eye(D) + 0.3 * rng.standard_normal((D, D)),
        "adapter.b": 0.1 * rng.standard_normal(D),
        "head.W1": rng.uniform(-1, 1, (D, D)),
        "head.b1": 0.1 * rng.standard_normal(D),
        "head.W2": rng.uniform(-1, 1, (D, D)),
        "head.b2": 0.1 * rng.standard_normal(D),
        "head.ln_gain": 1.0 + 0.2 * rng.standard_normal(D),
        "head.ln_bias": 0.1 * rng.standard_normal(D),
        "scorer.w": rng.standard_normal(D),
        "scorer.b": 0.1 * rng.standard_normal(1),
    }
    quads = _unit_rows(rng.standard_normal((B, 4, D)))
    sat = _unit_rows(rng.standard_normal((B, D)))
    extra = _unit_rows(rng.standard_normal((M, D))) if M else np.zeros((0, D))
    tau = float(rng.uniform(0.07, 1.0))
    cfg = TrainConfig(batch_size=max(B, 2), tau=tau, pool="att", loss_form=loss_form, dropout_rate=0.0,
                      queue_capacity=0)
    return params, quads, sat, extra, cfg


def composite_fn(quads, sat, extra, cfg):
    def build(vs, tape):
        loss, _ = batch_loss(vs, quads, sat, extra, cfg, seed=0, training=True, tape=tape)
        return loss

    return nc.value_and_grad(build)


def run_suite(n_configs=100, seed=0, h=1e-6, tol=1e-4) -> list[SuiteCase]:
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n_configs):
        form = "moco" if i % 2 == 0 else "ground_anchor"
        params, quads, sat, extra, cfg = random_case(rng, form)
        report = nc.grad_check(composite_fn(quads, sat, extra, cfg), params, h=h, tol=tol)
        cases.append(SuiteCase(i, quads.shape[-1], quads.shape[0], extra.shape[0], cfg.tau, form, report))
    return cases
