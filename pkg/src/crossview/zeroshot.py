"""Zero-shot classification by Direct Attribute Prediction over prompt
embeddings, and prompt selection by within-class representativeness.

Each prompt is treated as an attribute of its class. A link function turns
cosine similarity into a positive pseudo-probability; a class score is the
sum over its prompts of ``log link(s . a) - log prior(a)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateGeometryError, ParameterError
from .store import PromptSet

LINK_KINDS = ("shifted", "exponential")


@dataclass(frozen=True)
class LinkFunction:
    kind: str = "shifted"
    eps: float = 1e-6
    tau: float = 0.07

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise ParameterError(f"unknown link {self.kind!r}; expected one of {LINK_KINDS}")
        if self.eps <= 0 or self.tau <= 0:
            raise ParameterError("link eps and tau must be positive")

    def __call__(self, sim):
        sim = np.asarray(sim, dtype=np.float64)
        if self.kind == "shifted":
            return np.maximum((1.0 + sim) / 2.0, self.eps)
        return np.exp(sim / self.tau)

    def log(self, sim):
        sim = np.asarray(sim, dtype=np.float64)
        if self.kind == "shifted":
            return np.log(self(sim))
        return sim / self.tau

    def to_json(self):
        if self.kind == "shifted":
            return {"kind": "shifted", "eps": self.eps}
        return {"kind": "exponential", "tau": self.tau}


@dataclass
class PriorTable:
    values: np.ndarray  # (C, T)
    source: str = "transductive"

    def __post_init__(self):
        if not np.all(self.values > 0):
            raise ContractError("priors must be strictly positive")


def _unit(x, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.size and np.any(np.abs(np.linalg.norm(x, axis=-1) - 1.0) > 1e-6):
        raise ContractError(f"{what}: rows must be unit-norm")
    return x


def estimate_priors(ps: PromptSet, images, link: LinkFunction = LinkFunction(), source="transductive") -> PriorTable:
    """Mean link-similarity of every prompt over an image set."""
    images = _unit(images, "images")
    if images.shape[0] == 0:
        raise ParameterError("prior estimation needs at least one image")
    A = ps.tensor()
    sims = np.einsum("ctd,nd->nct", A, images)
    return PriorTable(link(sims).mean(axis=0), source)


def class_scores_dap(s, ps: PromptSet, priors: PriorTable, link: LinkFunction = LinkFunction()) -> np.ndarray:
    """Log-space DAP class scores; ``s`` may be a single embedding or a batch."""
    if ps.unequal_T:
        raise ContractError(f"DAP needs equal prompt counts per class, got {ps.counts}")
    A = ps.tensor()
    if priors.values.shape != A.shape[:2]:
        raise ContractError(f"prior table {priors.values.shape} does not match prompts {A.shape[:2]}")
    if not np.all(priors.values > 0):
        raise ContractError("priors must be strictly positive")
    single = np.ndim(s) == 1
    S = _unit(s, "embeddings")
    sims = np.einsum("ctd,nd->nct", A, S)
    scores = (link.log(sims) - np.log(priors.values)).sum(axis=-1)
    return scores[0] if single else scores


def argmax_lowest(scores) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index (numpy's convention)."""
    return np.argmax(np.asarray(scores), axis=-1)


@dataclass
class PromptScoreReport:
    alpha: list[np.ndarray]
    beta: list[np.ndarray]
    w: list[np.ndarray]
    ranking: list[np.ndarray]
    class_names: list[str] = field(default_factory=list)

    def to_json(self):
        return {
            "classes": [
                {
                    "name": name,
                    "alpha": self.alpha[c].tolist(),
                    "beta": self.beta[c].tolist(),
                    "w": self.w[c].tolist(),
                    "ranking": [int(i) for i in self.ranking[c]],
                }
                for c, name in enumerate(self.class_names)
            ]
        }


def rank_descending(values) -> np.ndarray:
    """Indices by descending value; equal values keep index order."""
    return np.argsort(-np.asarray(values), kind="stable")


def prompt_scores(ps: PromptSet) -> PromptScoreReport:
    """Within-class mean similarity over global mean similarity, per prompt.

    Self-similarity is included in both sums. With unequal prompt counts the
    global mean divides by the total number of prompts.
    """
    rows = [_unit(ps.class_rows(c), f"class {c} prompts") for c in range(ps.n_classes)]
    total = np.concatenate(rows).sum(axis=0)
    n_total = sum(r.shape[0] for r in rows)
    alpha, beta, w, ranking = [], [], [], []
    for c, A in enumerate(rows):
        a = (A @ A.sum(axis=0)) / A.shape[0]
        b = (A @ total) / n_total
        if np.any(np.abs(b) < 1e-12):
            t = int(np.flatnonzero(np.abs(b) < 1e-12)[0])
            raise DegenerateGeometryError(
                f"class {ps.classes[c].name!r} prompt {t}: global mean similarity is ~0"
            )
        ratio = a / b
        alpha.append(a)
        beta.append(b)
        w.append(ratio)
        ranking.append(rank_descending(ratio))
    return PromptScoreReport(alpha, beta, w, ranking, ps.class_names)


SELECT_MODES = ("best", "worst", "random")


def select_prompts(ps: PromptSet, k: int, mode="best", seed=None, report: PromptScoreReport | None = None) -> PromptSet:
    """Keep ``k`` prompts per class: top-k by score, bottom-k, or a seeded
    uniform subset. Kept prompts carry their score."""
    if mode not in SELECT_MODES:
        raise ParameterError(f"mode must be one of {SELECT_MODES}")
    if not 1 <= k <= min(ps.counts):
        raise ParameterError(f"k={k} outside [1, {min(ps.counts)}]")
    report = report or prompt_scores(ps)
    if mode == "random":
        rng = np.random.default_rng(seed)
        selection = [np.sort(rng.choice(n, size=k, replace=False)) for n in ps.counts]
    elif mode == "best":
        selection = [r[:k] for r in report.ranking]
    else:
        selection = [r[len(r) - k:] for r in report.ranking]
    return ps.subset(selection, scores=report.w)


@dataclass
class Classification:
    labels: np.ndarray
    scores: np.ndarray  # (N, C) log-scores
    priors: PriorTable
    link: LinkFunction


def classify(embeddings, ps: PromptSet, link: LinkFunction = LinkFunction(), reference=None) -> Classification:
    """DAP labels for a batch of unit-norm embeddings.

    Priors come from ``reference`` when given, else from ``embeddings``.
    """
    emb = _unit(embeddings, "embeddings")
    if reference is None:
        priors = estimate_priors(ps, emb, link, "transductive")
    else:
        priors = estimate_priors(ps, reference, link, "reference")
    scores = class_scores_dap(emb, ps, priors, link)
    return Classification(argmax_lowest(scores), scores, priors, link)
