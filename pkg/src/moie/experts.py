"""Entropy-logic experts ``g: concepts -> logits`` and FOL extraction.

Each expert keeps one relevance score per concept. Attention is
``softmax(gamma / T_lens)``; the concept vector is rescaled by
``n_c * attention`` before a small MLP, so uniform attention leaves the
input untouched and a dominant concept suppresses the others.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .logic import FOLExplanation, Formula

__all__ = [
    "ExpertConfig",
    "EntropyLogicExpert",
    "ell_forward",
    "entropy_regularizer",
    "extract_fol",
    "fol_fidelity",
]


@dataclass
class ExpertConfig:
    hidden: tuple[int, ...] = (30, 30)
    temperature: float = 7.6
    lambda_lens: float = 1e-4


class EntropyLogicExpert(dc.Module):
    def __init__(self, n_concepts: int, hidden=(30, 30), temperature: float = 7.6,
                 lambda_lens: float = 1e-4, n_classes: int = 2, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.n_concepts = n_concepts
        self.temperature = temperature
        self.lambda_lens = lambda_lens
        self.hidden = tuple(hidden)
        self.gamma = dc.parameter(np.zeros(n_concepts), "expert.gamma")
        self.mlp = dc.MLP([n_concepts, *hidden, n_classes], rng, name="expert")

    def attention_tensor(self) -> dc.Tensor:
        return dc.softmax(self.gamma * (1.0 / self.temperature), name="attention")

    def attention(self) -> np.ndarray:
        z = self.gamma.data / self.temperature
        e = np.exp(z - z.max())
        return e / e.sum()

    def __call__(self, C) -> tuple[dc.Tensor, dc.Tensor]:
        C = C if isinstance(C, dc.Tensor) else dc.constant(C)
        if C.data.ndim != 2 or C.shape[1] != self.n_concepts:
            raise dc.ShapeError("expert", f"expected {self.n_concepts} concept columns, got {C.shape}")
        alpha = self.attention_tensor()
        masked = dc.mul(C, alpha * float(self.n_concepts), name="concept_mask")
        return self.mlp(masked), alpha

    def logits(self, C) -> np.ndarray:
        with dc.no_grad():
            return self(np.asarray(C, dtype=np.float64))[0].data

    def predict(self, C) -> np.ndarray:
        z = self.logits(C)
        return np.argmax(z, axis=1)

    def prob1(self, C) -> np.ndarray:
        z = self.logits(C)
        return 1.0 / (1.0 + np.exp(-(z[:, 1] - z[:, 0])))

    def affine_shapes(self) -> list[tuple[int, int]]:
        return self.mlp.affine_shapes()


def ell_forward(expert: EntropyLogicExpert, C_batch) -> tuple[np.ndarray, np.ndarray]:
    """Logits (N x m) and the attention vector."""
    logits, alpha = expert(np.asarray(C_batch, dtype=np.float64))
    return logits.data, alpha.data


def entropy_regularizer(alpha) -> dc.Tensor | float:
    """``-sum a log a``. Tensors stay differentiable; arrays return a float."""
    if isinstance(alpha, dc.Tensor):
        return -(alpha * dc.log(alpha)).sum()
    a = np.asarray(alpha, dtype=np.float64)
    nz = a[a > 0]
    return float(-(nz * np.log(nz)).sum())


def _selected_concepts(alpha: np.ndarray, quantile: float) -> tuple[np.ndarray, bool]:
    thr = np.quantile(alpha, quantile)
    # inclusive, so uniform attention keeps every concept
    sel = np.flatnonzero(alpha >= thr)
    if sel.size == 0:
        return np.array([int(np.argmax(alpha))]), True
    return sel, False


def extract_fol(expert: EntropyLogicExpert, C, labels, predictions=None,
                attention_quantile: float = 0.7, max_terms: int | None = None,
                concept_index: np.ndarray | None = None, expert_id: int | None = None,
                n_classes: int = 2, prune: bool = True) -> list[FOLExplanation]:
    """Per-class DNF explanations from the covered samples of one expert.

    Concepts with attention at or above the ``attention_quantile`` quantile of the expert's
    attention vector form the literals. Each correctly predicted sample
    contributes its minterm over those concepts (polarity from the
    concept probability at 0.5). Distinct minterms form the disjunction,
    most frequent first, capped at ``max_terms`` when given. Minterms over
    the same literals are mutually exclusive, so a minterm is kept only if
    the expert predicts the class on most covered samples matching it;
    with ``prune=False`` every minterm is kept. ``concept_index`` maps
    expert input columns to the global concept ids used in formulas.
    """
    C = np.asarray(C, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if C.shape[0] == 0:
        raise ValueError("no covered samples")
    if not 0.0 < attention_quantile < 1.0:
        raise ValueError("attention_quantile must lie in (0, 1)")
    preds = expert.predict(C) if predictions is None else np.asarray(predictions).astype(int)
    idx = np.arange(C.shape[1]) if concept_index is None else np.asarray(concept_index)
    alpha = expert.attention()
    sel, fallback = _selected_concepts(alpha, attention_quantile)
    B = C[:, sel] >= 0.5
    out = []
    for m in range(n_classes):
        rows = np.flatnonzero((preds == m) & (labels == m))
        counts = Counter(tuple(B[i]) for i in rows)
        if prune:
            # net agreement of a minterm: samples it matches predicted m minus the rest
            hits = Counter(tuple(b) for b in B[preds == m])
            total = Counter(tuple(b) for b in B)
            counts = Counter({p: c for p, c in counts.items() if 2 * hits[p] > total[p]})
        # most frequent first, ties broken by pattern for determinism
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_terms]
        terms = tuple(tuple((int(idx[j]), bool(v)) for j, v in zip(sel, pattern))
                      for pattern, _ in ranked)
        formula = Formula(terms)
        fid = _formula_agreement(formula, C, preds == m, sel, idx)
        out.append(FOLExplanation(
            target_class=m, formula=formula, support=int(rows.size), fidelity=fid,
            expert=expert_id,
            meta={"selected": [int(idx[j]) for j in sel], "fallback_top1": fallback,
                  "attention_quantile": attention_quantile},
        ))
    return out


def _formula_agreement(formula: Formula, C: np.ndarray, target: np.ndarray,
                       sel: np.ndarray | None, idx: np.ndarray) -> float:
    # evaluate in global concept ids: scatter local columns into a wide matrix
    width = int(idx.max()) + 1 if idx.size else C.shape[1]
    wide = np.zeros((C.shape[0], width))
    wide[:, idx] = C
    return float((formula.evaluate(wide) == target).mean())


def fol_fidelity(formula: Formula | FOLExplanation, expert: EntropyLogicExpert, C,
                 target_class: int = 1, concept_index: np.ndarray | None = None) -> float:
    """Fraction of samples where the formula agrees with the expert's decision for the class."""
    if isinstance(formula, FOLExplanation):
        target_class = formula.target_class
        formula = formula.formula
    C = np.asarray(C, dtype=np.float64)
    if C.shape[0] == 0:
        raise ValueError("no samples")
    idx = np.arange(C.shape[1]) if concept_index is None else np.asarray(concept_index)
    return _formula_agreement(formula, C, expert.predict(C) == target_class, None, idx)
