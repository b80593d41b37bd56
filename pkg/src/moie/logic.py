"""Disjunctive-normal-form formulas over binary concept literals.

Used both as planted ground-truth rules for synthetic data and as the
explanations extracted from experts.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

Literal = tuple[int, bool]  # (concept index, polarity); polarity False means negated
Conjunction = tuple[Literal, ...]

_AND = ("∧", "&")
_OR = ("∨", "|")
_NOT = ("¬", "~", "!")


@dataclass(frozen=True)
class Formula:
    """A disjunction of conjunctions. An empty disjunction is constant false."""

    terms: tuple[Conjunction, ...] = ()

    def __post_init__(self):
        terms = tuple(tuple((int(i), bool(p)) for i, p in term) for term in self.terms)
        object.__setattr__(self, "terms", terms)

    @classmethod
    def conjunction(cls, *literals: Literal) -> "Formula":
        return cls((tuple(literals),))

    @property
    def is_false(self) -> bool:
        return len(self.terms) == 0

    def concepts(self) -> set[int]:
        return {i for term in self.terms for i, _ in term}

    def literal_sets(self) -> list[frozenset[Literal]]:
        return [frozenset(term) for term in self.terms]

    def contains_disjunct(self, literals) -> bool:
        """True if some disjunct includes every literal in ``literals``."""
        target = frozenset((int(i), bool(p)) for i, p in literals)
        return any(target <= s for s in self.literal_sets())

    def evaluate(self, C: np.ndarray) -> np.ndarray:
        """Evaluate on an N x n_c binary (or probability, thresholded at 0.5) matrix."""
        B = np.asarray(C) >= 0.5
        out = np.zeros(B.shape[0], dtype=bool)
        for term in self.terms:
            hit = np.ones(B.shape[0], dtype=bool)
            for i, pol in term:
                hit &= B[:, i] if pol else ~B[:, i]
            out |= hit
        return out

    def to_text(self, names: list[str] | None = None) -> str:
        if self.is_false:
            return "False"

        def lit(i, p):
            n = names[i] if names is not None else f"c_{i}"
            return n if p else f"¬{n}"

        parts = []
        for term in self.terms:
            if not term:
                parts.append("True")
            else:
                parts.append("(" + " ∧ ".join(lit(i, p) for i, p in term) + ")")
        return " ∨ ".join(parts)

    def to_json(self) -> list:
        return [[[i, p] for i, p in term] for term in self.terms]

    @classmethod
    def from_json(cls, payload: list) -> "Formula":
        return cls(tuple(tuple((int(i), bool(p)) for i, p in term) for term in payload))

    @classmethod
    def parse(cls, text: str, names: list[str] | None = None) -> "Formula":
        """Parse ``c_0 ∧ ¬c_1 ∨ c_2`` (ASCII ``& | ~`` also accepted)."""
        text = text.strip()
        if text in ("", "False"):
            return cls(())
        lookup = {n: i for i, n in enumerate(names)} if names else {}
        terms = []
        for raw in re.split(r"[∨|]", text):
            raw = raw.strip().strip("()").strip()
            lits = []
            for tok in re.split(r"[∧&]", raw):
                tok = tok.strip().strip("()").strip()
                pol = True
                while tok[:1] in _NOT:
                    pol, tok = not pol, tok[1:].strip()
                if tok in lookup:
                    idx = lookup[tok]
                else:
                    m = re.fullmatch(r"c_?(\d+)", tok)
                    if not m:
                        raise ValueError(f"unknown concept literal {tok!r}")
                    idx = int(m.group(1))
                lits.append((idx, pol))
            terms.append(tuple(lits))
        return cls(tuple(terms))


@dataclass
class FOLExplanation:
    """An expert's explanation for one target class."""

    target_class: int
    formula: Formula
    support: int = 0
    fidelity: float = float("nan")
    expert: int | None = None
    meta: dict = field(default_factory=dict)

    def to_text(self, names: list[str] | None = None) -> str:
        return self.formula.to_text(names)

    def to_json(self, names: list[str] | None = None) -> dict:
        return {
            "expert": self.expert,
            "target_class": self.target_class,
            "text": self.formula.to_text(names),
            "terms": self.formula.to_json(),
            "support": self.support,
            "fidelity": self.fidelity,
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "FOLExplanation":
        return cls(
            target_class=int(payload["target_class"]),
            formula=Formula.from_json(payload["terms"]),
            support=int(payload.get("support", 0)),
            fidelity=float(payload.get("fidelity", float("nan"))),
            expert=payload.get("expert"),
            meta=dict(payload.get("meta", {})),
        )
