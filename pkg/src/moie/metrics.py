"""Evaluation: AUROC, coverage bookkeeping, residual hardness, ablation and intervention."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

__all__ = [
    "SingleClassError",
    "auroc",
    "safe_auroc",
    "proportional_auroc",
    "mean_stderr",
    "blackbox_scores",
    "hardness_trace",
    "concept_ablation",
    "zero_concept_drop",
    "test_time_intervention",
    "INTERVENTION_FRACTIONS",
    "evaluate_moie",
    "MetricsReport",
]


class SingleClassError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied scores share ranks (half credit per tied pair)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).astype(int).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("AUROC needs both classes present")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def safe_auroc(scores, labels) -> float:
    """AUROC, or NaN when a class is missing."""
    try:
        return auroc(scores, labels)
    except SingleClassError:
        return float("nan")


def proportional_auroc(value: float, coverage: float) -> float:
    if not (0.0 <= value <= 1.0 and 0.0 <= coverage <= 1.0):
        raise ValueError("AUROC and coverage must lie in [0, 1]")
    return value * coverage


def mean_stderr(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise ValueError("standard error needs at least two seeds")
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def _prob1(logits: np.ndarray) -> np.ndarray:
    z = logits[:, 1] - logits[:, 0]
    return 1.0 / (1.0 + np.exp(-z))


def blackbox_scores(model, X) -> np.ndarray:
    """Class-1 probability of the original blackbox ``f0``."""
    return _prob1(model.head_logits(model.features(X), 0))


# residual hardness ------------------------------------------------------------

def hardness_trace(model, X, Y) -> dict:
    """``f0`` AUROC on the samples still unclaimed after each iteration.

    Row ``k`` holds the samples no selector among ``1..k`` routes to its
    expert. Single-class or empty subsets get ``auroc=None``.
    """
    from .pipeline import predict

    Y = np.asarray(Y).astype(int)
    trace = predict(model, X)
    f0 = blackbox_scores(model, X)
    rows = []
    for k in range(1, model.n_experts + 1):
        left = (trace.route < 0) | (trace.route >= k)
        value = safe_auroc(f0[left], Y[left]) if left.any() else float("nan")
        rows.append({"iteration": k, "n": int(left.sum()),
                     "auroc": None if np.isnan(value) else value})
    return {"global_auroc": auroc(f0, Y), "rows": rows}


# concept ablation and intervention ---------------------------------------------

def concept_ablation(expert, C, Y, order=None, names=None) -> list[dict]:
    """Expert AUROC as concepts are zeroed one after another.

    ``order`` defaults to descending attention. The first point has nothing
    zeroed; point ``j`` has the first ``j`` concepts of ``order`` set to 0.
    """
    C = np.asarray(C, dtype=float).copy()
    Y = np.asarray(Y).astype(int)
    order = np.argsort(-expert.attention(), kind="stable") if order is None else np.asarray(order)
    names = names or [f"c_{j}" for j in range(C.shape[1])]
    curve = [{"zeroed": 0, "concept": None, "auroc": safe_auroc(expert.prob1(C), Y)}]
    for j, col in enumerate(order, start=1):
        C[:, col] = 0.0
        curve.append({"zeroed": j, "concept": names[col], "auroc": safe_auroc(expert.prob1(C), Y)})
    return curve


def zero_concept_drop(expert, C, Y, column: int) -> float:
    """AUROC lost by zeroing a single concept column."""
    C = np.asarray(C, dtype=float)
    base = safe_auroc(expert.prob1(C), Y)
    Z = C.copy()
    Z[:, column] = 0.0
    return base - safe_auroc(expert.prob1(Z), Y)


INTERVENTION_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)


def test_time_intervention(model, X, C_true, Y, fractions=INTERVENTION_FRACTIONS,
                           experts=None) -> list[dict]:
    """Pooled expert AUROC when top-attention concepts are replaced by ground truth.

    Routing stays as computed from predicted concepts. For each expert the
    ``round(f * n)`` concepts with the highest attention are overwritten on
    its covered samples. ``experts`` restricts the evaluation to the given
    0-based expert indices (default: all).
    """
    from .pipeline import predict

    C_true = np.asarray(C_true, dtype=float)
    Y = np.asarray(Y).astype(int)
    trace = predict(model, X)
    keep = range(model.n_experts) if experts is None else experts
    n_c = trace.concepts.shape[1]
    curve = []
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ValueError("intervention fractions must lie in [0, 1]")
        scores, labels = [], []
        for k in keep:
            rows = trace.route == k
            if not rows.any():
                continue
            expert = model.experts[k]
            top = np.argsort(-expert.attention(), kind="stable")[: int(round(f * n_c))]
            C = trace.concepts[rows].copy()
            C[:, top] = C_true[rows][:, top]
            scores.append(expert.prob1(C))
            labels.append(Y[rows])
        value = safe_auroc(np.concatenate(scores), np.concatenate(labels)) if scores else float("nan")
        curve.append({"fraction": float(f), "auroc": value})
    return curve


test_time_intervention.__test__ = False  # keep pytest from collecting it on import


# per-seed evaluation and aggregation ------------------------------------------

def evaluate_moie(model, test, with_interventions: bool = True) -> dict:
    """Single-seed metrics on a test triplet (ground-truth concepts in ``test.C``)."""
    from .pipeline import predict

    Y = test.Y
    trace = predict(model, test.X)
    f0 = blackbox_scores(model, test.X)
    covered = trace.covered
    fractions = trace.coverage(model.n_experts)
    components = []
    for k in range(model.n_experts + 1):
        rows = trace.route == (k if k < model.n_experts else -1)
        a = safe_auroc(trace.prob1[rows], Y[rows]) if rows.any() else float("nan")
        name = f"expert_{k + 1}" if k < model.n_experts else "residual"
        components.append({
            "component": name, "coverage": float(fractions[k]),
            "auroc": None if np.isnan(a) else a,
            "proportional_auroc": None if np.isnan(a) else proportional_auroc(a, fractions[k]),
        })
    out = {
        "blackbox_auroc": auroc(f0, Y),
        "moie_auroc": safe_auroc(trace.prob1[covered], Y[covered]) if covered.any() else None,
        "moie_r_auroc": auroc(trace.prob1, Y),
        "coverage": float(covered.mean()),
        "components": components,
        "hardness": hardness_trace(model, test.X, Y),
    }
    if model.n_experts:
        C_admitted = np.asarray(test.C, dtype=float)[:, model.concept_index]
        first = trace.route == 0
        if first.any():
            names = [model.concept_names[j] for j in model.concept_index]
            out["ablation"] = concept_ablation(model.experts[0], trace.concepts[first], Y[first],
                                               names=names)
        if with_interventions:
            out["intervention"] = test_time_intervention(model, test.X, C_admitted, Y)
            hard = list(range(max(0, model.n_experts - 2), model.n_experts))
            out["intervention_hard"] = test_time_intervention(model, test.X, C_admitted, Y,
                                                              experts=hard)
    return out


def _nan_to_none(v):
    return None if v is None or (isinstance(v, float) and np.isnan(v)) else v


@dataclass
class MetricsReport:
    """Per-seed evaluations plus mean and standard error of the headline AUROCs."""

    seeds: list[int]
    per_seed: list[dict]
    transfer: list[dict] = field(default_factory=list)

    HEADLINE = ("blackbox_auroc", "moie_auroc", "moie_r_auroc", "coverage")

    def summary(self) -> dict:
        out = {}
        for key in self.HEADLINE:
            vals = [r[key] for r in self.per_seed if r.get(key) is not None]
            if len(vals) >= 2:
                mean, se = mean_stderr(vals)
                out[key] = {"mean": mean, "stderr": se, "n": len(vals)}
            elif vals:
                out[key] = {"mean": float(vals[0]), "stderr": None, "n": 1}
        return out

    def to_json(self) -> dict:
        return json.loads(json.dumps({"seeds": self.seeds, "summary": self.summary(),
                                      "per_seed": self.per_seed, "transfer": self.transfer},
                                     default=_json_default))

    def save(self, directory: str | Path) -> list[Path]:
        """Write ``report.json`` and the five plot-ready CSVs; returns the paths."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = [d / "report.json"]
        paths[0].write_text(json.dumps(self.to_json(), sort_keys=True, indent=1))
        tables = {
            "coverage_proportional_auroc.csv": (
                ["seed", "component", "coverage", "auroc", "proportional_auroc"],
                [[s, c["component"], c["coverage"], c["auroc"], c["proportional_auroc"]]
                 for s, r in zip(self.seeds, self.per_seed) for c in r["components"]]),
            "hardness_trace.csv": (
                ["seed", "iteration", "n", "auroc", "global_auroc"],
                [[s, row["iteration"], row["n"], row["auroc"], r["hardness"]["global_auroc"]]
                 for s, r in zip(self.seeds, self.per_seed) for row in r["hardness"]["rows"]]),
            "ablation_curve.csv": (
                ["seed", "zeroed", "concept", "auroc"],
                [[s, p["zeroed"], p["concept"], p["auroc"]]
                 for s, r in zip(self.seeds, self.per_seed) for p in r.get("ablation", [])]),
            "intervention_curve.csv": (
                ["seed", "subset", "fraction", "auroc"],
                [[s, subset, p["fraction"], p["auroc"]]
                 for s, r in zip(self.seeds, self.per_seed)
                 for subset in ("intervention", "intervention_hard")
                 for p in r.get(subset, [])]),
            "transfer_flops_auroc.csv": (
                ["seed", "model", "labeled_fraction", "flops", "auroc"],
                [[t["seed"], t["model"], t["labeled_fraction"], t["flops"], t["auroc"]]
                 for t in self.transfer]),
        }
        for name, (header, rows) in tables.items():
            p = d / name
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                for row in rows:
                    w.writerow([_csv_cell(v) for v in row])
            paths.append(p)
        return paths


def _csv_cell(v):
    v = _nan_to_none(v)
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return None if np.isnan(o) else float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")
