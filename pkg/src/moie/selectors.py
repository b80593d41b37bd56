"""Sigmoid selectors, class-stratified coverage and the selective risk.

Coverage units: :func:`empirical_coverage` returns per-class means of the
selector output. The pipeline converts them to shares of the whole dataset
(``w_m * zeta_m``) before comparing with the stratified targets
``tau_m = w_m * tau`` from :func:`stratify_coverage`, so that the class
targets add up to the iteration's total coverage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

__all__ = [
    "RESIDUAL",
    "SelectorCollapseError",
    "Selector",
    "CoveragePlan",
    "stratify_coverage",
    "empirical_coverage",
    "selective_risk",
    "coverage_penalty",
    "route",
    "route_from_pi",
    "class_masks",
    "calibrate_threshold",
]

RESIDUAL = -1


class SelectorCollapseError(RuntimeError):
    def __init__(self, message: str, zeta=None):
        self.zeta = zeta
        super().__init__(message)


class Selector(dc.Module):
    """``pi: concepts -> (0, 1)`` with one hidden ReLU layer."""

    def __init__(self, n_concepts: int, hidden: int = 16, k: int = 0, seed: int = 0):
        super().__init__()
        self.k = k
        self.n_concepts = n_concepts
        self.net = dc.MLP([n_concepts, hidden, 1], np.random.default_rng(seed), name=f"selector{k}")

    def __call__(self, C) -> dc.Tensor:
        C = C if isinstance(C, dc.Tensor) else dc.constant(C)
        if C.data.ndim != 2 or C.shape[1] != self.n_concepts:
            raise dc.ShapeError(f"selector{self.k}", f"expected {self.n_concepts} concept columns")
        # centre probabilities so hidden units see both signs
        return dc.sigmoid(self.net(C * 2.0 - 1.0), name=f"selector{self.k}.pi").reshape(-1)

    def pi(self, C) -> np.ndarray:
        with dc.no_grad():
            return self(np.asarray(C, dtype=np.float64)).data

    def logit(self, C) -> np.ndarray:
        C = np.asarray(C, dtype=np.float64)
        with dc.no_grad():
            return self.net(C * 2.0 - 1.0).data.reshape(-1)

    def shift(self, delta: float) -> None:
        """Add ``delta`` to the output logit (moves the routing threshold)."""
        self.net.layers[-1].b.data = self.net.layers[-1].b.data + float(delta)

    def affine_shapes(self) -> list[tuple[int, int]]:
        return self.net.affine_shapes()


@dataclass
class CoveragePlan:
    tau: float
    class_weights: np.ndarray
    lambda_s: float = 128.0
    per_class: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.lambda_s <= 0:
            raise ValueError("lambda_s must be positive")
        self.class_weights = np.asarray(self.class_weights, dtype=float)
        self.per_class = self.class_weights * self.tau

    def to_json(self) -> dict:
        return {"tau": self.tau, "class_weights": self.class_weights.tolist(),
                "per_class": self.per_class.tolist(), "lambda_s": self.lambda_s}

    @classmethod
    def from_json(cls, payload: dict) -> "CoveragePlan":
        return cls(payload["tau"], np.asarray(payload["class_weights"]), payload["lambda_s"])


def stratify_coverage(tau: float, class_counts) -> np.ndarray:
    """``tau_m = (N_m / N) * tau``."""
    counts = np.asarray(class_counts, dtype=float)
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    if (counts <= 0).any():
        raise ValueError("every class needs at least one sample")
    return counts / counts.sum() * tau


def empirical_coverage(pi, labels, n_classes: int = 2, weights=None, available=None):
    """Per-class soft (mean of ``pi``) and hard (fraction with ``pi >= 0.5``) coverage.

    ``weights`` multiplies ``pi`` in the soft mean (the probability of not
    being claimed by an earlier selector); ``available`` marks samples not
    already routed elsewhere, so hard coverage counts what this selector
    would actually receive.
    """
    pi = np.asarray(pi, dtype=float)
    labels = np.asarray(labels).astype(int)
    w = np.ones_like(pi) if weights is None else np.asarray(weights, dtype=float)
    free = np.ones(pi.shape, dtype=bool) if available is None else np.asarray(available, dtype=bool)
    soft, hard = np.zeros(n_classes), np.zeros(n_classes)
    for m in range(n_classes):
        rows = labels == m
        if not rows.any():
            raise ValueError(f"class {m} has no samples")
        soft[m] = (pi[rows] * w[rows]).mean()
        hard[m] = ((pi[rows] >= 0.5) & free[rows]).mean()
    return soft, hard


def calibrate_threshold(selector: Selector, C, labels, targets, n_total: int | None = None,
                        available=None, n_classes: int = 2, rule: str = "cover") -> dict:
    """Shift the selector logit so hard coverage tracks the per-class targets.

    ``targets[m]`` is the wanted share of all ``n_total`` samples that are
    class ``m`` and routed here (``available`` and ``pi >= 0.5``). A target
    above what is still available is capped at the available share and
    reported. ``rule="cover"`` takes the smallest shift meeting every
    reachable target; ``rule="balanced"`` minimizes the largest absolute deviation
    ``|share_m - target_m|``. The ordering of samples by ``pi`` is unchanged.
    """
    if rule not in ("cover", "balanced"):
        raise ValueError("rule must be 'cover' or 'balanced'")
    z = selector.logit(C)
    labels = np.asarray(labels).astype(int)
    free = np.ones(z.shape, dtype=bool) if available is None else np.asarray(available, dtype=bool)
    n_total = z.size if n_total is None else n_total
    targets = np.asarray(targets, dtype=float)
    pool = np.flatnonzero(free)
    if pool.size == 0:
        return {"shift": 0.0, "unreachable_classes": [], "max_relative_error": None}
    order = pool[np.argsort(-z[pool], kind="stable")]
    zs = z[order]
    # candidate k covers the k highest-scoring free samples, k = 1..len(pool)
    onehot = labels[order][:, None] == np.arange(n_classes)[None, :]
    share = np.cumsum(onehot, axis=0) / n_total
    avail = share[-1]
    short = [m for m in range(n_classes) if targets[m] > avail[m] + 1e-12]
    goal = np.minimum(targets, avail)
    live = goal > 0
    if rule == "cover" and len(short) < n_classes:
        # an exhausted class takes whatever the other classes' cut leaves it
        live[short] = False
    if not live.any():
        return {"shift": 0.0, "unreachable_classes": short, "max_relative_error": None}
    dev = share[:, live] - goal[live]
    # distinct thresholds only: a cut inside a run of tied scores is not realizable
    distinct = np.append(zs[1:] < zs[:-1], True)
    if rule == "cover":
        ok = (dev >= -1e-12).all(axis=1) & distinct
        best = int(np.argmax(ok)) if ok.any() else len(zs) - 1
    else:
        best = int(np.argmin(np.where(distinct, np.abs(dev).max(axis=1), np.inf)))
    err = np.abs(dev).max(axis=1)
    delta = -float(zs[best])
    # land strictly on the covered side of the 0.5 threshold
    delta += 1e-9 * max(1.0, abs(delta))
    selector.shift(delta)
    return {"shift": delta, "unreachable_classes": short, "max_relative_error": float(err[best])}


def class_masks(labels, n_classes: int = 2) -> np.ndarray:
    """m x N indicator matrix scaled so ``masks @ v`` gives per-class means."""
    labels = np.asarray(labels).astype(int)
    M = np.zeros((n_classes, labels.size))
    for m in range(n_classes):
        rows = labels == m
        if rows.any():
            M[m, rows] = 1.0 / rows.sum()
    return M


def selective_risk(losses, pi, zeta, labels, n_classes: int = 2):
    """``sum_m mean_{i in m}(L_i) / zeta_m``; ``L_i`` already carries the routing weights.

    Accepts Tensors (differentiable) or arrays (returns a float). ``pi`` is
    part of the signature for symmetry with the loss definition; the
    weights are expected inside ``losses``.
    """
    as_float = not isinstance(losses, dc.Tensor) and not isinstance(zeta, dc.Tensor)
    z = zeta.data if isinstance(zeta, dc.Tensor) else np.asarray(zeta, dtype=float)
    labels = np.asarray(labels).astype(int)
    present = [m for m in range(n_classes) if (labels == m).any()]
    for m in present:
        if z[m] <= 0:
            raise SelectorCollapseError(f"selector collapsed for class {m}", zeta=z)
    L = losses if isinstance(losses, dc.Tensor) else dc.constant(losses)
    zt = zeta if isinstance(zeta, dc.Tensor) else dc.constant(z)
    M = class_masks(labels, n_classes)
    per_class = dc.matmul(dc.constant(M), L.reshape(-1, 1)).reshape(-1)
    sel = np.zeros(n_classes)
    sel[present] = 1.0
    safe = zt + dc.constant(1.0 - sel)  # absent classes: placeholder denominator, zero numerator
    risk = (per_class / safe * dc.constant(sel)).sum()
    return risk.item() if as_float else risk


def coverage_penalty(zeta, tau, lambda_s: float):
    """``lambda_s * sum_m max(0, tau_m - zeta_m)^2``."""
    if lambda_s <= 0:
        raise ValueError("lambda_s must be positive")
    tau = np.asarray(tau, dtype=float)
    if isinstance(zeta, dc.Tensor):
        gap = dc.relu(dc.constant(tau) - zeta)
        return (gap * gap).sum() * float(lambda_s)
    gap = np.maximum(0.0, tau - np.asarray(zeta, dtype=float))
    return float(lambda_s * (gap ** 2).sum())


def route_from_pi(pi: np.ndarray) -> np.ndarray:
    """First selector (in iteration order) with ``pi >= 0.5`` wins; else residual."""
    pi = np.atleast_2d(np.asarray(pi, dtype=float))
    hit = pi >= 0.5
    first = np.argmax(hit, axis=1)
    return np.where(hit.any(axis=1), first, RESIDUAL)


def route(selectors: list[Selector], C) -> np.ndarray:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if not selectors:
        return np.full(C.shape[0], RESIDUAL)
    pi = np.stack([s.pi(C) for s in selectors], axis=1)
    return route_from_pi(pi)
