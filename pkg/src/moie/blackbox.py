"""Source blackbox ``f0 = h0 . phi`` and the concept projection on frozen features."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .datagen import ConceptTriplet
from .metrics import safe_auroc

__all__ = [
    "TrainingDivergedError",
    "BlackboxConfig",
    "ProjectionConfig",
    "Blackbox",
    "Projection",
    "auto_batch_size",
    "train_blackbox",
    "train_projection",
    "fit_concept_heads",
    "predict_concepts",
    "blackbox_logits",
]

ADMISSION_THRESHOLD = 0.7


class TrainingDivergedError(RuntimeError):
    def __init__(self, what: str, epoch: int, cause: Exception | None = None):
        self.epoch = epoch
        super().__init__(f"{what} diverged at epoch {epoch}: {cause}")


def auto_batch_size(n: int, cap: int = 1028) -> int:
    return int(max(1, min(cap, n // 8 if n >= 8 else n)))


@dataclass
class BlackboxConfig:
    hidden: tuple[int, ...] = (1024, 256)
    epochs: int = 30
    batch_size: int | None = None
    lr: float = 0.001
    patience: int = 10
    seed: int = 0


@dataclass
class ProjectionConfig:
    epochs: int = 40
    batch_size: int | None = None
    lr: float = 0.01
    patience: int = 10
    threshold: float = ADMISSION_THRESHOLD
    seed: int = 0


class Blackbox(dc.Module):
    def __init__(self, d: int, hidden=(1024, 256), n_classes: int = 2, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.d = d
        self.hidden = tuple(hidden)
        self.phi = dc.MLP([d, *hidden], rng, name="phi", final_relu=True)
        self.head = dc.Linear(hidden[-1], n_classes, rng, name="head")
        self.history: list[dict] = []

    @property
    def d_features(self) -> int:
        return self.hidden[-1]

    def freeze_phi(self) -> None:
        self.phi.freeze()

    def __call__(self, X) -> dc.Tensor:
        return self.head(self.phi(X))

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.d:
            raise dc.ShapeError("blackbox", f"expected inputs with {self.d} columns, got {X.shape}")
        return X

    def features(self, X, batch_size: int = 4096) -> np.ndarray:
        X = self._check(X)
        with dc.no_grad():
            return np.concatenate([self.phi(X[i:i + batch_size]).data
                                   for i in range(0, max(len(X), 1), batch_size)])[: len(X)]

    def logits(self, X, batch_size: int = 4096) -> np.ndarray:
        F = self.features(X, batch_size)
        with dc.no_grad():
            return self.head(F).data


def blackbox_logits(bb: Blackbox, X) -> np.ndarray:
    """N x 2 logits of the blackbox."""
    return bb.logits(X)


def _prob1(logits: np.ndarray) -> np.ndarray:
    z = logits[:, 1] - logits[:, 0]
    return 1.0 / (1.0 + np.exp(-z))


def train_blackbox(train: ConceptTriplet, val: ConceptTriplet,
                   cfg: BlackboxConfig | None = None) -> Blackbox:
    """Cross-entropy training with early stopping on validation AUROC."""
    cfg = cfg or BlackboxConfig()
    bb = Blackbox(train.d, cfg.hidden, seed=cfg.seed)
    if cfg.epochs <= 0:
        return bb
    rng = np.random.default_rng([cfg.seed, 1])
    params = bb.parameters()
    opt = dc.Adam(params, lr=cfg.lr)
    bs = cfg.batch_size or auto_batch_size(train.n)
    best, best_state, stale = -np.inf, bb.state_dict(), 0
    for epoch in range(cfg.epochs):
        total = 0.0
        try:
            for idx in dc.minibatches(train.n, bs, rng):
                opt.zero_grad()
                loss = dc.cross_entropy(bb(train.X[idx]), train.Y[idx]).mean()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
        except dc.NumericError as exc:
            raise TrainingDivergedError("blackbox", epoch, exc) from exc
        score = safe_auroc(_prob1(bb.logits(val.X)), val.Y)
        bb.history.append({"epoch": epoch, "train_loss": total / train.n, "val_auroc": score})
        if score > best:
            best, best_state, stale = score, bb.state_dict(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    bb.load_state_dict(best_state)
    return bb


@dataclass
class Projection:
    """Concept heads ``t`` on frozen features with their admission mask."""

    heads: dc.Linear
    aurocs: np.ndarray
    accuracies: np.ndarray
    concept_names: list[str]
    threshold: float = ADMISSION_THRESHOLD
    history: list[dict] = field(default_factory=list)

    @property
    def mask(self) -> np.ndarray:
        # strict: a concept must exceed the threshold
        a = np.nan_to_num(self.aurocs, nan=-np.inf)
        return a > self.threshold

    @property
    def admitted(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def admitted_names(self) -> list[str]:
        return [self.concept_names[j] for j in self.admitted]

    def with_threshold(self, threshold: float) -> "Projection":
        out = copy.copy(self)
        out.threshold = threshold
        return out

    def concept_logits(self, F: np.ndarray) -> np.ndarray:
        with dc.no_grad():
            return self.heads(F).data

    def probabilities(self, F: np.ndarray, admitted_only: bool = True) -> np.ndarray:
        z = self.concept_logits(F)
        p = 1.0 / (1.0 + np.exp(-z))
        if not admitted_only:
            return p
        if self.admitted.size == 0:
            raise ValueError("no admitted concepts")
        return p[:, self.admitted]

    def accuracy(self, F: np.ndarray, C: np.ndarray) -> float:
        """Mean binarized accuracy over admitted concepts."""
        p = self.probabilities(F)
        return float(((p >= 0.5) == (np.asarray(C)[:, self.admitted] >= 0.5)).mean())

    def report(self) -> dict:
        mask = self.mask
        return {name: {"auroc": None if np.isnan(a) else float(a), "admitted": bool(m)}
                for name, a, m in zip(self.concept_names, self.aurocs, mask)}


def _concept_scores(heads: dc.Linear, F: np.ndarray, C: np.ndarray):
    with dc.no_grad():
        z = heads(F).data
    aurocs = np.array([safe_auroc(z[:, j], C[:, j]) for j in range(C.shape[1])])
    acc = ((z >= 0) == (C >= 0.5)).mean(axis=0)
    return aurocs, acc


def fit_concept_heads(F: np.ndarray, C: np.ndarray, F_val: np.ndarray, C_val: np.ndarray,
                      cfg: ProjectionConfig, init: dc.Linear | None = None,
                      what: str = "projection"):
    """Train independent per-concept logistic heads with BCE; best by mean val AUROC."""
    rng = np.random.default_rng([cfg.seed, 2])
    heads = copy.deepcopy(init) if init is not None else dc.Linear(
        F.shape[1], C.shape[1], np.random.default_rng([cfg.seed, 3]), name="t")
    heads.unfreeze()
    opt = dc.Adam(heads.parameters(), lr=cfg.lr)
    bs = cfg.batch_size or auto_batch_size(len(F))
    C = np.asarray(C, dtype=float)
    aurocs, _ = _concept_scores(heads, F_val, C_val)
    best, best_state, stale = np.nanmean(aurocs) if not np.all(np.isnan(aurocs)) else -np.inf, \
        heads.state_dict(), 0
    history = []
    for epoch in range(cfg.epochs):
        try:
            for idx in dc.minibatches(len(F), bs, rng):
                opt.zero_grad()
                loss = dc.bce_with_logits(heads(F[idx]), C[idx]).mean()
                loss.backward()
                opt.step()
        except dc.NumericError as exc:
            raise TrainingDivergedError(what, epoch, exc) from exc
        aurocs, _ = _concept_scores(heads, F_val, C_val)
        score = float(np.nanmean(aurocs))
        history.append({"epoch": epoch, "val_mean_auroc": score})
        if score > best:
            best, best_state, stale = score, heads.state_dict(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    heads.load_state_dict(best_state)
    heads.freeze()
    return heads, history


def train_projection(bb: Blackbox, train: ConceptTriplet, val: ConceptTriplet,
                     cfg: ProjectionConfig | None = None) -> Projection:
    cfg = cfg or ProjectionConfig()
    bb.freeze_phi()
    F, F_val = bb.features(train.X), bb.features(val.X)
    heads, history = fit_concept_heads(F, train.C, F_val, val.C, cfg)
    aurocs, acc = _concept_scores(heads, F_val, val.C)
    return Projection(heads, aurocs, acc, list(train.concept_names), cfg.threshold, history)


def predict_concepts(proj: Projection, bb: Blackbox, X) -> np.ndarray:
    """Admitted-concept probabilities for raw inputs."""
    return proj.probabilities(bb.features(X))
