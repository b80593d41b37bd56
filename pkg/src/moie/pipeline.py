"""Iterative distillation of a blackbox into a mixture of interpretable experts.

Iteration ``k`` trains a selector and an expert jointly against the current
blackbox ``f^{k-1}``, then refits the classifier head on the logit residual
``f^{k-1} - g^k`` to obtain ``f^k``. The feature extractor never changes.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .blackbox import Blackbox, Projection, auto_batch_size
from .datagen import ConceptTriplet, class_weights
from .experts import EntropyLogicExpert, entropy_regularizer, extract_fol
from .logic import FOLExplanation
from .selectors import (RESIDUAL, CoveragePlan, Selector, SelectorCollapseError,
                        calibrate_threshold, class_masks, coverage_penalty, empirical_coverage, route_from_pi, selective_risk)

__all__ = [
    "DistillConfig",
    "MoIEModel",
    "RouteTrace",
    "IterationResult",
    "geometric_schedule",
    "cumulative_weight",
    "routing_weights",
    "distillation_loss",
    "train_iteration",
    "fit_residual",
    "run_moie",
    "predict",
]


@dataclass
class DistillConfig:
    batch_size: int | None = None
    lr: float = 0.01
    lambda_lens: float = 1e-4
    alpha_kd: float = 0.99
    temperature_kd: float = 20.0
    hidden: tuple[int, ...] = (30, 30)
    lambda_s: float = 128.0
    temperature_lens: float = 7.6
    selector_hidden: int = 16
    # relative slack above tau_m before over-coverage is penalized; None disables
    coverage_ceiling: float | None = 0.05
    # hard-coverage calibration of each selector's threshold; None disables
    calibration_margin: float | None = 0.02
    epochs: int = 40
    residual_epochs: int = 20
    max_experts: int = 5
    schedule: list[float] | None = None
    stop_coverage: float = 0.9
    warmup_epochs: int = 5
    attention_quantile: float = 0.7
    use_true_concepts: bool = False
    seed: int = 0

    def tau(self, k: int) -> float:
        """Target coverage of iteration ``k`` (0-based)."""
        if self.schedule is not None:
            if k >= len(self.schedule):
                raise IndexError(f"coverage schedule has no entry for iteration {k + 1}")
            return float(self.schedule[k])
        return geometric_schedule(k)

    def to_json(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_json(cls, payload: dict) -> "DistillConfig":
        payload = dict(payload)
        if "hidden" in payload:
            payload["hidden"] = tuple(payload["hidden"])
        return cls(**payload)


def geometric_schedule(k: int, first: float = 0.4, ratio: float = 0.75) -> float:
    return first * ratio ** k


def cumulative_weight(prior_pi) -> np.ndarray:
    """``prod_j (1 - pi^j)`` over earlier selectors; ones when there are none.

    ``prior_pi`` is N x (k-1) (or a 1-D vector for a single sample).
    """
    pi = np.asarray(prior_pi, dtype=float)
    if pi.ndim == 1:
        return np.prod(1.0 - pi)
    if pi.shape[1] == 0:
        return np.ones(pi.shape[0])
    return np.prod(1.0 - pi, axis=1)


def routing_weights(pi: np.ndarray) -> np.ndarray:
    """N x (K+1) soft routing probabilities: expert terms then the residual term."""
    pi = np.atleast_2d(np.asarray(pi, dtype=float))
    N, K = pi.shape
    out = np.empty((N, K + 1))
    keep = np.ones(N)
    for k in range(K):
        out[:, k] = pi[:, k] * keep
        keep = keep * (1.0 - pi[:, k])
    out[:, K] = keep
    return out


def distillation_loss(teacher, student: dc.Tensor, labels, alpha_kd: float = 0.99,
                      temperature: float = 20.0) -> dc.Tensor:
    """Per-sample ``a T^2 KL(teacher || student) + (1 - a) CE(y, student)``."""
    if not 0.0 <= alpha_kd <= 1.0:
        raise ValueError("alpha_kd must lie in [0, 1]")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    student = student if isinstance(student, dc.Tensor) else dc.constant(student)
    soft = dc.kd_kl(student, teacher, temperature) * (alpha_kd * temperature ** 2)
    if alpha_kd == 1.0:
        return soft
    return soft + dc.cross_entropy(student, labels) * (1.0 - alpha_kd)


@dataclass
class IterationResult:
    selector: Selector
    expert: EntropyLogicExpert
    record: dict


def _objective(selector, expert, C, teacher, y, cum, plan: CoveragePlan, cfg: DistillConfig):
    g, alpha = expert(C)
    pi = selector(C)
    ell = distillation_loss(teacher, g, y, cfg.alpha_kd, cfg.temperature_kd)
    routed = pi * dc.constant(cum)
    L = ell * routed
    M = class_masks(y)
    zeta = dc.matmul(dc.constant(M), routed.reshape(-1, 1)).reshape(-1) + 1e-12
    risk = selective_risk(L, pi, zeta, y)
    present = np.array([(y == m).any() for m in range(2)], dtype=float)
    share = zeta * dc.constant(plan.class_weights * present)
    penalty = coverage_penalty(share, plan.per_class * present, plan.lambda_s)
    if cfg.coverage_ceiling is not None:
        # the risk is invariant to rescaling pi, so only this term pins coverage from above
        ceiling = plan.per_class * present * (1.0 + cfg.coverage_ceiling)
        ceiling = ceiling + (1.0 - present) * 2.0
        penalty = penalty + coverage_penalty(-share, -ceiling, plan.lambda_s)
    reg = entropy_regularizer(alpha) * cfg.lambda_lens
    return risk + penalty + reg, risk, penalty


def train_iteration(k: int, C_train: np.ndarray, y_train: np.ndarray, teacher_train: np.ndarray,
                    cum_train: np.ndarray, C_val: np.ndarray, y_val: np.ndarray,
                    teacher_val: np.ndarray, cum_val: np.ndarray, plan: CoveragePlan,
                    cfg: DistillConfig, seed: int = 0, selector: Selector | None = None,
                    expert: EntropyLogicExpert | None = None, train_expert: bool = True,
                    epochs: int | None = None) -> IterationResult:
    """Jointly fit selector ``k`` and expert ``k`` under the coverage constraint.

    ``cum_*`` is the probability that earlier selectors passed the sample on.
    Passing ``selector``/``expert`` warm-starts them (transfer fine-tuning);
    ``train_expert=False`` keeps the expert fixed.
    """
    n_c = C_train.shape[1]
    selector = copy.deepcopy(selector) if selector is not None else Selector(
        n_c, cfg.selector_hidden, k=k, seed=seed * 1000 + 2 * k)
    expert = copy.deepcopy(expert) if expert is not None else EntropyLogicExpert(
        n_c, cfg.hidden, cfg.temperature_lens, cfg.lambda_lens, seed=seed * 1000 + 2 * k + 1)
    selector.unfreeze()
    if train_expert:
        expert.unfreeze()
    else:
        expert.freeze()
    params = selector.parameters() + (expert.parameters() if train_expert else [])
    opt = dc.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([seed, 100 + k])
    bs = cfg.batch_size or auto_batch_size(len(C_train))
    n_epochs = cfg.epochs if epochs is None else epochs

    def val_score():
        with dc.no_grad():
            total, risk, pen = _objective(selector, expert, C_val, teacher_val, y_val, cum_val,
                                          plan, cfg)
        return total.item(), risk.item(), pen.item()

    best = val_score()[0]
    best_state = (selector.state_dict(), expert.state_dict())
    best_epoch, history = -1, []
    for epoch in range(n_epochs):
        for idx in dc.minibatches(len(C_train), bs, rng):
            opt.zero_grad()
            total, _, _ = _objective(selector, expert, C_train[idx], teacher_train[idx],
                                     y_train[idx], cum_train[idx], plan, cfg)
            total.backward()
            opt.step()
        v_total, v_risk, v_pen = val_score()
        soft, hard = empirical_coverage(selector.pi(C_val), y_val, weights=cum_val)
        history.append({"epoch": epoch, "val_objective": v_total, "val_risk": v_risk,
                        "val_penalty": v_pen, "val_soft_coverage": soft.tolist()})
        if epoch + 1 >= cfg.warmup_epochs and (soft < 1e-4).any():
            m = int(np.argmin(soft))
            raise SelectorCollapseError(
                f"selector {k + 1} collapsed for class {m} (soft coverage {soft[m]:.2e}); "
                f"try a smaller lambda_s", zeta=soft)
        if v_total < best:
            best, best_epoch = v_total, epoch
            best_state = (selector.state_dict(), expert.state_dict())
    selector.load_state_dict(best_state[0])
    expert.load_state_dict(best_state[1])
    selector.freeze()
    expert.freeze()
    record = {"k": k + 1, "tau": plan.tau, "tau_per_class": plan.per_class.tolist(),
              "lambda_s": plan.lambda_s, "best_epoch": best_epoch, "best_val_objective": best,
              "history": history}
    return IterationResult(selector, expert, record)


def fit_residual(head_prev: dc.Linear, F_train: np.ndarray, target_train: np.ndarray,
                 weight_train: np.ndarray, F_val: np.ndarray, target_val: np.ndarray,
                 weight_val: np.ndarray, cfg: DistillConfig, seed: int = 0,
                 epochs: int | None = None) -> tuple[dc.Linear, list]:
    """Weighted MSE fit of a new head to residual logits, starting from ``head_prev``.

    ``target`` is ``f^{k-1}(x) - g^k(c)``; ``weight`` is
    ``prod_{i<=k} (1 - pi^i(c))``. Returns the head with the lowest weighted
    validation loss (the starting head if nothing improves).
    """
    head = copy.deepcopy(head_prev)
    head.unfreeze()
    opt = dc.Adam(head.parameters(), lr=cfg.lr)
    rng = np.random.default_rng([seed, 300])
    bs = cfg.batch_size or auto_batch_size(len(F_train))
    n_epochs = cfg.residual_epochs if epochs is None else epochs

    def val_loss():
        with dc.no_grad():
            return float((dc.mse(head(F_val), target_val).data * weight_val).mean())

    best, best_state, history = val_loss(), head.state_dict(), []
    for epoch in range(n_epochs):
        for idx in dc.minibatches(len(F_train), bs, rng):
            opt.zero_grad()
            loss = (dc.mse(head(F_train[idx]), target_train[idx])
                    * dc.constant(weight_train[idx])).mean()
            loss.backward()
            opt.step()
        v = val_loss()
        history.append({"epoch": epoch, "val_weighted_mse": v})
        if v < best:
            best, best_state = v, head.state_dict()
    head.load_state_dict(best_state)
    head.freeze()
    return head, history


# model -----------------------------------------------------------------------

class MoIEModel:
    """Frozen blackbox trunk, projection, ordered (selector, expert) pairs and heads.

    ``heads[0]`` is the blackbox head ``h^0``; ``heads[k]`` is the residual
    head after iteration ``k``; ``heads[-1]`` serves residual-routed samples.
    """

    def __init__(self, blackbox: Blackbox, projection: Projection, config: DistillConfig):
        self.blackbox = blackbox
        self.projection = projection
        self.config = config
        self.selectors: list[Selector] = []
        self.experts: list[EntropyLogicExpert] = []
        self.heads: list[dc.Linear] = [blackbox.head]
        self.plans: list[CoveragePlan] = []
        self.ledger: list[dict] = []
        self.explanations: list[list[FOLExplanation]] = []
        self.phi_hash = dc.param_hash(blackbox.phi)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def final_head(self) -> dc.Linear:
        return self.heads[-1]

    @property
    def concept_index(self) -> np.ndarray:
        return self.projection.admitted

    @property
    def concept_names(self) -> list[str]:
        return self.projection.concept_names

    def concepts(self, X) -> np.ndarray:
        return self.projection.probabilities(self.blackbox.features(X))

    def features(self, X) -> np.ndarray:
        return self.blackbox.features(X)

    def head_logits(self, F: np.ndarray, k: int = -1) -> np.ndarray:
        with dc.no_grad():
            return self.heads[k](F).data

    def pi(self, C: np.ndarray) -> np.ndarray:
        if not self.selectors:
            return np.zeros((len(C), 0))
        return np.stack([s.pi(C) for s in self.selectors], axis=1)

    def truncated(self, K: int) -> "MoIEModel":
        """The first ``K`` iterations, with head ``h^K`` as the residual."""
        out = copy.copy(self)
        out.selectors = self.selectors[:K]
        out.experts = self.experts[:K]
        out.heads = self.heads[:K + 1]
        out.plans = self.plans[:K]
        out.ledger = self.ledger[:K]
        out.explanations = self.explanations[:K]
        return out

    # persistence -----------------------------------------------------------
    def manifest(self) -> dict:
        return {
            "n_experts": self.n_experts,
            "config": self.config.to_json(),
            "plans": [p.to_json() for p in self.plans],
            "ledger": self.ledger,
            "phi_hash": self.phi_hash,
            "d": self.blackbox.d,
            "blackbox_hidden": list(self.blackbox.hidden),
            "concept_names": list(self.projection.concept_names),
            "concept_aurocs": [None if np.isnan(a) else float(a) for a in self.projection.aurocs],
            "concept_accuracies": [float(a) for a in self.projection.accuracies],
            "admission_threshold": self.projection.threshold,
        }

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        dump = lambda obj, name: (path / name).write_text(json.dumps(obj, sort_keys=True, indent=1))
        dump(self.manifest(), "manifest.json")
        dump(dc.checkpoint_dict(self.blackbox), "blackbox.json")
        dump(dc.checkpoint_dict(self.projection.heads), "projection.json")
        for k, (s, g) in enumerate(zip(self.selectors, self.experts), start=1):
            dump(dc.checkpoint_dict(s), f"selector_{k}.json")
            dump(dc.checkpoint_dict(g), f"expert_{k}.json")
        for k, h in enumerate(self.heads):
            dump(dc.checkpoint_dict(h), f"head_{k}.json")
        names = self.concept_names
        dump([[e.to_json(names) for e in per] for per in self.explanations], "explanations.json")

    @classmethod
    def load(cls, path: str | Path) -> "MoIEModel":
        path = Path(path)
        read = lambda name: json.loads((path / name).read_text())
        man = read("manifest.json")
        cfg = DistillConfig.from_json(man["config"])
        bb = Blackbox(man["d"], tuple(man["blackbox_hidden"]))
        dc.load_checkpoint_dict(bb, read("blackbox.json"))
        bb.freeze_phi()
        n_c = len(man["concept_names"])
        heads = dc.Linear(bb.d_features, n_c, np.random.default_rng(0), name="t")
        dc.load_checkpoint_dict(heads, read("projection.json"))
        heads.freeze()
        aur = np.array([np.nan if a is None else a for a in man["concept_aurocs"]])
        proj = Projection(heads, aur, np.asarray(man["concept_accuracies"]), man["concept_names"],
                          man["admission_threshold"])
        model = cls(bb, proj, cfg)
        n_a = proj.admitted.size
        for k in range(1, man["n_experts"] + 1):
            s = Selector(n_a, cfg.selector_hidden, k=k - 1)
            dc.load_checkpoint_dict(s, read(f"selector_{k}.json"))
            g = EntropyLogicExpert(n_a, cfg.hidden, cfg.temperature_lens, cfg.lambda_lens)
            dc.load_checkpoint_dict(g, read(f"expert_{k}.json"))
            s.freeze()
            g.freeze()
            model.selectors.append(s)
            model.experts.append(g)
        model.heads = []
        for k in range(man["n_experts"] + 1):
            h = dc.Linear(bb.d_features, 2, np.random.default_rng(0), name="head")
            dc.load_checkpoint_dict(h, read(f"head_{k}.json"))
            h.freeze()
            model.heads.append(h)
        model.heads[0] = bb.head
        model.plans = [CoveragePlan.from_json(p) for p in man["plans"]]
        model.ledger = man["ledger"]
        model.explanations = [[FOLExplanation.from_json(e) for e in per]
                              for per in read("explanations.json")]
        model.phi_hash = man["phi_hash"]
        return model


def _hashes(modules) -> list[str]:
    return [dc.param_hash(m) for m in modules]


def _concepts_for(model: MoIEModel, data: ConceptTriplet, F: np.ndarray, true: bool) -> np.ndarray:
    if true:
        return np.asarray(data.C, dtype=float)[:, model.concept_index]
    return model.projection.probabilities(F)


def run_moie(blackbox: Blackbox, projection: Projection, train: ConceptTriplet,
             val: ConceptTriplet, cfg: DistillConfig | None = None) -> MoIEModel:
    """Carve the blackbox into experts until the stopping rule fires."""
    cfg = cfg or DistillConfig()
    blackbox.freeze_phi()
    model = MoIEModel(blackbox, projection, cfg)
    F_tr, F_va = blackbox.features(train.X), blackbox.features(val.X)
    C_tr = _concepts_for(model, train, F_tr, cfg.use_true_concepts)
    C_va = _concepts_for(model, val, F_va, cfg.use_true_concepts)
    y_tr, y_va = train.Y, val.Y
    w = class_weights(train)
    cum_tr, cum_va = np.ones(train.n), np.ones(val.n)
    free_tr, free_va = np.ones(train.n, bool), np.ones(val.n, bool)
    covered_tr = covered_va = 0.0

    for k in range(cfg.max_experts):
        plan = CoveragePlan(cfg.tau(k), w, cfg.lambda_s)
        teach_tr = model.head_logits(F_tr, k)
        teach_va = model.head_logits(F_va, k)
        before = _hashes(model.selectors + model.experts)
        res = train_iteration(k, C_tr, y_tr, teach_tr, cum_tr, C_va, y_va, teach_va, cum_va,
                              plan, cfg, seed=cfg.seed)
        if _hashes(model.selectors + model.experts) != before:
            raise RuntimeError("earlier iterations changed while training iteration %d" % (k + 1))
        sel, exp = res.selector, res.expert
        calibration = None
        if cfg.calibration_margin is not None:
            calibration = calibrate_threshold(sel, C_tr, y_tr,
                                              plan.per_class * (1.0 + cfg.calibration_margin),
                                              available=free_tr)
        pi_tr, pi_va = sel.pi(C_tr), sel.pi(C_va)
        soft_tr, hard_tr = empirical_coverage(pi_tr, y_tr, weights=cum_tr, available=free_tr)
        soft_va, hard_va = empirical_coverage(pi_va, y_va, weights=cum_va, available=free_va)

        g_tr, g_va = exp.logits(C_tr), exp.logits(C_va)
        r_tr, r_va = teach_tr - g_tr, teach_va - g_va
        decomposition_error = float(max(np.abs(g_tr + r_tr - teach_tr).max(),
                                        np.abs(g_va + r_va - teach_va).max()))
        cum_tr, cum_va = cum_tr * (1.0 - pi_tr), cum_va * (1.0 - pi_va)
        head, res_hist = fit_residual(model.heads[-1], F_tr, r_tr, cum_tr, F_va, r_va, cum_va,
                                      cfg, seed=cfg.seed + k)

        new_tr, new_va = free_tr & (pi_tr >= 0.5), free_va & (pi_va >= 0.5)
        free_tr, free_va = free_tr & ~new_tr, free_va & ~new_va
        covered_tr, covered_va = 1.0 - free_tr.mean(), 1.0 - free_va.mean()

        model.selectors.append(sel)
        model.experts.append(exp)
        model.heads.append(head)
        model.plans.append(plan)
        rec = dict(res.record)
        rec.update({
            "train_soft_coverage": soft_tr.tolist(), "train_hard_coverage": hard_tr.tolist(),
            "val_soft_coverage": soft_va.tolist(), "val_hard_coverage": hard_va.tolist(),
            "val_hard_share": (hard_va * np.bincount(y_va, minlength=2) / val.n).tolist(),
            "train_hard_share": (hard_tr * w).tolist(),
            "cumulative_train_coverage": float(covered_tr),
            "cumulative_val_coverage": float(covered_va),
            "decomposition_error": decomposition_error,
            "calibration": calibration,
            "prior_hashes": before,
            "selector_hash": dc.param_hash(sel),
            "expert_hash": dc.param_hash(exp),
            "phi_hash": dc.param_hash(blackbox.phi),
            "residual_history": res_hist,
        })
        model.ledger.append(rec)
        if covered_tr >= cfg.stop_coverage:
            break

    if dc.param_hash(blackbox.phi) != model.phi_hash:
        raise RuntimeError("feature extractor changed during distillation")
    attach_explanations(model, C_tr, y_tr)
    return model


def attach_explanations(model: MoIEModel, C: np.ndarray, y: np.ndarray) -> None:
    """Extract per-class FOL formulas for every expert from the samples it covers."""
    routes = route_from_pi(model.pi(C)) if model.selectors else np.full(len(C), RESIDUAL)
    model.explanations = []
    for k, expert in enumerate(model.experts):
        rows = routes == k
        if not rows.any():
            model.explanations.append([])
            continue
        model.explanations.append(extract_fol(
            expert, C[rows], y[rows], attention_quantile=model.config.attention_quantile,
            concept_index=model.concept_index, expert_id=k + 1))


# inference -------------------------------------------------------------------

@dataclass
class RouteTrace:
    route: np.ndarray              # expert index (0-based) or RESIDUAL
    pi: np.ndarray                 # N x K selector outputs
    logits: np.ndarray             # N x 2, from the routed component
    concepts: np.ndarray           # N x n_admitted concept probabilities
    explanation: list              # FOL text per sample, None for residual rows

    @property
    def label(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)

    @property
    def prob1(self) -> np.ndarray:
        z = self.logits[:, 1] - self.logits[:, 0]
        return 1.0 / (1.0 + np.exp(-z))

    @property
    def covered(self) -> np.ndarray:
        return self.route != RESIDUAL

    def coverage(self, n_experts: int) -> np.ndarray:
        """Fraction routed to each expert, then the residual fraction."""
        counts = np.array([(self.route == k).sum() for k in range(n_experts)]
                          + [(self.route == RESIDUAL).sum()])
        return counts / max(len(self.route), 1)

    def to_csv(self, path: str | Path, sample_ids=None) -> None:
        ids = np.arange(len(self.route)) if sample_ids is None else sample_ids
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "route", "pi", "predicted_label", "formula"])
            for i in range(len(self.route)):
                r = "residual" if self.route[i] == RESIDUAL else f"expert_{self.route[i] + 1}"
                w.writerow([int(ids[i]), r, ";".join(repr(float(p)) for p in self.pi[i]),
                            int(self.label[i]), self.explanation[i] or ""])


def predict(model: MoIEModel, X, C_override: np.ndarray | None = None) -> RouteTrace:
    F = model.features(X)
    C = model.projection.probabilities(F) if C_override is None else np.asarray(C_override, float)
    pi = model.pi(C)
    routes = route_from_pi(pi) if model.selectors else np.full(len(C), RESIDUAL)
    logits = model.head_logits(F, -1).copy()
    texts: list = [None] * len(C)
    names = model.concept_names
    for k, expert in enumerate(model.experts):
        rows = routes == k
        if not rows.any():
            continue
        logits[rows] = expert.logits(C[rows])
        pred = np.argmax(logits[rows], axis=1)
        per = model.explanations[k] if k < len(model.explanations) else []
        by_class = {e.target_class: e.to_text(names) for e in per}
        for i, p in zip(np.flatnonzero(rows), pred):
            texts[i] = by_class.get(int(p), "False")
    return RouteTrace(routes, pi, logits, C, texts)
