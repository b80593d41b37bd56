"""Carry a trained mixture to a shifted target domain.

Steps: pseudo-label target concepts with the source trunk and projection,
learn a target projection by self-training, complete the target triplet,
then fine-tune the first ``k_transfer`` selector/expert pairs and the final
residual head. Every training phase is costed with an analytic FLOP ledger.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .blackbox import Blackbox, Projection, TrainingDivergedError, _concept_scores, auto_batch_size
from .datagen import ConceptTriplet, class_weights
from .metrics import safe_auroc
from .pipeline import DistillConfig, MoIEModel, attach_explanations, fit_residual, train_iteration
from .selectors import CoveragePlan, SelectorCollapseError, calibrate_threshold, empirical_coverage

__all__ = [
    "TransferConfig",
    "LayerSpec",
    "FlopPhase",
    "FlopLedger",
    "count_flops",
    "PseudoLabels",
    "pseudo_label_concepts",
    "train_target_projection",
    "complete_triplet",
    "finetune_moie",
    "finetune_blackbox",
]


@dataclass
class TransferConfig:
    labeled_fraction: float = 0.1
    n_t: int | None = None              # overrides labeled_fraction when set
    k_transfer: int = 3
    epochs: int = 5
    blackbox_epochs: int | None = None  # None: same as ``epochs``
    blackbox_lr: float = 0.001
    confidence: float = 0.8
    ramp_fraction: float = 0.5
    projection_epochs: int = 20
    projection_lr: float = 0.01
    schedule: list[float] | None = None  # None: source coverage plan
    seed: int = 0

    def labeled_count(self, n_target: int) -> int:
        n = self.n_t if self.n_t is not None else int(round(self.labeled_fraction * n_target))
        if not 1 <= n <= n_target:
            raise ValueError(f"labeled budget {n} outside [1, {n_target}]")
        return n

    def to_json(self) -> dict:
        return asdict(self)


# FLOP accounting ---------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """One costed op per sample: ``affine`` (d_in x d_out) or ``elementwise`` (d_in elements)."""
    kind: str
    d_in: int
    d_out: int = 0
    trainable: bool = True

    def forward(self) -> int:
        if self.kind == "affine":
            return 2 * self.d_in * self.d_out
        if self.kind == "elementwise":
            return self.d_in
        raise ValueError(f"unknown layer kind {self.kind!r}")

    def backward(self) -> int:
        # affine backward (input and weight gradients) costs twice the forward;
        # an elementwise op costs one flop per element either way
        return 2 * self.forward() if self.kind == "affine" else self.forward()


@dataclass
class FlopPhase:
    name: str
    forward_per_sample: int
    backward_per_sample: int
    batch_size: int
    batches: int
    epochs: int

    @property
    def total(self) -> int:
        return ((self.forward_per_sample + self.backward_per_sample)
                * self.batch_size * self.batches * self.epochs)

    def to_json(self) -> dict:
        out = asdict(self)
        out["total"] = self.total
        return out


@dataclass
class FlopLedger:
    phases: list[FlopPhase] = field(default_factory=list)

    def add(self, phase: FlopPhase) -> FlopPhase:
        self.phases.append(phase)
        return phase

    def extend(self, other: "FlopLedger") -> None:
        self.phases.extend(other.phases)

    @property
    def total(self) -> int:
        return int(sum(p.total for p in self.phases))

    def to_json(self) -> dict:
        return {"phases": [p.to_json() for p in self.phases], "total": self.total}

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "forward_per_sample", "backward_per_sample", "batch_size",
                        "batches", "epochs", "total"])
            for p in self.phases:
                w.writerow([p.name, p.forward_per_sample, p.backward_per_sample, p.batch_size,
                            p.batches, p.epochs, p.total])


def count_flops(layers: list[LayerSpec], batch_size: int, batches: int, epochs: int,
                name: str = "phase", train: bool = True) -> FlopPhase:
    """Cost of a run over trainable layers; ``train=False`` counts forward only."""
    live = [l for l in layers if l.trainable]
    fwd = int(sum(l.forward() for l in live))
    bwd = int(sum(l.backward() for l in live)) if train else 0
    return FlopPhase(name, fwd, bwd, int(batch_size), int(batches), int(epochs))


def mlp_specs(sizes, relu_after_last: bool = False, trainable: bool = True) -> list[LayerSpec]:
    specs = []
    last = len(sizes) - 2
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        specs.append(LayerSpec("affine", a, b, trainable))
        if i < last or relu_after_last:
            specs.append(LayerSpec("elementwise", b, 0, trainable))
    return specs


def blackbox_specs(bb: Blackbox) -> list[LayerSpec]:
    specs = mlp_specs([bb.d, *bb.hidden], relu_after_last=True)
    specs.append(LayerSpec("affine", bb.d_features, 2))
    specs.append(LayerSpec("elementwise", 2))          # softmax
    return specs


def selector_specs(n_concepts: int, hidden: int) -> list[LayerSpec]:
    return [LayerSpec("elementwise", n_concepts)] + mlp_specs([n_concepts, hidden, 1]) + [
        LayerSpec("elementwise", 1)]                  # centring, sigmoid


def expert_specs(n_concepts: int, hidden) -> list[LayerSpec]:
    return ([LayerSpec("elementwise", n_concepts)]      # attention mask
            + mlp_specs([n_concepts, *hidden, 2]) + [LayerSpec("elementwise", 2)])


def _n_batches(n: int, bs: int) -> int:
    return int(np.ceil(n / bs))


# pseudo-labelling and the target projection -----------------------------------

@dataclass
class PseudoLabels:
    indices: np.ndarray         # rows of the target data that were kept
    drawn: np.ndarray           # rows drawn before the correctness filter
    C: np.ndarray               # binarized pseudo concepts (admitted columns)
    Y: np.ndarray

    @property
    def kept_fraction(self) -> float:
        return self.indices.size / max(self.drawn.size, 1)

    def accuracy(self, C_true: np.ndarray) -> float:
        """Agreement with ground-truth concepts (same columns as ``C``)."""
        return float((self.C == (np.asarray(C_true) >= 0.5)).mean())


def pseudo_label_concepts(bb: Blackbox, projection: Projection, target: ConceptTriplet, n_t: int,
                          seed: int = 0) -> PseudoLabels:
    """Draw ``n_t`` target rows, keep those the source blackbox labels correctly."""
    if not 1 <= n_t <= target.n:
        raise ValueError(f"n_t must lie in [1, {target.n}]")
    rng = np.random.default_rng([seed, 500])
    drawn = np.sort(rng.choice(target.n, size=n_t, replace=False))
    F = bb.features(target.X[drawn])
    with dc.no_grad():
        pred = np.argmax(bb.head(F).data, axis=1)
    keep = pred == target.Y[drawn]
    if not keep.any():
        raise ValueError("source model unusable on target: no correctly classified samples")
    C = projection.probabilities(F[keep]) >= 0.5
    return PseudoLabels(drawn[keep], drawn, C.astype(int), target.Y[drawn[keep]])


def train_target_projection(bb: Blackbox, source: Projection, labels: PseudoLabels,
                            X_target: np.ndarray, cfg: TransferConfig,
                            holdout: float = 0.2) -> tuple[Projection, dict]:
    """Self-trained concept heads for the target, on frozen source features.

    Supervised BCE on the pseudo-labelled rows plus BCE on confident
    predictions for the remaining target rows, weighted by a linear ramp
    from 0 to 1 over the first ``ramp_fraction`` of training. Heads start
    from the admitted columns of the source projection. Model selection
    uses a held-out slice of the pseudo-labelled rows, or all of them when
    fewer than ten would be held out (flagged ``low_data``).
    """
    bb.freeze_phi()
    admitted = source.admitted
    F_all = bb.features(X_target)
    unl = np.setdiff1d(np.arange(len(X_target)), labels.indices)
    F_lab, C_lab = F_all[labels.indices], labels.C.astype(float)
    F_unl = F_all[unl]

    rng = np.random.default_rng([cfg.seed, 501])
    order = rng.permutation(len(F_lab))
    n_hold = int(round(holdout * len(F_lab)))
    low_data = n_hold < 10
    if low_data:
        fit_rows = sel_rows = order
    else:
        sel_rows, fit_rows = order[:n_hold], order[n_hold:]

    heads = dc.Linear(F_all.shape[1], admitted.size, rng, name="t_target")
    heads.W.data = source.heads.W.data[:, admitted].copy()
    heads.b.data = source.heads.b.data[admitted].copy()
    opt = dc.Adam(heads.parameters(), lr=cfg.projection_lr)
    bs_lab = auto_batch_size(len(fit_rows))
    bs_unl = auto_batch_size(len(F_unl)) if len(F_unl) else 0
    ramp_epochs = max(cfg.ramp_fraction * cfg.projection_epochs, 1e-12)

    def score():
        a, _ = _concept_scores(heads, F_lab[sel_rows], C_lab[sel_rows])
        return float(np.nanmean(a)) if not np.all(np.isnan(a)) else -np.inf

    best, best_state, history, confident_seen = score(), heads.state_dict(), [], 0
    for epoch in range(cfg.projection_epochs):
        weight = min(1.0, epoch / ramp_epochs)
        lab_batches = list(dc.minibatches(len(fit_rows), bs_lab, rng))
        n_steps = max(len(lab_batches),
                      _n_batches(len(F_unl), bs_unl) if bs_unl else 0)
        unl_batches = list(dc.minibatches(len(F_unl), bs_unl, rng)) if bs_unl else []
        n_conf = 0
        try:
            for step in range(n_steps):
                idx = fit_rows[lab_batches[step % len(lab_batches)]]
                opt.zero_grad()
                loss = dc.bce_with_logits(heads(F_lab[idx]), C_lab[idx]).mean()
                if weight > 0 and unl_batches:
                    Fu = F_unl[unl_batches[step % len(unl_batches)]]
                    with dc.no_grad():
                        p = 1.0 / (1.0 + np.exp(-heads(Fu).data))
                    mask = np.maximum(p, 1.0 - p) >= cfg.confidence
                    n_conf += int(mask.sum())
                    if mask.any():
                        per = dc.bce_with_logits(heads(Fu), (p >= 0.5).astype(float))
                        loss = loss + (per * dc.constant(mask / mask.size)).sum() * weight
                loss.backward()
                opt.step()
        except dc.NumericError as exc:
            raise TrainingDivergedError("target projection", epoch, exc) from exc
        confident_seen += n_conf
        v = score()
        history.append({"epoch": epoch, "unlabeled_weight": weight, "confident": n_conf,
                        "holdout_mean_auroc": v})
        if v > best:
            best, best_state = v, heads.state_dict()
    heads.load_state_dict(best_state)
    heads.freeze()
    aur, acc = _concept_scores(heads, F_lab[sel_rows], C_lab[sel_rows])
    names = [source.concept_names[j] for j in admitted]
    proj = Projection(heads, aur, acc, names, threshold=-np.inf, history=history)
    report = {"low_data": bool(low_data), "supervised_only": confident_seen == 0,
              "n_labeled": int(len(F_lab)), "n_unlabeled": int(len(F_unl)),
              "best_holdout_mean_auroc": best}
    return proj, report


def complete_triplet(target_projection: Projection, bb: Blackbox,
                     target: ConceptTriplet) -> ConceptTriplet:
    """Target triplet with concept probabilities from the target projection.

    Ground-truth concepts for the same columns (when the target carries them)
    are kept under ``extras["true_concepts"]`` for evaluation only.
    """
    C = target_projection.probabilities(bb.features(target.X))
    extras = dict(target.extras)
    names = list(target_projection.concept_names)
    if target.C.shape[1] >= 1 and set(names) <= set(target.concept_names):
        cols = [list(target.concept_names).index(n) for n in names]
        extras["true_concepts"] = np.asarray(target.C)[:, cols]
    return ConceptTriplet(target.X, C, target.Y, target.groups, target.subgroups,
                          split=target.split, concept_names=names, extras=extras,
                          meta=dict(target.meta, completed=True))


# fine-tuning --------------------------------------------------------------------

def _moie_phases(n: int, bs: int, n_concepts: int, cfg: DistillConfig, epochs: int,
                 k: int, joint: bool) -> list[FlopPhase]:
    phases = [count_flops(selector_specs(n_concepts, cfg.selector_hidden), bs,
                          _n_batches(n, bs), epochs, name=f"selector_{k}")]
    if joint:
        phases.append(count_flops(expert_specs(n_concepts, cfg.hidden), bs, _n_batches(n, bs),
                                  epochs, name=f"expert_{k}"))
    return phases


def finetune_moie(source: MoIEModel, train: ConceptTriplet, val: ConceptTriplet,
                  target_projection: Projection, cfg: TransferConfig | None = None,
                  mode: str = "joint") -> tuple[MoIEModel, FlopLedger]:
    """Fine-tune the first ``k_transfer`` iterations on a completed target triplet.

    ``train``/``val`` carry target-projection concepts in ``C``. Teachers are
    the source heads ``f^{k-1}`` on the frozen trunk. ``selectors_only``
    updates selectors and keeps experts and the residual head; ``joint``
    updates selectors and experts and refits the residual head.
    """
    cfg = cfg or TransferConfig()
    if mode not in ("selectors_only", "joint"):
        raise ValueError("mode must be 'selectors_only' or 'joint'")
    if cfg.epochs < 1:
        raise ValueError("fine-tuning needs at least one epoch")
    K = min(cfg.k_transfer, source.n_experts)
    if K < 1:
        raise ValueError("source mixture has no experts")
    joint = mode == "joint"
    bb = source.blackbox
    phi_hash = dc.param_hash(bb.phi)
    dcfg = source.config
    model = MoIEModel(bb, target_projection, dcfg)
    model.heads = list(source.heads[:K])
    F_tr, F_va = bb.features(train.X), bb.features(val.X)
    C_tr, C_va = np.asarray(train.C, float), np.asarray(val.C, float)
    y_tr, y_va = train.Y, val.Y
    w = class_weights(train)
    bs = dcfg.batch_size or auto_batch_size(train.n)
    ledger = FlopLedger()
    cum_tr, cum_va = np.ones(train.n), np.ones(val.n)
    free_tr, free_va = np.ones(train.n, bool), np.ones(val.n, bool)

    for k in range(K):
        tau = cfg.schedule[k] if cfg.schedule is not None else source.plans[k].tau
        plan = CoveragePlan(tau, w, dcfg.lambda_s)
        with dc.no_grad():
            teach_tr, teach_va = source.heads[k](F_tr).data, source.heads[k](F_va).data
        try:
            res = train_iteration(k, C_tr, y_tr, teach_tr, cum_tr, C_va, y_va, teach_va, cum_va,
                                  plan, dcfg, seed=cfg.seed, selector=source.selectors[k],
                                  expert=source.experts[k], train_expert=joint,
                                  epochs=cfg.epochs)
        except SelectorCollapseError as exc:
            soft, _ = empirical_coverage(source.selectors[k].pi(C_va), y_va, weights=cum_va)
            raise SelectorCollapseError(
                f"coverage collapsed on target at iteration {k + 1}; "
                f"per-class soft coverage {np.round(soft, 4).tolist()}", zeta=soft) from exc
        sel, exp = res.selector, res.expert
        calibration = None
        if dcfg.calibration_margin is not None:
            calibration = calibrate_threshold(sel, C_tr, y_tr,
                                              plan.per_class * (1.0 + dcfg.calibration_margin),
                                              available=free_tr)
        pi_tr, pi_va = sel.pi(C_tr), sel.pi(C_va)
        _, hard_va = empirical_coverage(pi_va, y_va, weights=cum_va, available=free_va)
        cum_tr, cum_va = cum_tr * (1.0 - pi_tr), cum_va * (1.0 - pi_va)
        free_tr &= pi_tr < 0.5
        free_va &= pi_va < 0.5
        model.selectors.append(sel)
        model.experts.append(exp)
        model.plans.append(plan)
        for phase in _moie_phases(train.n, bs, C_tr.shape[1], dcfg, cfg.epochs, k + 1, joint):
            ledger.add(phase)
        rec = dict(res.record)
        rec.update({"mode": mode, "val_hard_coverage": hard_va.tolist(),
                    "val_hard_share": (hard_va * np.bincount(y_va, minlength=2) / val.n).tolist(),
                    "cumulative_val_coverage": float(1.0 - free_va.mean()),
                    "calibration": calibration})
        model.ledger.append(rec)

    final = source.heads[K]
    if joint:
        g = model.experts[-1]
        with dc.no_grad():
            prev_tr, prev_va = source.heads[K - 1](F_tr).data, source.heads[K - 1](F_va).data
        r_tr, r_va = prev_tr - g.logits(C_tr), prev_va - g.logits(C_va)
        final, hist = fit_residual(final, F_tr, r_tr, cum_tr, F_va, r_va, cum_va, dcfg,
                                   seed=cfg.seed, epochs=cfg.epochs)
        model.ledger[-1]["residual_history"] = hist
        ledger.add(count_flops([LayerSpec("affine", bb.d_features, 2)], bs,
                               _n_batches(train.n, bs), cfg.epochs, name="residual_head"))
    model.heads.append(final)
    if dc.param_hash(bb.phi) != phi_hash:
        raise RuntimeError("feature extractor changed during transfer")
    attach_explanations(model, C_tr, y_tr)
    return model, ledger


def finetune_blackbox(bb: Blackbox, train: ConceptTriplet, val: ConceptTriplet,
                      cfg: TransferConfig | None = None) -> tuple[Blackbox, FlopLedger]:
    """Baseline: every blackbox layer trained on the labeled target rows."""
    cfg = cfg or TransferConfig()
    epochs = cfg.blackbox_epochs if cfg.blackbox_epochs is not None else cfg.epochs
    out = copy.deepcopy(bb)
    out.phi.unfreeze()
    out.head.unfreeze()
    opt = dc.Adam(out.parameters(), lr=cfg.blackbox_lr)
    rng = np.random.default_rng([cfg.seed, 502])
    bs = auto_batch_size(train.n)

    def val_score():
        z = out.logits(val.X)
        return safe_auroc(z[:, 1] - z[:, 0], val.Y)

    best, best_state = val_score(), out.state_dict()
    for epoch in range(epochs):
        try:
            for idx in dc.minibatches(train.n, bs, rng):
                opt.zero_grad()
                dc.cross_entropy(out(train.X[idx]), train.Y[idx]).mean().backward()
                opt.step()
        except dc.NumericError as exc:
            raise TrainingDivergedError("blackbox fine-tune", epoch, exc) from exc
        v = val_score()
        out.history.append({"epoch": epoch, "val_auroc": v, "phase": "finetune"})
        if v > best:
            best, best_state = v, out.state_dict()
    out.load_state_dict(best_state)
    out.freeze()
    ledger = FlopLedger([count_flops(blackbox_specs(out), bs, _n_batches(train.n, bs), epochs,
                                     name="blackbox_finetune")])
    return out, ledger
