"""End-to-end stages shared by the command line and the benchmark suite.

In-memory runners (:func:`run_source`, :func:`run_transfer`) do the work;
the ``*_stage`` functions wrap them with on-disk artifacts and manifests.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .blackbox import Blackbox, Projection, train_blackbox, train_projection
from .config import ExperimentConfig
from .datagen import (ConceptTriplet, ShiftConfig, apply_domain_shift, generate_synthetic,
                      load_csv, random_shift, save_csv, split)
from .metrics import MetricsReport, evaluate_moie, safe_auroc
from .pipeline import MoIEModel, predict, run_moie
from .transfer import (complete_triplet, finetune_blackbox, finetune_moie, pseudo_label_concepts,
                       train_target_projection)

__all__ = [
    "MissingArtifactError",
    "SourceRun",
    "make_splits",
    "run_source",
    "target_splits",
    "run_transfer",
    "save_blackbox",
    "load_blackbox",
    "write_manifest",
    "synth_stage",
    "train_bb_stage",
    "distill_stage",
    "transfer_stage",
    "report_stage",
    "explain_samples",
]

SPLITS = ("train", "val", "test")


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, needed_by: str):
        self.path = Path(path)
        super().__init__(f"{needed_by} needs {self.path}, which does not exist")


# in-memory runners --------------------------------------------------------------

@dataclass
class SourceRun:
    seed: int
    train: ConceptTriplet
    val: ConceptTriplet
    test: ConceptTriplet
    blackbox: Blackbox
    projection: Projection
    model: MoIEModel | None = None
    timing: dict = field(default_factory=dict)


def make_splits(cfg: ExperimentConfig) -> tuple[ConceptTriplet, ConceptTriplet, ConceptTriplet]:
    data = generate_synthetic(cfg.datagen)
    return split(data, cfg.split, seed=cfg.datagen.seed)


def run_source(cfg: ExperimentConfig, distill: bool = True) -> SourceRun:
    """Generate, train the blackbox and projection, then carve the mixture (one seed)."""
    seed = cfg.seeds[0]
    t0 = time.perf_counter()
    tr, va, te = make_splits(cfg)
    bb = train_blackbox(tr, va, cfg.blackbox)
    pr = train_projection(bb, tr, va, cfg.projection)
    t1 = time.perf_counter()
    run = SourceRun(seed, tr, va, te, bb, pr, timing={"blackbox_s": t1 - t0})
    if distill:
        run.model = run_moie(bb, pr, tr, va, cfg.distill)
        run.timing["distill_s"] = time.perf_counter() - t1
    return run


def target_splits(cfg: ExperimentConfig):
    """Fresh rows of the source world, shifted (or not, with ``shift.identity``)."""
    seed = cfg.seeds[0]
    raw = generate_synthetic(dataclasses.replace(cfg.datagen, sample_seed=cfg.shift.sample_seed))
    if cfg.shift.identity:
        shift = ShiftConfig(seed=seed)
    else:
        shift = random_shift(raw.d, cfg.shift.strength, seed,
                             subgroup_weights=cfg.shift.subgroup_weights)
    target = apply_domain_shift(raw, shift)
    return split(target, cfg.split, seed=seed), shift


def run_transfer(cfg: ExperimentConfig, blackbox: Blackbox, projection: Projection,
                 model: MoIEModel, modes=("selectors_only", "joint")) -> dict:
    """Pseudo-label, fine-tune the mixture and the blackbox, score both on target test."""
    seed = cfg.seeds[0]
    tcfg = cfg.transfer
    (ttr, tva, tte), shift = target_splits(cfg)
    n_t = tcfg.labeled_count(ttr.n)
    labels = pseudo_label_concepts(blackbox, projection, ttr, n_t, seed)
    target_proj, proj_report = train_target_projection(blackbox, projection, labels, ttr.X, tcfg)
    ctr, cva, cte = (complete_triplet(target_proj, blackbox, t) for t in (ttr, tva, tte))
    labeled = ctr.subset(labels.drawn)
    z0 = blackbox.logits(tte.X)
    out = {
        "seed": seed,
        "n_labeled": int(n_t),
        "labeled_fraction": tcfg.labeled_fraction,
        "pseudo_label_accuracy": labels.accuracy(ttr.C[labels.indices][:, projection.admitted]),
        "pseudo_label_kept": labels.kept_fraction,
        "source_projection_accuracy": float(projection.accuracies[projection.admitted].mean()),
        "target_projection": proj_report,
        "source_blackbox_auroc": safe_auroc(z0[:, 1] - z0[:, 0], tte.Y),
        "shift_identity": bool(cfg.shift.identity),
        "models": {},
        "ledgers": {},
    }
    fitted = {}
    for mode in modes:
        tm, ledger = finetune_moie(model, labeled, cva, target_proj, tcfg, mode)
        trace = predict(tm, tte.X)
        cov = trace.covered
        out["models"][f"moie_{mode}"] = {
            "auroc": safe_auroc(trace.prob1, tte.Y),
            "covered_auroc": safe_auroc(trace.prob1[cov], tte.Y[cov]) if cov.any() else None,
            "coverage": float(cov.mean()), "flops": ledger.total}
        out["ledgers"][f"moie_{mode}"] = ledger
        fitted[f"moie_{mode}"] = tm
    bbt, bled = finetune_blackbox(blackbox, ttr.subset(labels.drawn), tva, tcfg)
    z = bbt.logits(tte.X)
    out["models"]["blackbox_finetune"] = {"auroc": safe_auroc(z[:, 1] - z[:, 0], tte.Y),
                                          "covered_auroc": None, "coverage": 1.0,
                                          "flops": bled.total}
    out["ledgers"]["blackbox_finetune"] = bled
    out["fitted"] = fitted
    return out


def transfer_rows(result: dict) -> list[dict]:
    """Flatten a transfer result into rows for the FLOPs-vs-AUROC table."""
    return [{"seed": result["seed"], "model": name, "labeled_fraction": result["labeled_fraction"],
             "flops": m["flops"], "auroc": m["auroc"]} for name, m in result["models"].items()]


# persistence ---------------------------------------------------------------------

def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1))


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_blackbox(bb: Blackbox, proj: Projection, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _dump(dc.checkpoint_dict(bb), d / "blackbox.json")
    _dump(dc.checkpoint_dict(proj.heads), d / "projection.json")
    _dump({"d": bb.d, "hidden": list(bb.hidden), "concept_names": list(proj.concept_names),
           "aurocs": [None if np.isnan(a) else float(a) for a in proj.aurocs],
           "accuracies": [float(a) for a in proj.accuracies], "threshold": proj.threshold,
           "admitted": proj.admitted.tolist(), "history": bb.history},
          d / "blackbox_meta.json")


def load_blackbox(directory: str | Path) -> tuple[Blackbox, Projection]:
    d = Path(directory)
    for name in ("blackbox.json", "projection.json", "blackbox_meta.json"):
        if not (d / name).exists():
            raise MissingArtifactError(d / name, "loading the blackbox")
    meta = json.loads((d / "blackbox_meta.json").read_text())
    bb = Blackbox(meta["d"], tuple(meta["hidden"]))
    dc.load_checkpoint(bb, d / "blackbox.json")
    bb.freeze_phi()
    heads = dc.Linear(bb.d_features, len(meta["concept_names"]), np.random.default_rng(0), name="t")
    dc.load_checkpoint(heads, d / "projection.json")
    heads.freeze()
    aur = np.array([np.nan if a is None else a for a in meta["aurocs"]])
    proj = Projection(heads, aur, np.asarray(meta["accuracies"]), meta["concept_names"],
                      meta["threshold"])
    return bb, proj


def write_manifest(directory: str | Path, command: str, cfg: ExperimentConfig, seed: int,
                   artifacts: list[Path], extra: dict | None = None,
                   wall_time: float | None = None) -> Path:
    """``manifest.json`` (deterministic) plus ``timing.json`` (wall clock, not reproducible)."""
    d = Path(directory)
    # the output location is not part of the experiment, so runs written to
    # different directories share manifests byte for byte
    config = {k: v for k, v in cfg.to_json().items() if k != "out"}
    payload = {
        "command": command,
        "seed": seed,
        "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "config": config,
        "artifacts": {str(Path(p).relative_to(d)): _sha256(p) for p in sorted(artifacts)},
    }
    if extra:
        payload.update(extra)
    path = d / f"manifest_{command}.json"
    _dump(payload, path)
    if wall_time is not None:
        _dump({"command": command, "wall_time_s": wall_time}, d / f"timing_{command}.json")
    return path


def seed_dir(out: str | Path, seed: int) -> Path:
    return Path(out) / f"seed_{seed}"


def _require(path: Path, needed_by: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, needed_by)
    return path


def _load_splits(data_dir: Path, needed_by: str):
    return tuple(load_csv(_require(data_dir / f"{s}.csv", needed_by)) for s in SPLITS)


# stages ----------------------------------------------------------------------------

def synth_stage(cfg: ExperimentConfig, out: str | Path) -> list[Path]:
    manifests = []
    for seed in cfg.seeds:
        c = cfg.for_seed(seed)
        t0 = time.perf_counter()
        d = seed_dir(out, seed) / "data"
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, part in zip(SPLITS, make_splits(c)):
            p = d / f"{name}.csv"
            save_csv(part, p)
            paths.append(p)
        manifests.append(write_manifest(d, "synth", c, seed, paths,
                                        wall_time=time.perf_counter() - t0))
    return manifests


def train_bb_stage(cfg: ExperimentConfig, out: str | Path) -> list[Path]:
    manifests = []
    for seed in cfg.seeds:
        c = cfg.for_seed(seed)
        root = seed_dir(out, seed)
        t0 = time.perf_counter()
        tr, va, _ = _load_splits(root / "data", "train-bb")
        bb = train_blackbox(tr, va, c.blackbox)
        pr = train_projection(bb, tr, va, c.projection)
        d = root / "blackbox"
        save_blackbox(bb, pr, d)
        paths = [d / n for n in ("blackbox.json", "projection.json", "blackbox_meta.json")]
        v = bb.logits(va.X)
        manifests.append(write_manifest(
            d, "train-bb", c, seed, paths,
            extra={"val_auroc": safe_auroc(v[:, 1] - v[:, 0], va.Y),
                   "admitted_concepts": pr.admitted_names},
            wall_time=time.perf_counter() - t0))
    return manifests


def distill_stage(cfg: ExperimentConfig, out: str | Path) -> list[Path]:
    manifests = []
    for seed in cfg.seeds:
        c = cfg.for_seed(seed)
        root = seed_dir(out, seed)
        _require(root / "blackbox" / "blackbox.json", "distill")
        bb, pr = load_blackbox(root / "blackbox")
        tr, va, _ = _load_splits(root / "data", "distill")
        t0 = time.perf_counter()
        model = run_moie(bb, pr, tr, va, c.distill)
        d = root / "moie"
        model.save(d)
        paths = sorted(p for p in d.glob("*.json") if not p.name.startswith(("manifest_", "timing_")))
        manifests.append(write_manifest(
            d, "distill", c, seed, paths,
            extra={"n_experts": model.n_experts,
                   "cumulative_train_coverage": model.ledger[-1]["cumulative_train_coverage"]},
            wall_time=time.perf_counter() - t0))
    return manifests


def transfer_stage(cfg: ExperimentConfig, out: str | Path) -> list[Path]:
    manifests = []
    for seed in cfg.seeds:
        c = cfg.for_seed(seed)
        root = seed_dir(out, seed)
        _require(root / "moie" / "manifest.json", "transfer")
        model = MoIEModel.load(root / "moie")
        t0 = time.perf_counter()
        result = run_transfer(c, model.blackbox, model.projection, model)
        d = root / "transfer"
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, ledger in result["ledgers"].items():
            ledger.save_json(d / f"flops_{name}.json")
            ledger.to_csv(d / f"flops_{name}.csv")
            paths += [d / f"flops_{name}.json", d / f"flops_{name}.csv"]
        result["fitted"]["moie_joint"].save(d / "moie_joint")
        summary = {k: v for k, v in result.items() if k not in ("ledgers", "fitted")}
        _dump(summary, d / "transfer.json")
        paths.append(d / "transfer.json")
        paths += sorted((d / "moie_joint").glob("*.json"))
        manifests.append(write_manifest(
            d, "transfer", c, seed, paths,
            extra={"flops": {k: v.total for k, v in result["ledgers"].items()}},
            wall_time=time.perf_counter() - t0))
    return manifests


def report_stage(cfg: ExperimentConfig, out: str | Path) -> list[Path]:
    per_seed, transfer = [], []
    t0 = time.perf_counter()
    for seed in cfg.seeds:
        root = seed_dir(out, seed)
        _require(root / "moie" / "manifest.json", "report")
        model = MoIEModel.load(root / "moie")
        _, _, te = _load_splits(root / "data", "report")
        per_seed.append(evaluate_moie(model, te))
        tj = root / "transfer" / "transfer.json"
        if tj.exists():
            transfer += transfer_rows(json.loads(tj.read_text()))
    report = MetricsReport(list(cfg.seeds), per_seed, transfer)
    d = Path(out) / "report"
    paths = report.save(d)
    return [write_manifest(d, "report", cfg, cfg.seeds[0], paths,
                           wall_time=time.perf_counter() - t0)]


def explain_samples(model: MoIEModel, data: ConceptTriplet, ids) -> list[dict]:
    """Route, selector outputs, prediction and formula text for the requested rows."""
    ids = [int(i) for i in ids]
    bad = [i for i in ids if not 0 <= i < data.n]
    if bad:
        raise IndexError(f"unknown sample id {bad[0]} (valid: 0..{data.n - 1})")
    trace = predict(model, data.X[ids])
    rows = []
    for j, i in enumerate(ids):
        r = int(trace.route[j])
        rows.append({
            "sample_id": i,
            "route": "residual" if r < 0 else f"expert_{r + 1}",
            "pi": [float(p) for p in trace.pi[j]],
            "predicted_label": int(trace.label[j]),
            "probability": float(trace.prob1[j]),
            "explanation": trace.explanation[j],
        })
    return rows
