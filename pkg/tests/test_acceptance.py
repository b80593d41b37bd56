"""Benchmark-level checks on the default synthetic setup.

Each test records a ``CRITERION n PASS|FAIL`` line that is echoed in the
terminal summary, then asserts. The five-seed benchmark is built once per
session (a few minutes on one core).
"""

import json
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moie import diffcore as dc
from moie.cli import run as cli_run
from moie.config import ExperimentConfig
from moie.experts import fol_fidelity
from moie.metrics import auroc, evaluate_moie
from moie.pipeline import predict, routing_weights
from moie.workflow import run_source, run_transfer

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2, 3, 4]


def _record(lines, n, name, ok, detail):
    lines.append(f"CRITERION {n} {'PASS' if ok else 'FAIL'} {name}: {detail}")
    print(lines[-1])
    return ok


def _source_seed(seed, concept_noise=None):
    cfg = ExperimentConfig().for_seed(seed)
    if concept_noise is not None:
        cfg.datagen.concept_noise = concept_noise
    return cfg, run_source(cfg)


@pytest.fixture(scope="session")
def bench():
    runs = []
    for seed in SEEDS:
        cfg, src = _source_seed(seed)
        shifted = run_transfer(cfg, src.blackbox, src.projection, src.model, modes=("joint",))
        cfg.shift.identity = True
        identity = run_transfer(cfg, src.blackbox, src.projection, src.model, modes=())
        runs.append({"seed": seed, "src": src, "eval": evaluate_moie(src.model, src.test),
                     "shifted": shifted, "identity": identity})
    return runs


@pytest.fixture(scope="session")
def clean_run():
    return _source_seed(0, concept_noise=0.0)[1]


# 1 -------------------------------------------------------------------------------

def _all_kinds_graph(draw, params):
    r = np.random.default_rng([draw, 7])
    X = r.normal(size=(6, 4))
    W, b, g = params
    h = dc.affine(dc.constant(X), W, b)
    a = dc.concat([dc.relu(h), dc.sigmoid(h)], axis=1)
    fold = dc.constant(np.vstack([np.eye(3), np.eye(3)]))
    z = dc.mul(dc.matmul(a, fold), dc.softmax(g))
    loss = dc.cross_entropy(z, r.integers(0, 3, 6)).mean()
    loss = loss + dc.kd_kl(z, r.normal(size=(6, 3)), 3.0).mean()
    loss = loss + dc.mse(z, r.normal(size=(6, 3))).mean()
    return loss + dc.bce_with_logits(h, (X[:, :3] > 0).astype(float)).mean()


def test_criterion_01_gradient_check(acceptance_lines):
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    for draw in range(10):
        r = np.random.default_rng([draw, 8])
        params = [dc.parameter(r.normal(size=(4, 3))), dc.parameter(r.normal(size=3)),
                  dc.parameter(r.normal(size=3))]
        res = dc.grad_check(lambda: _all_kinds_graph(draw, params), params)
        worst, checked = max(worst, res.max_rel_error), checked + res.n_checked
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 10 and checked > 0
    assert _record(acceptance_lines, 1, "gradient check", ok,
                   f"max rel error {worst:.2e} over 10 graphs, {elapsed:.2f} s")


# 2 -------------------------------------------------------------------------------

def test_criterion_02_coverage_constraint(bench, acceptance_lines):
    gaps = {}
    for r in bench:
        for rec in r["src"].model.ledger:
            gap = np.array(rec["val_hard_share"]) - np.array(rec["tau_per_class"])
            gaps.setdefault(rec["k"], []).append(gap)
    medians = {k: np.median(np.stack(v), axis=0) for k, v in gaps.items()}
    worst = min(float(m.min()) for m in medians.values())
    detail = "; ".join(f"k={k}: {np.round(m, 4).tolist()}" for k, m in sorted(medians.items()))
    assert _record(acceptance_lines, 2, "coverage constraint", worst >= -0.02,
                   f"median hard share minus target per class, {detail}")


# 3 -------------------------------------------------------------------------------

def test_criterion_03_fidelity_to_blackbox(bench, acceptance_lines):
    covered = np.median([r["eval"]["moie_auroc"] - r["eval"]["blackbox_auroc"] for r in bench])
    full = np.median([r["eval"]["moie_r_auroc"] - r["eval"]["blackbox_auroc"] for r in bench])
    ok = covered >= -0.02 and full >= -0.03
    bb = np.median([r["eval"]["blackbox_auroc"] for r in bench])
    assert _record(acceptance_lines, 3, "fidelity to blackbox", ok,
                   f"blackbox {bb:.3f}, mixture minus blackbox {covered:+.3f} on covered, "
                   f"{full:+.3f} with residual")


# 4 -------------------------------------------------------------------------------

def test_criterion_04_weight_telescoping(bench, acceptance_lines):
    model = bench[0]["src"].model
    C = np.random.default_rng(4).random((1000, model.concept_index.size))
    w = routing_weights(model.pi(C))
    err = float(np.abs(w.sum(axis=1) - 1.0).max())
    assert _record(acceptance_lines, 4, "routing weights sum to one", err < 1e-9,
                   f"max |sum - 1| = {err:.1e} over 1000 samples, K={model.n_experts}")


# 5 -------------------------------------------------------------------------------

def test_criterion_05_logit_decomposition(bench, acceptance_lines):
    err = max(rec["decomposition_error"] for r in bench for rec in r["src"].model.ledger)
    assert _record(acceptance_lines, 5, "logit decomposition", err < 1e-9,
                   f"max |g + r - f_prev| = {err:.1e}")


# 6 -------------------------------------------------------------------------------

def test_criterion_06_residual_hardness(bench, acceptance_lines):
    gaps = []
    for r in bench:
        h = r["eval"]["hardness"]
        last = h["rows"][-1]["auroc"]
        gaps.append(np.nan if last is None else h["global_auroc"] - last)
    med = float(np.nanmedian(gaps)) if not np.all(np.isnan(gaps)) else np.nan
    assert _record(acceptance_lines, 6, "residual hardness", med >= 0.02,
                   f"median global minus final-residual f0 AUROC {med:.3f} "
                   f"(per seed {np.round(gaps, 3).tolist()})")


# 7 -------------------------------------------------------------------------------

def _purities(model, test):
    trace = predict(model, test.X)
    out = []
    for k in range(model.n_experts):
        sg = test.subgroups[trace.route == k]
        out.append(float(np.bincount(sg, minlength=2).max() / sg.size) if sg.size else 0.0)
    return out, trace


def test_criterion_07_specialization(bench, acceptance_lines):
    best, differs = [], []
    for r in bench:
        m = r["src"].model
        pur, _ = _purities(m, r["src"].test)
        best.append(max(pur))
        orders = {tuple(np.argsort(-g.attention(), kind="stable")) for g in m.experts}
        differs.append(len(orders) > 1)
    med = float(np.median(best))
    ok = med >= 0.7 and np.median(differs) >= 0.5
    assert _record(acceptance_lines, 7, "expert specialization", ok,
                   f"median best subgroup purity {med:.3f}, attention orders differ in "
                   f"{sum(differs)}/{len(differs)} seeds")


# 8 -------------------------------------------------------------------------------

def test_criterion_08_formula_recovery(clean_run, acceptance_lines):
    m, te = clean_run.model, clean_run.test
    pur, trace = _purities(m, te)
    k = int(np.argmax(pur))
    rows = trace.route == k
    sg, y = te.subgroups[rows], te.Y[rows]
    pos = sg[y == 1] if (y == 1).any() else sg
    rule = te.meta["rules"][int(np.bincount(pos, minlength=2).argmax())]
    expl = next((e for e in m.explanations[k] if e.target_class == 1), None)
    if expl is None:
        fid, contains, text = 0.0, False, "no class-1 formula"
    else:
        fid = fol_fidelity(expl, m.experts[k], trace.concepts[rows],
                           concept_index=m.concept_index)
        contains = expl.formula.contains_disjunct(rule.terms[0])
        text = expl.to_text()
    ok = fid >= 0.9 and contains
    assert _record(acceptance_lines, 8, "formula recovery", ok,
                   f"expert {k + 1} (purity {pur[k]:.2f}), planted {rule.to_text()}, "
                   f"contains={contains}, fidelity {fid:.3f}, formula {text}")


# 9 -------------------------------------------------------------------------------

def _pair_count(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    halves = 2 * int((pos[:, None] > neg[None, :]).sum()) + int((pos[:, None] == neg[None, :]).sum())
    return (halves / 2) / (pos.size * neg.size)


def test_criterion_09_auroc_oracle(acceptance_lines):
    r = np.random.default_rng(9)
    mismatches = 0
    for _ in range(100):
        n = int(r.integers(2, 201))
        labels = r.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = r.integers(0, int(r.integers(2, 12)), n) / 4.0    # coarse grid: many ties
        mismatches += auroc(scores, labels) != _pair_count(scores, labels)
    assert _record(acceptance_lines, 9, "AUROC oracle", mismatches == 0,
                   f"{mismatches} mismatches in 100 instances")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=200))
def test_auroc_oracle_property(rows):
    s = np.array([a for a, _ in rows], float)
    y = np.array([b for _, b in rows])
    if 0 < y.sum() < y.size:
        assert auroc(s, y) == _pair_count(s, y)


# 10 ------------------------------------------------------------------------------

def test_criterion_10_transfer(bench, acceptance_lines):
    gaps, ratios = [], []
    for r in bench:
        models = r["shifted"]["models"]
        gaps.append(models["moie_joint"]["covered_auroc"] - models["blackbox_finetune"]["auroc"])
        ratios.append(models["blackbox_finetune"]["flops"] / models["moie_joint"]["flops"])
    gap, ratio = float(np.median(gaps)), float(np.min(ratios))
    ok = gap >= -0.05 and ratio >= 50
    moie = np.median([r["shifted"]["models"]["moie_joint"]["covered_auroc"] for r in bench])
    bb = np.median([r["shifted"]["models"]["blackbox_finetune"]["auroc"] for r in bench])
    assert _record(acceptance_lines, 10, "transfer", ok,
                   f"fine-tuned mixture {moie:.3f} vs fine-tuned blackbox {bb:.3f} "
                   f"(median gap {gap:+.3f}); blackbox/mixture FLOPs at least {ratio:.1f}")


# 11 ------------------------------------------------------------------------------

def test_criterion_11_pseudo_labels(bench, acceptance_lines):
    diffs = [r["identity"]["pseudo_label_accuracy"] - r["identity"]["source_projection_accuracy"]
             for r in bench]
    worst = float(np.max(np.abs(diffs)))
    assert _record(acceptance_lines, 11, "pseudo-label accuracy", worst <= 0.05,
                   f"max |target pseudo-label minus source accuracy| {worst:.3f} "
                   f"(per seed {np.round(diffs, 3).tolist()})")


# 12 ------------------------------------------------------------------------------

def test_criterion_12_intervention(bench, acceptance_lines):
    drops, ends = [], []
    for r in bench:
        a = [p["auroc"] for p in r["eval"]["intervention"]]
        drops.append(min(0.0, float(np.min(np.diff(a)))))
        ends.append(a[-1] - a[0])
    drop, end = float(np.median(drops)), float(np.median(ends))
    ok = drop >= -0.02 and end >= -0.01
    curve = [round(p["auroc"], 3) for p in bench[0]["eval"]["intervention"]]
    assert _record(acceptance_lines, 12, "intervention curve", ok,
                   f"median worst step {drop:+.3f}, median end minus start {end:+.3f} "
                   f"(seed 0 curve {curve})")


# 13 ------------------------------------------------------------------------------

def test_criterion_13_stopping_rule(bench, acceptance_lines):
    bad = []
    for r in bench:
        m = r["src"].model
        last = m.ledger[-1]["cumulative_train_coverage"]
        if not (last >= m.config.stop_coverage or m.n_experts == m.config.max_experts):
            bad.append(r["seed"])
    detail = ", ".join(f"seed {r['seed']}: K={r['src'].model.n_experts} "
                       f"cov={r['src'].model.ledger[-1]['cumulative_train_coverage']:.3f}"
                       for r in bench)
    assert _record(acceptance_lines, 13, "stopping rule", not bad, detail)


# 14 ------------------------------------------------------------------------------

SMALL = {"datagen": {"n": 2000}, "blackbox": {"hidden": [64, 32], "epochs": 5},
         "distill": {"epochs": 10, "residual_epochs": 5},
         "transfer": {"epochs": 2, "projection_epochs": 3}, "seeds": [3]}


def test_criterion_14_reproducibility(tmp_path, acceptance_lines):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    trees = []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in ("synth", "train-bb", "distill", "transfer", "report"):
            assert cli_run([cmd, "--config", str(cfg), "--out", str(out)]) == 0
        trees.append({p.relative_to(out).as_posix(): p.read_bytes()
                      for p in sorted(out.rglob("*"))
                      if p.is_file() and not p.name.startswith("timing_")})
    a, b = trees
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    kinds = {"manifest": sum("manifest" in k for k in a), "report": sum("report/" in k for k in a),
             "checkpoint": sum(k.endswith(".json") and "manifest" not in k for k in a)}
    ok = not differ and all(kinds.values())
    assert _record(acceptance_lines, 14, "reproducibility", ok,
                   f"{len(a)} files compared ({kinds}), {len(differ)} differ {differ[:3]}")
