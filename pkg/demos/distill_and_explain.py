"""Carve a blackbox into interpretable experts and read their explanations.

Run: python3 demos/distill_and_explain.py [--n 4000] [--seed 0]

Walks through the source-domain workflow on the synthetic two-subgroup data:
train a blackbox, keep the concepts its features can predict, distill a few
experts, then look at who covers what and which formula each expert gives.
"""

import argparse

import numpy as np

from moie.blackbox import BlackboxConfig, ProjectionConfig, train_blackbox, train_projection
from moie.datagen import SynthConfig, generate_synthetic, split
from moie.metrics import evaluate_moie
from moie.pipeline import DistillConfig, predict, run_moie


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    data = generate_synthetic(SynthConfig(n=args.n, seed=args.seed))
    train, val, test = split(data, seed=args.seed)
    print(f"{data.n} rows, {data.C.shape[1]} concepts, prevalence {data.Y.mean():.2f}")
    print("planted rules:", [r.to_text() for r in data.meta["rules"]])

    bb = train_blackbox(train, val, BlackboxConfig(hidden=(256, 128), epochs=15, seed=args.seed))
    proj = train_projection(bb, train, val, ProjectionConfig(seed=args.seed))
    print(f"\nconcepts admitted: {proj.admitted_names}")

    model = run_moie(bb, proj, train, val, DistillConfig(seed=args.seed))
    print(f"\n{model.n_experts} experts; cumulative train coverage per iteration:",
          [round(r["cumulative_train_coverage"], 3) for r in model.ledger])

    ev = evaluate_moie(model, test)
    print(f"\nblackbox AUROC {ev['blackbox_auroc']:.3f}; experts on covered rows "
          f"{ev['moie_auroc']:.3f}; experts plus residual {ev['moie_r_auroc']:.3f}")
    for c in ev["components"]:
        a = "n/a" if c["auroc"] is None else f"{c['auroc']:.3f}"
        print(f"  {c['component']:>9}: coverage {c['coverage']:.3f}, AUROC {a}")

    trace = predict(model, test.X)
    print("\nwho covers which subgroup, and the class-1 formula:")
    for k in range(model.n_experts):
        rows = trace.route == k
        share = np.bincount(test.subgroups[rows], minlength=2) / max(rows.sum(), 1)
        top = [model.concept_names[j] for j in model.concept_index[np.argsort(-model.experts[k].attention())[:3]]]
        text = next((e.to_text(model.concept_names) for e in model.explanations[k]
                     if e.target_class == 1), "none")
        print(f"  expert {k + 1}: subgroup mix {np.round(share, 2).tolist()}, top attention {top}")
        print(f"    y=1 if {text}")

    print("\nresidual hardness (blackbox AUROC on rows still unclaimed):")
    for row in ev["hardness"]["rows"]:
        a = "n/a" if row["auroc"] is None else f"{row['auroc']:.3f}"
        print(f"  after expert {row['iteration']}: {row['n']} rows, AUROC {a}")


if __name__ == "__main__":
    main()
