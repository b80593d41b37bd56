"""Move a trained mixture to a shifted domain with 10% labels, and price it.

Run: python3 demos/transfer_to_shifted_domain.py [--seed 0] [--identity]

Uses the default experiment config (full-size data, about half a minute).
The source blackbox pseudo-labels concepts on the target rows it gets right,
a target concept projection is self-trained on top, and the first experts
are fine-tuned. The blackbox baseline is fine-tuned end to end on the same
rows; the analytic FLOP ledgers show what each costs.
"""

import argparse

from moie.config import ExperimentConfig
from moie.workflow import run_source, run_transfer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--identity", action="store_true", help="target = fresh rows, no shift")
    args = ap.parse_args()

    cfg = ExperimentConfig().for_seed(args.seed)
    cfg.shift.identity = args.identity
    src = run_source(cfg)
    print(f"source: {src.model.n_experts} experts, timings {src.timing}")

    res = run_transfer(cfg, src.blackbox, src.projection, src.model)
    print(f"\nlabeled target rows: {res['n_labeled']} ({res['labeled_fraction']:.0%}); "
          f"kept after the correctness filter: {res['pseudo_label_kept']:.0%}")
    print(f"pseudo-label concept accuracy {res['pseudo_label_accuracy']:.3f} "
          f"(source projection {res['source_projection_accuracy']:.3f})")
    print(f"source blackbox on target test, no fine-tuning: {res['source_blackbox_auroc']:.3f}")

    bb_flops = res["models"]["blackbox_finetune"]["flops"]
    print(f"\n{'model':<22}{'AUROC':>8}{'covered':>9}{'coverage':>10}{'FLOPs':>14}{'bb/x':>8}")
    for name, m in res["models"].items():
        cov = "" if m["covered_auroc"] is None else f"{m['covered_auroc']:.3f}"
        print(f"{name:<22}{m['auroc']:>8.3f}{cov:>9}{m['coverage']:>10.3f}{m['flops']:>14,}"
              f"{bb_flops / m['flops']:>8.1f}")

    print("\njoint fine-tuning ledger:")
    for phase in res["ledgers"]["moie_joint"].phases:
        print(f"  {phase.name:<14}{phase.total:>12,}  ({phase.forward_per_sample} fwd + "
              f"{phase.backward_per_sample} bwd per sample, {phase.batches} batches x {phase.epochs})")


if __name__ == "__main__":
    main()
