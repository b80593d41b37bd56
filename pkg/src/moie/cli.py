"""Command line driver: ``moie [--config PATH] [--seed N] [--out DIR] [--json] COMMAND``.

Exit codes: 0 success, 1 internal error, 2 config error, 3 missing
prerequisite artifact, 4 bad argument.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_experiment_config
from .datagen import ConfigError, load_csv
from .pipeline import MoIEModel
from . import workflow

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_MISSING, EXIT_ARGUMENT = 0, 1, 2, 3, 4

RESIDUAL_TEXT = "no interpretable explanation (residual)"


class ArgumentError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ArgumentError(message)


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subparser from overwriting a value given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", metavar="PATH", help="experiment config JSON")
    common.add_argument("--seed", type=int, metavar="N", help="run a single root seed")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    p = _Parser(prog="moie", description="Distill a blackbox into interpretable experts.",
                parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="write train/val/test CSVs")
    sub.add_parser("train-bb", parents=[common], help="train the blackbox and concept projection")
    sub.add_parser("distill", parents=[common], help="carve the mixture of experts")
    sub.add_parser("transfer", parents=[common], help="fine-tune on the shifted target domain")
    sub.add_parser("report", parents=[common], help="evaluate and write the report CSVs")
    ex = sub.add_parser("explain", parents=[common], help="explain individual samples")
    ex.add_argument("ids", nargs="+", type=int, help="row ids in the chosen split")
    ex.add_argument("--model", metavar="DIR", help="model directory (default: OUT/seed_S/moie)")
    ex.add_argument("--split", default="test", choices=workflow.SPLITS)
    ex.add_argument("--data", metavar="CSV", help="explicit data CSV instead of --split")
    return p


def _emit(args, payload: dict, lines: list[str]) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True, ensure_ascii=False))
    else:
        print("\n".join(lines))


def _explain(args, cfg) -> int:
    seed = cfg.seeds[0]
    root = workflow.seed_dir(cfg.out, seed)
    model_dir = Path(args.model) if args.model else root / "moie"
    if not (model_dir / "manifest.json").exists():
        raise workflow.MissingArtifactError(model_dir / "manifest.json", "explain")
    data_path = Path(args.data) if args.data else root / "data" / f"{args.split}.csv"
    if not data_path.exists():
        raise workflow.MissingArtifactError(data_path, "explain")
    model = MoIEModel.load(model_dir)
    try:
        rows = workflow.explain_samples(model, load_csv(data_path), args.ids)
    except IndexError as exc:
        raise ArgumentError(str(exc)) from None
    lines = []
    for r in rows:
        pis = ", ".join(f"{p:.3f}" for p in r["pi"])
        lines.append(f"sample {r['sample_id']}: route={r['route']} pi=[{pis}] "
                     f"label={r['predicted_label']} p1={r['probability']:.3f}")
        lines.append("  " + (r["explanation"] if r["route"] != "residual" else RESIDUAL_TEXT))
    _emit(args, {"samples": rows}, lines)
    return EXIT_OK


STAGES = {
    "synth": workflow.synth_stage,
    "train-bb": workflow.train_bb_stage,
    "distill": workflow.distill_stage,
    "transfer": workflow.transfer_stage,
    "report": workflow.report_stage,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        # parent actions are shared with the subparsers, so defaults are filled here
        for name, default in (("config", None), ("seed", None), ("out", None), ("json", False)):
            if not hasattr(args, name):
                setattr(args, name, default)
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGUMENT
    except SystemExit as exc:      # --help
        return int(exc.code or 0)
    try:
        try:
            cfg = load_experiment_config(args.config)
        except FileNotFoundError as exc:
            raise ConfigError("--config", f"file not found: {exc}") from None
        if args.seed is not None:
            if args.seed < 0:
                raise ArgumentError("--seed must be non-negative")
            cfg.seeds = [args.seed]
        if args.out is not None:
            cfg.out = args.out
        if args.command == "explain":
            return _explain(args, cfg)
        manifests = STAGES[args.command](cfg, cfg.out)
        _emit(args, {"command": args.command, "manifests": [str(m) for m in manifests]},
              [f"{args.command}: wrote {m}" for m in manifests])
        return EXIT_OK
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGUMENT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except workflow.MissingArtifactError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
