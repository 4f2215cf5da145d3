"""Command-line entry point: ``hdcnn <subcommand> [--config F] [--seed N] [--out DIR] [--workers N]``."""

from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path

from hdcnn.errors import HdcnnError, StageError
from hdcnn.harness.config import parse_config, with_overrides
from hdcnn.harness.pipeline import (
    Experiment,
    ExperimentLock,
    finetuned_name,
    run_baselines,
    run_pipeline,
    sweep,
    write_csv,
)
from hdcnn.runtime.pq import compression_factor

COMMANDS = ("synth", "pretrain", "hierarchy", "pretrain-fine", "finetune", "eval", "compress",
            "sweep", "baselines", "pipeline")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path("hdcnn-run"), help="experiment directory")
    common.add_argument("--workers", type=int, help="threads for fine-component pretraining")
    parser = argparse.ArgumentParser(prog="hdcnn", description="Hierarchical deep CNN toolkit", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "sweep":
            p.add_argument("--param", required=True, choices=["beta", "gamma", "K"])
            p.add_argument("--grid", required=True, help="comma-separated values")
        if name == "baselines":
            p.add_argument("--members", type=int, help="networks in the model-averaging baseline")
        if name == "finetune":
            p.add_argument("--lam", type=float, help="consistency weight (config value if omitted)")
    return parser


def _load(args):
    text = args.config.read_text(encoding="utf-8") if args.config else ""
    if args.seed is not None:
        text = with_overrides(text, seed={"seed": args.seed})
    return parse_config(text, args.config.parent if args.config else None)


def _reset(*paths: Path) -> None:
    for p in paths:
        if p.is_dir():
            shutil.rmtree(p)
        elif p.exists():
            p.unlink()


def _print_rows(rows) -> None:
    for r in rows:
        print(",".join(r.values()))


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except HdcnnError as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return 2
    out = args.out
    cmd = args.command
    try:
        if cmd == "pipeline":
            run_pipeline(cfg, out, args.workers)
            print(out / "metrics.csv")
            return 0
        with ExperimentLock(out):
            exp = Experiment(cfg, out, args.workers)
            if cmd == "synth":
                _reset(out / "data")
                train, test = exp.data()
                print(f"train {len(train)} test {len(test)} classes {train.num_classes}")
            elif cmd == "pretrain":
                _reset(out / "bundles" / "block")
                exp.block()
                _print_rows(exp.eval_block(["single"]))
            elif cmd == "hierarchy":
                _reset(out / "hierarchy.txt")
                print(exp.hierarchy().to_text(), end="")
            elif cmd == "pretrain-fine":
                _reset(out / "bundles" / "pretrained")
                _print_rows(exp.eval_model(exp.pretrained(), "hdcnn_no_finetune", views=["single"]))
            elif cmd == "finetune":
                lam = cfg.stage("finetune").lam if args.lam is None else args.lam
                _reset(out / "bundles" / finetuned_name(lam))
                _print_rows(exp.eval_model(exp.finetuned(lam), finetuned_name(lam), views=["single"]))
            elif cmd == "eval":
                lam = cfg.stage("finetune").lam
                rows = exp.eval_block()
                rows += exp.eval_model(exp.finetuned(lam), finetuned_name(lam), exp.beta_policies())
                exp.write_metrics(rows)
                _print_rows(rows)
            elif cmd == "compress":
                model = exp.finetuned()
                qmodel = exp.compressed(model, finetuned_name(cfg.stage("finetune").lam))
                table = []
                for comp_name, net in [("coarse", qmodel.coarse)] + [(f"fine{c.k}", c.net) for c in qmodel.fine]:
                    for i, p in enumerate(net.params):
                        if "Wq" in p:
                            q = p["Wq"]
                            table.append([comp_name, f"L{cfg.split_index + i}", str(q.m), str(q.n), str(q.s),
                                          str(q.k), f"{compression_factor(q.m, q.n, q.s, q.k):.4f}",
                                          str(q.stored_bytes())])
                write_csv(out / "compress.csv", ["component", "layer", "m", "n", "s", "k",
                                                 "compression_factor", "stored_bytes"], table)
                _print_rows(exp.eval_model(qmodel, "hdcnn_pq", views=["single"], quantized=True))
            elif cmd == "sweep":
                grid = [g.strip() for g in args.grid.split(",") if g.strip()]
                print(sweep(cfg, out, args.param, grid, args.workers))
            elif cmd == "baselines":
                print(run_baselines(cfg, out, args.workers, args.members))
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except HdcnnError as exc:
        print(f"error: [{cmd}] {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
