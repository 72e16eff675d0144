"""``pause-lab`` command line.

Every subcommand takes ``--config FILE`` plus any number of key overrides
(``--model.d-model 64 --train.steps 500``). Outputs land under ``run.dir``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from .autograd import set_precision
from .config import ConfigError, LabConfig, parse_overrides
from .experiments import (
    VARIANTS,
    Lab,
    MetricsRow,
    MissingCheckpointError,
    UsageError,
    compare_placement,
    emit_report,
    filler_baseline,
    run_variant_matrix,
    sweep_mft,
    sweep_minf,
)
from .model import LengthError
from .trainer import BudgetError, CheckpointError

log = logging.getLogger("pause_lab")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pause-lab", description="Pause-token training experiments on synthetic tasks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", type=Path, help="key = value config file")
        return p

    p = add("pretrain", "pretrain a model with or without pause injection")
    p.add_argument("--mode", choices=("standard", "pause"), required=True)

    p = add("finetune", "finetune one variant from its pretraining checkpoint and evaluate it")
    p.add_argument("--variant", choices=VARIANTS, required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--seed", type=int, help="finetune seed (default: train.seed)")
    p.add_argument("--train-missing", action="store_true", help="pretrain on demand if a checkpoint is missing")

    p = add("eval", "evaluate a finetuned checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--m-inf", type=int, help="pauses at inference (default: the checkpoint's M_ft)")

    p = add("matrix", "all four variants on every task and seed")
    p.add_argument("--tasks", type=_str_list)
    p.add_argument("--train-missing", action="store_true")

    p = add("sweep-mft", "finetune at several M_ft values")
    p.add_argument("--variant", choices=VARIANTS, default="PausePT_PauseFT")
    p.add_argument("--task", required=True)
    p.add_argument("--grid", type=_int_list, help="default: sweep.mft_grid")

    p = add("sweep-minf", "evaluate one finetuned checkpoint at several M_inf values")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--m-ft", type=int, help="default: read from the checkpoint")
    p.add_argument("--grid", type=_int_list, help="default: sweep.minf_grid, else a multiple-of-M_ft band")

    p = add("placement", "append vs prepend pauses, paired by seed")
    p.add_argument("--variant", choices=VARIANTS, default="PausePT_PauseFT")
    p.add_argument("--task", required=True)
    p.add_argument("--m", type=int, help="number of pauses (default: pause.m_ft)")

    p = add("filler", "delay a standard model with filler characters at inference")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--n", type=_int_list, help="filler counts, e.g. 10,50 (default: filler.n)")
    p.add_argument("--char", help="filler character (default: filler.char)")
    return parser


def _report(lab: Lab, rows) -> None:
    csv_path, summary_path = emit_report(rows, lab.run_dir, lab.cfg["report.digits"], merge=True)
    sys.stdout.write(summary_path.read_text(encoding="utf-8"))
    log.info("wrote %s", csv_path)


def _run(args: argparse.Namespace, lab: Lab) -> None:
    cfg = lab.cfg
    cmd = args.command
    if cmd == "pretrain":
        path, result = lab.pretrain(args.mode)
        print(f"{args.mode} pretraining: {result.tokens_seen} tokens, meaningful share {result.meaningful_share:.4f}")
        print(f"checkpoint: {path}")
    elif cmd == "finetune":
        seed = cfg["train.seed"] if args.seed is None else args.seed
        spec = lab.variant_spec(args.variant, args.task)
        _report(lab, [lab.run_cell(spec, seed, train_missing=args.train_missing, save=True)])
        print(f"checkpoint: {lab.finetune_path(spec, seed)}")
    elif cmd == "eval":
        model, ckpt = lab.load_model(args.checkpoint)
        m_ft = int(ckpt.header.get("m_ft", 0))
        m_inf = m_ft if args.m_inf is None else args.m_inf
        placement = ckpt.header.get("placement", "append")
        em, acc = lab.evaluate(model, args.task, m_inf, placement)
        _report(lab, [MetricsRow(ckpt.header.get("variant", "unknown"), args.task, m_ft, m_inf, placement,
                                 int(ckpt.header.get("seed", 0)), em, acc, 0, None)])
    elif cmd == "matrix":
        result = run_variant_matrix(lab, args.tasks, train_missing=args.train_missing)
        _report(lab, result.rows)
    elif cmd == "sweep-mft":
        grid = args.grid or list(cfg["sweep.mft_grid"])
        result = sweep_mft(lab, args.variant, args.task, grid)
        (lab.curve_dir / f"sweep-mft-{args.variant}-{args.task}.csv").write_text(result.csv_text, encoding="utf-8")
        if result.rows:
            emit_report(result.rows, lab.run_dir, cfg["report.digits"], merge=True)
        sys.stdout.write(result.summary)
    elif cmd == "sweep-minf":
        _, ckpt = lab.load_model(args.checkpoint)
        m_ft = int(ckpt.header.get("m_ft", 0)) if args.m_ft is None else args.m_ft
        grid = args.grid or list(cfg["sweep.minf_grid"]) or None
        result = sweep_minf(lab, args.checkpoint, args.task, m_ft, grid, ckpt.header.get("placement", "append"))
        (lab.curve_dir / f"sweep-minf-{args.checkpoint.stem}.csv").write_text(result.csv_text, encoding="utf-8")
        sys.stdout.write(result.summary)
    elif cmd == "placement":
        m = cfg["pause.m_ft"] if args.m is None else args.m
        report = compare_placement(lab, args.variant, args.task, m)
        (lab.curve_dir / f"placement-{args.variant}-{args.task}-m{m}.csv").write_text(report.csv_text(), encoding="utf-8")
        emit_report(report.metrics, lab.run_dir, cfg["report.digits"], merge=True)
        sys.stdout.write(report.summary(cfg["report.digits"]))
    elif cmd == "filler":
        counts = args.n or [cfg["filler.n"]]
        char = args.char or cfg["filler.char"]
        rows = [filler_baseline(lab, args.checkpoint, args.task, n, char) for n in counts]
        _report(lab, rows)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("default")
    try:
        cfg = LabConfig.load(args.config, parse_overrides(rest))
        set_precision(cfg["train.precision"])
        lab = Lab(cfg)
        lab.write_resolved()
        _run(args, lab)
    except (ConfigError, UsageError, MissingCheckpointError, CheckpointError, BudgetError, LengthError, FileNotFoundError) as exc:
        print(f"pause-lab: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
