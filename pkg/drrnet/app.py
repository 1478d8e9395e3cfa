"""Command-line interface for DRRNet."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .config import load_config, parse_overrides
from .errors import DRRNetError
from .metrics import EvalRecord
from .pipeline import ComplexityReport, evaluate, infer, report_complexity, train
from .repository import RunRepository

console = Console()
error_console = Console(stderr=True)

logger = logging.getLogger("drrnet")


def setup_logging(verbose: bool = False) -> None:
    """Route package logs through rich."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=error_console, show_path=False, rich_tracebacks=True)],
        force=True,
    )


def _open_ledger(path: Optional[Path]) -> Optional[RunRepository]:
    return RunRepository(path) if path is not None else None


def _load(args: argparse.Namespace):
    overrides = parse_overrides(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "ledger", None) is not None:
        overrides["ledger_path"] = str(args.ledger)
    return load_config(args.config, overrides)


def cmd_train(args: argparse.Namespace) -> int:
    config = _load(args)
    result = train(config, resume=args.resume)
    final = result.loss_log[-1].loss if result.loss_log else float("nan")
    console.print(f"[green]Finished[/green] {len(result.loss_log)} steps, final loss {final:.4f}")
    console.print(f"Checkpoint: {result.checkpoint_path}")
    if result.best_path is not None:
        console.print(f"Best validation MAE {result.best_val_mae:.4f}: {result.best_path}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    written = infer(args.checkpoint, args.input, args.output, level=args.level, input_size=args.input_size, device=args.device)
    console.print(f"Wrote {len(written)} maps to {args.output}")
    return 0


def render_eval(record: EvalRecord) -> Table:
    table = Table(title=f"Evaluation ({len(record.per_image)} images)")
    for column in ("MAE", "S-alpha", "E-phi", "F-beta-w"):
        table.add_column(column, justify="right")
    agg = record.aggregate
    table.add_row(*(f"{v:.4f}" for v in (agg.mae, agg.s_alpha, agg.e_phi, agg.f_beta_w)))
    return table


def cmd_eval(args: argparse.Namespace) -> int:
    record = evaluate(args.pred, args.gt, args.out, repository=_open_ledger(args.ledger), workers=args.workers)
    console.print(render_eval(record))
    return 0


def render_complexity(report: ComplexityReport) -> Table:
    table = Table(title=f"Model complexity at {report.input_size}x{report.input_size}")
    table.add_column("Params (M)", justify="right")
    table.add_column("MACs (G)", justify="right")
    table.add_column("FLOPs (G)", justify="right")
    table.add_row(f"{report.params_m:.2f}", f"{report.macs / 1e9:.2f}", f"{report.gflops:.2f}")
    return table


def cmd_report(args: argparse.Namespace) -> int:
    config = _load(args)
    console.print(render_complexity(report_complexity(config)))
    return 0


def cmd_runs(args: argparse.Namespace) -> int:
    repo = RunRepository(args.ledger)
    runs = repo.get_recent_runs(limit=args.limit)
    if not runs:
        console.print("[dim]No runs recorded yet.[/dim]")
        return 0
    table = Table(title="Recent training runs")
    for column in ("ID", "Name", "Profile", "Status", "Epochs", "Started", "Checkpoint"):
        table.add_column(column)
    styles = {"finished": "green", "failed": "red", "running": "yellow"}
    for run in runs:
        table.add_row(
            str(run.id),
            run.name,
            run.profile,
            f"[{styles.get(run.status, 'white')}]{run.status}[/]",
            str(run.epochs_completed),
            run.started_at.strftime("%Y-%m-%d %H:%M") if run.started_at else "",
            run.checkpoint_path or "",
        )
    console.print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drrnet", description="Camouflaged object detection with DRRNet")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")

    p = sub.add_parser("train", help="train a model")
    add_config_args(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.add_argument("--ledger", type=Path, help="SQLite run ledger")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="export prediction maps")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--level", type=int, default=0, choices=range(5))
    p.add_argument("--input-size", type=int)
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--ledger", type=Path, help="also record the scores in this ledger")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="parameter and FLOP counts")
    add_config_args(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("runs", help="list recorded training runs")
    p.add_argument("--ledger", type=Path, help="ledger path (default ~/.local/share/drrnet/runs.db)")
    p.add_argument("--limit", type=int, default=10)
    p.set_defaults(func=cmd_runs)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point for the command-line interface."""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except DRRNetError as exc:
        print(f"{type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
