"""Command-line entry point: ``dgfamba <subcommand> [options]``.

Exit codes: 0 success, 1 user error (bad arguments, missing files, invalid
config), 2 numeric abort (non-finite loss or singular flow).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .data import generate_dataset, load_dataset
from .errors import ConfigError, NumericError
from .reports import ReportBundle, domain_mixing_score, export_embeddings_2d, load_tables
from .trainer import (ABLATION_ROWS, T_GRID, AblationFlags, MetricsTable, TrainConfig, evaluate,
                      load_checkpoint, load_config, run_ablation, sweep_factorization_steps, train_run)

log = logging.getLogger("dgfamba")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with user errors mapped to exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def out_root() -> Path:
    return Path(os.environ.get("DGFAMBA_OUT", "."))


def int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (overrides the config file)")
    common.add_argument("--config", type=Path, help="TOML file with TrainConfig/AblationFlags keys")
    common.add_argument("--out", type=Path, help="output directory (default under $DGFAMBA_OUT)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--quiet", action="store_true", help="only print warnings and results")

    data_opt = Parser(add_help=False)
    data_opt.add_argument("--data", type=Path, help="dataset root (default $DGFAMBA_OUT/data)")

    train_opts = Parser(add_help=False)
    train_opts.add_argument("--iterations", type=int)
    train_opts.add_argument("--T", type=int, help="factorization steps")

    p = Parser(prog="dgfamba", description="Style-invariant selective state-space classifier at desk scale.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=Parser)

    g = sub.add_parser("generate-data", parents=[common], help="render the synthetic 4-domain dataset")
    g.add_argument("--n-per-cell", type=int, default=250, help="images per (domain, class)")

    t = sub.add_parser("train", parents=[common, data_opt, train_opts], help="one leave-one-domain-out run")
    t.add_argument("--target", help="held-out domain")
    t.add_argument("--row", choices=ABLATION_ROWS, help="component row (default from config: full model)")

    e = sub.add_parser("eval", parents=[common, data_opt], help="accuracy of a checkpoint on a domain")
    e.add_argument("--checkpoint", type=Path, required=True, help="run directory or model.pt")
    e.add_argument("--domain", help="domain to score (default: the checkpoint's held-out domain)")

    a = sub.add_parser("ablate", parents=[common, data_opt, train_opts], help="component ablation grid")
    a.add_argument("--seeds", type=int_list, default=[0, 1, 2])

    s = sub.add_parser("sweep-t", parents=[common, data_opt, train_opts], help="factorization-step sweep")
    s.add_argument("--t-values", type=int_list, default=list(T_GRID))

    x = sub.add_parser("export-embeddings", parents=[common, data_opt], help="2-D principal-axes scatter")
    x.add_argument("--checkpoint", type=Path, required=True)
    x.add_argument("--layer", type=int, help="backbone layer (default: final pooled embedding)")
    x.add_argument("--per-domain", type=int, default=100)

    r = sub.add_parser("report", parents=[common], help="collect metrics tables into report.md")
    r.add_argument("--runs", type=Path, help="directory searched for metrics.json (default --out)")
    return p


# ------------------------------------------------------------- helpers

def resolve_config(args) -> tuple[TrainConfig, AblationFlags]:
    cfg, flags = load_config(args.config) if args.config else (TrainConfig(), AblationFlags())
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        over["iterations"] = args.iterations
    if getattr(args, "target", None):
        over["target_domain"] = args.target
    if over:
        cfg = dataclasses.replace(cfg, **over)
    T = getattr(args, "T", None) or flags.T
    if getattr(args, "row", None):
        flags = AblationFlags.row(args.row, T=T, block_mask=flags.block_mask)
    elif T != flags.T:
        flags = dataclasses.replace(flags, T=T)
    return cfg, flags


def data_root(args) -> Path:
    return args.data or out_root() / "data"


def fresh_dir(path: Path, force: bool, marker: str) -> Path:
    if (path / marker).exists() and not force:
        raise FileExistsError(f"{path / marker} exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


# ------------------------------------------------------------ commands

def cmd_generate_data(args) -> int:
    root = args.out or out_root() / "data"
    generate_dataset(root, seed=args.seed or 0, n_per_cell=args.n_per_cell, force=args.force)
    print(f"dataset written to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, flags = resolve_config(args)
    dataset = load_dataset(data_root(args))
    out = fresh_dir(args.out or out_root() / "runs" / "train", args.force, "model.pt")
    res = train_run(cfg, flags, dataset, out_dir=out)
    print(f"trained {flags.name} (target {cfg.target_domain}, seed {cfg.seed}): "
          f"final loss {res.final_loss:.4f}; checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    domain = args.domain or model.config.target_domain
    dataset = load_dataset(data_root(args))
    acc = evaluate(model, dataset, domain, model.config.eval_batch_size)
    table = MetricsTable({domain: acc}, dataclasses.asdict(model.flags), model.flags.T, model.config.seed)
    ckpt_dir = args.checkpoint if args.checkpoint.is_dir() else args.checkpoint.parent
    table.write(args.out or ckpt_dir)
    print(f"{domain}: {acc:.2f}%")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, flags = resolve_config(args)
    dataset = load_dataset(data_root(args))
    out = fresh_dir(args.out or out_root() / "runs" / "ablation", args.force, "report.md")
    results = run_ablation(cfg, dataset, seeds=args.seeds, out_dir=out, T=flags.T)
    bundle = ReportBundle()
    for name, runs in results.items():
        mean = MetricsTable.mean([r.table for r in runs])
        mean.write(out / name, stem="metrics_mean")
        bundle.tables[f"{name} (mean over seeds {','.join(map(str, args.seeds))})"] = mean
    bundle.write(out)
    print(bundle.to_markdown())
    return EXIT_OK


def cmd_sweep_t(args) -> int:
    cfg, _ = resolve_config(args)
    dataset = load_dataset(data_root(args))
    out = fresh_dir(args.out or out_root() / "runs" / "sweep_t", args.force, "report.md")
    tables = sweep_factorization_steps(cfg, dataset, T_values=args.t_values, out_dir=out)
    bundle = ReportBundle({f"T = {T} (seed {t.seed})": t for T, t in tables.items()})
    bundle.write(out)
    print(bundle.to_markdown())
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(data_root(args))
    ckpt_dir = args.checkpoint if args.checkpoint.is_dir() else args.checkpoint.parent
    export = export_embeddings_2d(model, dataset, args.layer, args.out or ckpt_dir, args.per_domain,
                                  title=model.flags.name)
    score = domain_mixing_score(export.points, export.domains)
    print(f"wrote {export.csv_path} and {export.plot_path}; domain-mixing score {score:.3f}")
    return EXIT_OK


def cmd_report(args) -> int:
    runs = args.runs or args.out or out_root() / "runs"
    if not runs.is_dir():
        raise FileNotFoundError(f"no run directory at {runs}")
    tables = load_tables(runs)
    if not tables:
        raise FileNotFoundError(f"no metrics.json under {runs}; run train+eval, ablate or sweep-t first")
    bundle = ReportBundle(tables)
    path = bundle.write(args.out or runs)
    print(bundle.to_markdown())
    log.info("report written to %s", path)
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep-t": cmd_sweep_t,
    "export-embeddings": cmd_export_embeddings,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USER
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USER
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FileNotFoundError, FileExistsError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
