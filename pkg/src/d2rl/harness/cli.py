"""Command line entry point ``d2rl``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..config import PROFILES, ConfigError, load_config, parse_config
from .ablation import ARMS, ablation_checks, run_ablation
from .experiment import run_experiment
from .plots import emit_plots
from .report import compare_report
from .sweep import run_sweep

__all__ = ["main", "build_parser"]


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_common(p: argparse.ArgumentParser, with_config: bool = True) -> None:
    if with_config:
        p.add_argument("config", nargs="?", help="key = value config file (optional)")
    p.add_argument("--profile", choices=sorted(PROFILES), help="preset scale")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--out", default="runs", help="output directory (default: runs)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="d2rl", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration")
    _add_common(p)
    p.add_argument("--name", default="run", help="file stem for outputs")
    p.add_argument("--no-plots", action="store_true", help="skip figure rendering")

    p = sub.add_parser("sweep", help="state-exploration grid over (M, eta)")
    _add_common(p)
    p.add_argument("--m-grid", type=_floats, required=True)
    p.add_argument("--eta-grid", type=_floats, required=True)
    p.add_argument("--variants", default=None, help="comma-separated reward variants")
    p.add_argument("--no-baseline", action="store_true")

    p = sub.add_parser("ablation", help="all ablation arms over several seeds")
    _add_common(p)
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    p.add_argument("--arms", default=",".join(ARMS))

    p = sub.add_parser("plot", help="render figures from metric CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", default="plots")
    p.add_argument("--window", type=int, default=100)

    p = sub.add_parser("compare", help="baseline vs variant report")
    p.add_argument("baseline")
    p.add_argument("variant")
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--out", default=None, help="write the markdown report here")
    return ap


def _config(args):
    overrides = {}
    if args.overrides:
        overrides = parse_config("\n".join(args.overrides))
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, profile=args.profile, **overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = _config(args)
            res = run_experiment(cfg, args.out, name=args.name)
            if not args.no_plots:
                emit_plots([res.csv_path], args.out, window=cfg.ma_window)
            conv = "not converged" if res.convergence_epoch is None else res.convergence_epoch
            print(f"{res.csv_path}: {res.epochs_completed} epochs, "
                  f"{'FAILED' if res.failed else 'ok'}, convergence epoch {conv}")
            return 1 if res.failed else 0
        if args.command == "sweep":
            cfg = _config(args)
            variants = args.variants.split(",") if args.variants else None
            rows = run_sweep(cfg, args.m_grid, args.eta_grid, args.out, variants=variants,
                             baseline=not args.no_baseline)
            for r in rows:
                print(f"{r['variant']:>13} M={r['m']:<5g} eta={r['eta']:<8g} {r['status']:6} "
                      f"conv={r['convergence_epoch']} improvement={r['grad_improvement']} "
                      f"{'*' if r['best'] else ''}")
            return 0
        if args.command == "ablation":
            cfg = _config(args)
            res = run_ablation(cfg, args.seeds, args.out, arms=args.arms.split(","))
            for arm, by_seed in res.convergence.items():
                print(f"{arm:>13}: " + " ".join(f"seed{s}={c}" for s, c in by_seed.items()))
            if set(ARMS) <= set(res.convergence):
                for name, (ok, per_seed) in ablation_checks(res).items():
                    print(f"{'PASS' if ok else 'FAIL'} {name} {per_seed}")
            return 0
        if args.command == "plot":
            for p in emit_plots(args.csv, args.out, window=args.window):
                print(p)
            return 0
        if args.command == "compare":
            text = compare_report(args.baseline, args.variant, window=args.window).to_markdown()
            if args.out:
                Path(args.out).write_text(text, encoding="utf-8")
            print(text, end="")
            return 0
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"d2rl: error: {exc}", file=sys.stderr)
        return 2
    return 2  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
