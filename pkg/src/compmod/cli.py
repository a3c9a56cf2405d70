"""Command line entry point: ``compmod {train,eval,gradcheck,ablate}``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .checks import LOSS_CHECKS, run_checks
from .config import load_config
from .errors import EXIT_IO, EXIT_OK, EXIT_VALIDATION, CompModError


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    return cfg


def _out(args, cfg) -> Path:
    return Path(args.out) if args.out else Path(cfg.output.dir)


def cmd_train(args) -> int:
    from .runner import run_train

    cfg = _config(args)
    out = _out(args, cfg)
    rows = run_train(cfg, out)
    final = rows[-1] if rows else None
    summary = "" if final is None else f" probe_acc={final.probe_acc} knn_acc={final.knn_acc}"
    print(f"trained {len(rows)} epochs -> {out}{summary}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .runner import run_eval

    cfg = _config(args)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.json")
    obj = run_eval(args.checkpoint, cfg, out)
    print(f"knn@{obj['knn']['meta']['k']}={obj['knn']['accuracy']:.4f} "
          f"linear={obj['linear_probe']['accuracy']:.4f} -> {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_checks(args.scope)
    print(f"{'check':<16} {'max_rel_err':>12} {'tol':>8} {'cases':>5}  status")
    for r in results:
        print(f"{r.name:<16} {r.max_rel_err:>12.3e} {r.tol:>8.0e} {r.cases:>5}  {'ok' if r.ok else 'FAIL'}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"tolerance breached: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .runner import run_ablation

    cfg = _config(args)
    out = _out(args, cfg)
    results = run_ablation(cfg, args.axis, out)
    for r in results:
        print(f"{r['cell']:<20} probe_acc={r['probe_acc']} knn_acc={r['knn_acc']}")
    print(f"{len(results)} cells -> {out / f'ablation_{args.axis}.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compmod", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="k-NN and linear probe of a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="eval JSON path (default: eval.json next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every loss and the hypergradient")
    p.add_argument("scope", nargs="?", default="all", choices=["all", *LOSS_CHECKS, "hypergradient"])
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sweep one ablation axis")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=["fusion", "lambda_grid"])
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CompModError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
