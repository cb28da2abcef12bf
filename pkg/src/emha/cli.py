"""Command-line entry point: ``emha {train,eval,analyze,prune,param-count,grad-check}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .attention import Variant
from .config import RunConfig, load_config, run_to_dict
from .errors import ConfigError, EmhaError
from .interaction import dei_param_count
from .model import param_shapes, shape_count

log = logging.getLogger("emha")

GRAD_TOLERANCE = 1e-4


def _common(p: argparse.ArgumentParser, out=True) -> None:
    p.add_argument("--config", required=True, help="JSON config path or shipped name")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--seed", type=int)
    if out:
        p.add_argument("--out", default=".", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emha", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on the config's synthetic task")
    _common(p)
    p.add_argument("--steps", type=int, help="override train.steps")

    for name, helptext in (("eval", "evaluate a checkpoint"), ("analyze", "write metrics.json and metrics.csv")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--checkpoint", help="defaults to <out>/checkpoint.emha")
        p.add_argument("--split-seed", type=int, default=1234)

    p = sub.add_parser("prune", help="index-order head-pruning sweep")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split-seed", type=int, default=1234)
    p.add_argument("--ratios", default="0,0.25,0.5,0.75,1", help="comma-separated multiples of 1/M")

    p = sub.add_parser("param-count", help="count parameters without allocating them")
    _common(p, out=False)
    p.add_argument("--diff", choices=[v.value for v in Variant], help="report the delta against this variant")

    p = sub.add_parser("grad-check", help="finite-difference check of every parameter tensor")
    _common(p, out=False)
    p.add_argument("--tol", type=float, default=GRAD_TOLERANCE)
    return parser


def _require_task(rc: RunConfig):
    if rc.task is None:
        raise ConfigError(f"config {rc.source!r} has no task section")
    return rc.task


def _checkpoint(args, rc: RunConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(args.out) / rc.train.checkpoint


def cmd_train(args, rc: RunConfig) -> int:
    import dataclasses

    from .training import train

    task = _require_task(rc)
    tc = rc.train if args.steps is None else dataclasses.replace(rc.train, steps=args.steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(run_to_dict(dataclasses.replace(rc, train=tc)), indent=2) + "\n")
    t0 = time.perf_counter()
    res = train(rc.model, task, tc, out)
    last = res.log[-1] if res.log else None
    if last:
        print(f"step {last[0]} loss {last[2]:.4f} acc {last[3]:.4f} ({time.perf_counter() - t0:.1f}s)")
    print(f"checkpoint: {res.checkpoint_path}")
    print(f"log: {res.log_path}")
    return 0


def cmd_eval(args, rc: RunConfig) -> int:
    from .training import evaluate

    res = evaluate(_checkpoint(args, rc), rc.model, _require_task(rc), args.split_seed)
    print(json.dumps(res, sort_keys=True))
    return 0


def cmd_analyze(args, rc: RunConfig) -> int:
    from .training import analyze

    seed = rc.train.seed
    report = analyze(_checkpoint(args, rc), rc.model, _require_task(rc), seed, out_dir=args.out)
    for layer, name, value in report.rows():
        print(f"layer {layer} {name} {'n/a' if value is None else f'{value:.6f}'}")
    return 0


def cmd_prune(args, rc: RunConfig) -> int:
    from .training import prune_sweep

    try:
        ratios = [float(r) for r in args.ratios.split(",") if r.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --ratios: {exc}") from exc
    rows = prune_sweep(_checkpoint(args, rc), rc.model, _require_task(rc), ratios, args.split_seed,
                       out_dir=args.out)
    for r in rows:
        print(f"ratio {r['ratio']:.4f} heads {r['heads_pruned']} {r['metric']} {r['value']:.6f}")
    return 0


def _count(rc: RunConfig) -> int:
    return shape_count(param_shapes(rc.model))


def cmd_param_count(args, rc: RunConfig) -> int:
    total = _count(rc)
    variant = rc.model.attn.variant.value
    print(f"{variant}: {total:,} parameters")
    if args.diff:
        other = load_config(args.config, args.diff, args.seed)
        base = _count(other)
        delta = total - base
        print(f"{args.diff}: {base:,} parameters")
        print(f"delta ({variant} - {args.diff}): {delta:+,}")
        closed = dei_param_count(rc.model.attn, rc.model.layers)
        if variant != "mhsa" and closed.get(f"{variant}_total") is not None:
            print(f"closed-form interaction parameters: {closed[f'{variant}_total']:,}")
    return 0


def cmd_grad_check(args, rc: RunConfig) -> int:
    from .gradcheck import check_model_gradients

    seq_len = rc.task.seq_len if rc.task is not None else 4
    errors = check_model_gradients(rc.model, seed=rc.train.seed, seq_len=seq_len)
    worst = max(errors, key=errors.get)
    for name, err in errors.items():
        log.info("%s %.3e", name, err)
    print(f"max relative error {errors[worst]:.3e} ({worst})")
    if errors[worst] > args.tol:
        print(f"FAIL: exceeds tolerance {args.tol:g}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "prune": cmd_prune,
    "param-count": cmd_param_count,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_config(args.config, args.variant, args.seed)
        return COMMANDS[args.command](args, rc)
    except (EmhaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
