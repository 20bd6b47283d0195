"""Command line entry point: ``effowt <subcommand> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .backbone import ConfigurationError

log = logging.getLogger("effowt")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Defaults are suppressed on the subcommand copy so a flag given before
    # the subcommand is not overwritten by the subparser's default.
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None), help="experiment JSON, or a bundled name (desk, reference)")
    p.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    p.add_argument("--out", default=d(None), help="output directory or file")
    p.add_argument("--quiet", action="store_true", default=d(False), help="only print errors")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="effowt", parents=[_global_flags(False)],
                                     description="Side-network open-world tracking experiments.")
    common = _global_flags(True)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset")

    p = sub.add_parser("train", parents=[common], help="train one strategy")
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--strategy", help="override the config strategy")
    p.add_argument("--steps", type=int, help="override optimizer.steps")

    p = sub.add_parser("infer", parents=[common], help="write prediction tracks for a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="run directory or checkpoint prefix")
    p.add_argument("--split", default="eval", choices=("train", "eval"))
    p.add_argument("--strategy", help="strategy the checkpoint was trained with")

    p = sub.add_parser("eval", parents=[common], help="evaluation metrics")
    ev = p.add_subparsers(dest="metric", required=True)
    q = ev.add_parser("owta", parents=[common], help="D.Re, A.Acc and OWTA")
    q.add_argument("--gt", required=True)
    q.add_argument("--pred", required=True)
    q.add_argument("--known", default="", help="comma-separated known classes, or a file with one per line")
    q.add_argument("--split", default="all", choices=("known", "unknown", "all"))
    q.add_argument("--alphas", default="default", help="'default', start:stop:step, or a comma list")
    q.add_argument("--matched-fpa-only", action="store_true",
                   help="count only matched-trajectory conflicts as association false positives")

    p = sub.add_parser("report", parents=[common], help="parameter and memory reports")
    rep = p.add_subparsers(dest="report", required=True)
    for name in ("params", "memory"):
        q = rep.add_parser(name, parents=[common])
        q.add_argument("--strategy", default="all", help="full, zero_shot, side, side_sim, or all")
        if name == "memory":
            q.add_argument("--batch", type=int, default=2)
            q.add_argument("--iterations", type=int, default=3)

    p = sub.add_parser("probe", parents=[common], help="diagnostics")
    pr = p.add_subparsers(dest="probe", required=True)
    q = pr.add_parser("receptive-field", parents=[common])
    q.add_argument("--grid", default="8x8")
    q.add_argument("--layers", type=int, default=2)
    q.add_argument("--dense", action="store_true", help="probe the dense token-mixing baseline instead")
    return parser


def _load(args):
    from .experiment.config import load_config

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _out(args, default: str) -> Path:
    return Path(args.out if args.out is not None else default)


def _emit(args, obj) -> None:
    if not args.quiet:
        print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_gen_data(args) -> int:
    from .experiment.data import gen_data

    summary = gen_data(_load(args), _out(args, "data"))
    _emit(args, summary["splits"])
    return 0


def cmd_train(args) -> int:
    from .experiment.train import train

    cfg = _load(args)
    if args.strategy:
        cfg = cfg.replace(strategy=args.strategy)
    if args.steps:
        cfg = cfg.replace(optimizer=dataclasses.replace(cfg.optimizer, steps=args.steps))
    res = train(cfg, args.data, _out(args, f"runs/{cfg.strategy}"))
    _emit(args, res.summary())
    return 0


def cmd_infer(args) -> int:
    from .experiment.infer import infer_tracks

    cfg = _load(args)
    if args.strategy:
        cfg = cfg.replace(strategy=args.strategy)
    out = _out(args, "predictions.jsonl")
    if out.suffix != ".jsonl":
        out = out / "predictions.jsonl"
    ts = infer_tracks(cfg, args.checkpoint, args.data, out, split=args.split)
    _emit(args, {"predictions": str(out), "records": len(ts)})
    return 0


def _known_classes(spec: str) -> list[str]:
    p = Path(spec)
    if spec and p.is_file():
        return [ln.strip() for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]
    return [s.strip() for s in spec.split(",") if s.strip()]


def cmd_eval_owta(args) -> int:
    from .checkpoint import atomic_write_text
    from .owta import OwtaConfig, compute_owta, parse_alphas, parse_track_file

    cfg = OwtaConfig(alphas=parse_alphas(args.alphas), known_classes=_known_classes(args.known),
                     eval_split=args.split, count_unmatched_fpa=not args.matched_fpa_only)
    res = compute_owta(parse_track_file(args.gt), parse_track_file(args.pred), cfg)
    out = _out(args, "owta.json")
    if out.suffix != ".json":
        out = out / f"owta_{args.split}.json"
    atomic_write_text(out, res.to_json())
    from .plotting import plot_owta_alpha

    a = [r.alpha for r in res.per_alpha]
    plot_owta_alpha(a, [r.det_re for r in res.per_alpha], [r.ass_acc for r in res.per_alpha],
                    [r.owta for r in res.per_alpha], out.with_suffix(".png"), title=f"OWTA ({args.split})")
    _emit(args, {"owta": res.owta, "det_re": res.det_re, "ass_acc": res.ass_acc, "split": res.split})
    return 0


def cmd_report(args) -> int:
    from .efficiency import emit_report, memory_report, params_report
    from .plotting import plot_strategy_bars

    cfg = _load(args)
    strategies = None if args.strategy == "all" else args.strategy.split(",")
    out = _out(args, "reports")
    if args.report == "params":
        rep = params_report(cfg.backbone, cfg.side, cfg.head_config(), strategies)
        paths = emit_report(rep, out, "params")
        plot_strategy_bars([r.strategy for r in rep.rows], [r.trainable_params for r in rep.rows],
                           out / "params.png", "trainable parameters", "trainable parameters", log=True)
    else:
        rep = memory_report(cfg.backbone, cfg.side, cfg.head_config(), strategies, batch=args.batch,
                            iterations=args.iterations, seed=cfg.seed, loss_cfg=cfg.loss)
        paths = emit_report(rep, out, "memory")
        plot_strategy_bars([r.strategy for r in rep.rows], [r.peak_bytes / 2**20 for r in rep.rows],
                           out / "memory.png", "peak retained MiB", "retained activations per step")
    if not args.quiet:
        print(rep.to_csv(), end="")
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_probe(args) -> int:
    from .experiment.probe import parse_grid, probe_receptive_field

    h, w = parse_grid(args.grid)
    res = probe_receptive_field(h, w, args.layers, dense=args.dense, seed=args.seed or 0,
                                out=_out(args, "probe"))
    _emit(args, json.loads(res.to_json()))
    if args.layers >= 2 and not res.full_coverage:
        print(f"error: {args.layers} layers cover only {res.mean_fraction:.1%} of the grid", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(message)s")
    handlers = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer,
                "eval": cmd_eval_owta, "report": cmd_report, "probe": cmd_probe}
    try:
        return handlers[args.command](args)
    except (ConfigurationError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
