"""Command-line interface.

Every run command takes --seed and --out-dir and writes deterministic
report files there; wall-clock and invocation details go to a run_meta.json
sidecar, which is the only non-reproducible output.  ``generate`` routes
through the same handler as the HTTP service, so its output file is
byte-identical to the service response body for the same request.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, ConfigError
from . import evaluation as ev

SWEEP_GRID = [round(0.1 * i, 1) for i in range(11)]
SWITCH_GRID = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]


def _add_run_flags(p: argparse.ArgumentParser, checkpoint: bool = True):
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="YAML experiment config")
    if checkpoint:
        p.add_argument("--checkpoint", required=True,
                       help="trained phase-2 checkpoint (.afl1)")


def _run_config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _write_meta(out_dir: Path, args, wall: float, files: dict):
    meta = {
        "command": list(args.argv),
        "wall_clock_seconds": round(wall, 3),
        "files": {k: str(v) for k, v in sorted(files.items())},
    }
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def _finish(report, args, extra_files: dict | None = None) -> int:
    out_dir = Path(args.out_dir)
    files = ev.emit_report(report, out_dir)
    files.update(extra_files or {})
    _write_meta(out_dir, args, report.wall_clock_seconds, files)
    for kind, path in sorted(files.items()):
        print(f"{kind}: {path}")
    for cfg_name, entry in report.aggregates().items():
        ed = entry["energy_distance"]
        print(f"  {cfg_name}: energy_distance median={ed['median']:.6f} "
              f"iqr={ed['iqr']:.6f}")
    return 0


def cmd_train(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _run_config(args).toy_config(seeds=(args.seed,))
    t0 = time.monotonic()
    from .nets import build_toy_pair
    from .training import TrainConfig, train_phase1, train_phase2

    G, D = build_toy_pair(width=cfg.width, seed=args.seed)
    sampler = ev.make_swiss_sampler(cfg.swiss)
    ck1 = train_phase1(G, D, sampler, TrainConfig(
        phase=1, loss_kind=cfg.loss_kind, batch_size=cfg.batch_size,
        iterations=cfg.iterations, seed=args.seed, gp_lambda=cfg.gp_lambda))
    p1 = out_dir / "phase1.afl1"
    save_checkpoint(ck1, p1)
    ck2 = train_phase2(ck1, sampler, TrainConfig(
        phase=2, loss_kind=cfg.loss_kind, batch_size=cfg.batch_size,
        iterations=cfg.iterations, seed=args.seed, gp_lambda=cfg.gp_lambda,
        alpha_train=cfg.alpha_train,
        feedback_variant=cfg.feedback_variant))
    p2 = out_dir / "phase2.afl1"
    save_checkpoint(ck2, p2)
    _write_meta(out_dir, args, time.monotonic() - t0,
                {"phase1": p1, "phase2": p2})
    print(f"phase1: {p1}\nphase2: {p2}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args).toy_config(seeds=(args.seed,))
    ckpt = load_checkpoint(args.checkpoint)
    report = ev.run_toy_experiment(cfg, checkpoints={args.seed: ckpt})
    return _finish(report, args)


def cmd_sweep(args) -> int:
    cfg = _run_config(args).toy_config(seeds=(args.seed,))
    ckpt = load_checkpoint(args.checkpoint)
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas \
        else SWEEP_GRID
    report = ev.run_alpha_sweep(ckpt, alphas, [args.seed], cfg)
    return _finish(report, args)


def cmd_ablate(args) -> int:
    cfg = _run_config(args).toy_config(seeds=(args.seed,))
    ckpt = load_checkpoint(args.checkpoint)
    report = ev.run_ablation(ckpt, [args.seed], cfg)
    return _finish(report, args)


def cmd_sanity(args) -> int:
    cfg = _run_config(args).toy_config(seeds=(args.seed,))
    ckpt = load_checkpoint(args.checkpoint)
    report = ev.run_sanity_checks(ckpt, [args.seed], cfg)
    return _finish(report, args)


def cmd_switch(args) -> int:
    cfg = _run_config(args).toy_config(seeds=(args.seed,))
    ckpt = load_checkpoint(args.checkpoint)
    alphas = [float(a) for a in args.alphas.split(",")] if args.alphas \
        else SWITCH_GRID
    report = ev.run_switch_curve(ckpt, alphas, [args.seed], cfg)
    curve = ev.switch_median_curve(report)
    code = _finish(report, args)
    for alpha, dist in curve:
        print(f"  alpha={alpha:g}: mean distance to reference {dist:.6f}")
    return code


def cmd_report(args) -> int:
    path = Path(args.input)
    try:
        report = ev.MetricReport.from_json(path.read_text())
    except OSError as exc:
        print(f"report error: cannot read {path}: {exc}", file=sys.stderr)
        return 2
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        print(f"report error: {path} is not a metric report "
              f"(expected the .json file emitted by eval/sweep/sanity/"
              f"switch/ablate): {exc}", file=sys.stderr)
        return 2
    files = ev.emit_report(report, Path(args.out_dir))
    for kind, path in sorted(files.items()):
        print(f"{kind}: {path}")
    return 0


def cmd_generate(args) -> int:
    from .service.schemas import GenerateRequest, canonical_json
    from .service.store import CheckpointStore, TraceStore
    from .service.app import generate_response, ApiError

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(args.checkpoint)
    req = GenerateRequest(
        checkpoint_id=ckpt_path.stem, seed=args.seed,
        n_samples=args.n_samples, alpha_global=args.alpha,
        alpha_overrides=json.loads(args.alpha_overrides),
        iterations=args.iterations)
    store = CheckpointStore(ckpt_path.parent)
    traces = TraceStore()
    try:
        payload = generate_response(store, traces, req)
    except ApiError as exc:
        print(f"error ({exc.field}): {exc.message}", file=sys.stderr)
        return 1
    out = out_dir / "response.json"
    out.write_bytes(canonical_json(payload))
    print(f"response: {out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from .service.app import create_app

    app = create_app(args.checkpoint_dir, trace_capacity=args.trace_capacity)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aflgan",
        description="Discriminator-feedback GAN toolkit: train the two "
                    "phases, evaluate corrections, serve checkpoints.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train phase 1 + phase 2 on the toy task")
    _add_run_flags(p, checkpoint=False)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="baseline-vs-corrected metric report")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="metric across the alpha grid")
    _add_run_flags(p)
    p.add_argument("--alphas", help="comma-separated grid "
                                    "(default 0,0.1,...,1.0)")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate", help="metric per kept feedback module")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sanity", help="correct vs shuffled vs noise feedback")
    _add_run_flags(p)
    p.set_defaults(fn=cmd_sanity)

    p = sub.add_parser("switch", help="reference-switching distance curve")
    _add_run_flags(p)
    p.add_argument("--alphas", help="comma-separated grid "
                                    "(default 0,...,0.5)")
    p.set_defaults(fn=cmd_switch)

    p = sub.add_parser("report", help="re-emit files from a report JSON")
    p.add_argument("--input", required=True, help="report .json path")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("generate", help="one generation request "
                                        "(same handler as the service)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-samples", type=int, default=256)
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--alpha-overrides", default="{}",
                   help="JSON object: module name -> alpha")
    p.add_argument("--iterations", type=int, default=1)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--checkpoint-dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--trace-capacity", type=int, default=64)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    args = build_parser().parse_args(argv)
    args.argv = list(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
