"""Command-line entry point.

Subcommands map one-to-one onto pipeline stages plus sampling, evaluation
sweeps, and the curation service. Runs live under $UVAP_HOME (default
./runs); exit code 2 signals a usage error, 3 an unmet stage precondition,
1 any other failure with a one-line diagnostic.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import rng, synthdata
from .adjust import AdjustmentSpec, InferenceRequest, personalized_sample, save_request_echo
from .config import RunConfig
from .errors import StageError, UvapError
from .evalharness import lambda_sweep, write_reports
from .pipeline import (Run, run_pipeline, stage_augment, stage_curate,
                       stage_dual, stage_eval, stage_prelearn, stage_synth,
                       stage_train_base)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_STAGE = 3


def runs_root() -> Path:
    return Path(os.environ.get("UVAP_HOME", "runs"))


def _resolve_run(args) -> tuple[Run, RunConfig]:
    run = Run(runs_root(), args.run)
    if getattr(args, "config", None):
        config = RunConfig.load(args.config)
    elif run.exists():
        config = run.config()
    else:
        config = RunConfig()
    if getattr(args, "seed_override", None) is not None:
        config.seed = args.seed_override
    config.validate()
    run.create(config)
    return run, config


def _guarded(run: Run):
    if run.is_locked():
        raise UvapError(f"run {run.run_id!r} is locked by a running server")


def cmd_synth(args):
    run, config = _resolve_run(args)
    stage_synth(run, config, force=True)
    print(f"corpus written to {run.dir / 'corpus'}")


def cmd_train_base(args):
    run, config = _resolve_run(args)
    _guarded(run)
    stage_train_base(run, config)
    print(f"base checkpoint: {run.dir / 'checkpoints' / 'base.uvap'}")


def cmd_prelearn(args):
    run, config = _resolve_run(args)
    _guarded(run)
    stage_prelearn(run, config)
    print(f"concept checkpoint: {run.dir / 'checkpoints' / 'g0.uvap'}")


def cmd_augment(args):
    run, config = _resolve_run(args)
    _guarded(run)
    stage_augment(run, config)
    print(f"candidate pool: {run.dir / 'candidates' / 'pool.jsonl'}")


def cmd_curate_auto(args):
    run, config = _resolve_run(args)
    stage_curate(run, config)
    print(f"curated sets under {run.dir / 'curated'}")


def cmd_dual_train(args):
    run, config = _resolve_run(args)
    _guarded(run)
    stage_dual(run, config)
    print(f"dual checkpoint: {run.dir / 'checkpoints' / 'dual.uvap'}")


def cmd_sample(args):
    run, config = _resolve_run(args)
    run.require_stage("prelearned")
    ckpt = run.best_checkpoint()
    lam = config.inference.lam if args.lam is None else args.lam
    req = InferenceRequest(prompt=args.prompt,
                           specs=[AdjustmentSpec(lam=lam)],
                           steps=config.inference.steps,
                           guidance=config.inference.guidance,
                           seed=args.seed, count=args.count)
    images = personalized_sample(req, ckpt)
    out = run.dir / "samples" / args.name
    for i, img in enumerate(images):
        synthdata.save_image(img, out / f"{i:03d}.png")
    save_request_echo(req, out / "request.json")
    print(f"{len(images)} images written to {out}")


def cmd_eval(args):
    run, config = _resolve_run(args)
    _guarded(run)
    stage_eval(run, config)
    print(f"reports: {run.dir / 'reports' / 'latest.json'}")


def cmd_sweep(args):
    run, config = _resolve_run(args)
    run.require_stage("dual_trained")
    dual = run.checkpoint("dual")
    refs = run.load_refs()
    n = config.eval.seeds_per_condition
    seeds = [rng.derive_seed(config.seed, "eval", i) for i in range(n)]
    reports = lambda_sweep(dual, run.query(config), refs,
                           config.eval.lambda_grid, seeds,
                           config.inference.steps, config.inference.guidance)
    write_reports(reports, run.dir / "reports" / "sweep.json",
                  run.dir / "reports" / "sweep.md")
    print(f"sweep reports: {run.dir / 'reports' / 'sweep.json'}")


def cmd_serve(args):
    from .server import serve
    run, config = _resolve_run(args)
    run.require_stage("candidates_ready")
    run.acquire_lock()
    try:
        serve(runs_root(), args.bind, ui_dir=args.ui_dir)
    finally:
        run.release_lock()


def cmd_pipeline(args):
    run, config = _resolve_run(args)
    _guarded(run)
    run_pipeline(run, config)
    print(f"run {run.run_id!r} completed through stage: {run.effective_stage()}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uvap",
                                description="attribute-level personalization pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--run", required=True, help="run id under $UVAP_HOME")
        sp.add_argument("--config", help="path to a config JSON")
        sp.add_argument("--seed-override", type=int, dest="seed_override")

    for name, fn in (("synth", cmd_synth), ("train-base", cmd_train_base),
                     ("prelearn", cmd_prelearn), ("augment", cmd_augment),
                     ("curate-auto", cmd_curate_auto),
                     ("dual-train", cmd_dual_train), ("eval", cmd_eval),
                     ("sweep", cmd_sweep), ("pipeline", cmd_pipeline)):
        sp = sub.add_parser(name)
        common(sp)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("sample")
    common(sp)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--lambda", type=float, dest="lam", default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, default=4)
    sp.add_argument("--name", default="sample")
    sp.set_defaults(fn=cmd_sample)

    sp = sub.add_parser("serve")
    common(sp)
    sp.add_argument("--bind", default="127.0.0.1:8787")
    sp.add_argument("--ui-dir", dest="ui_dir", default=None)
    sp.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except UvapError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:  # noqa: BLE001 - one-line diagnostic contract
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
