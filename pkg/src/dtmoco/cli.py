"""Command-line entry point.

Subcommands: run (full pipeline), phantom (synthetic dataset), register /
select / fit / evaluate (pipeline truncated after that stage), bench
(engine timing), compare-arms (the 2x3 engine-selection grid). Exit codes:
0 success, 2 invalid configuration or dataset, 3 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import phantom as phantom_mod
from . import pipeline, stack
from .pipeline import ConfigError, PipelineError

log = logging.getLogger(__name__)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True, help="dataset manifest JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--arm", choices=sorted(pipeline.ARM_PRESETS),
                   help="preset: dft+manual | lowrank+manual | lowrank+auto | custom")
    p.add_argument("--config", help="JSON config file (same keys as the flags)")
    p.add_argument("--engine", choices=["dft", "rigid", "affine", "none"])
    p.add_argument("--reference", choices=["rank1", "brightest"])
    p.add_argument("--moving", choices=["denoised", "original"])
    p.add_argument("--selection", choices=["auto", "manual", "none"])
    p.add_argument("--manual-keep", help="keep-list file ('all' or one index per line)")
    p.add_argument("--grouping", choices=["per_config", "global"])
    p.add_argument("--rank", type=int, help="denoising rank (default 6)")
    p.add_argument("--reference-rank", type=int, help="reference rank (default 1)")
    p.add_argument("--spokes", type=int, help="transmural spokes (default 24)")
    p.add_argument("--crop", type=int, help="central crop size in px")
    p.add_argument("--crop-offset", type=int, nargs=2, metavar=("OX", "OY"))
    p.add_argument("--upsample", type=int, help="subpixel precision 1/N (default 100)")
    p.add_argument("--pyramid-levels", type=int)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int)
    _add_common(p)


def _pipeline_config(args) -> pipeline.PipelineConfig:
    flags = dict(
        engine=args.engine, reference=args.reference, moving=args.moving,
        selection=args.selection, manual_keep=args.manual_keep,
        grouping=args.grouping, rank=args.rank, reference_rank=args.reference_rank,
        spokes=args.spokes, crop=args.crop,
        crop_offset=tuple(args.crop_offset) if args.crop_offset else None,
        upsample=args.upsample, pyramid_levels=args.pyramid_levels,
        max_iter=args.max_iter, threads=args.threads, seed=args.seed,
    )
    return pipeline.build_config(args.dataset, args.out, arm=args.arm,
                                 config_file=args.config, **flags)


def _cmd_run(args) -> int:
    cfg = _pipeline_config(args)
    report = pipeline.run_pipeline(cfg, resume=args.resume, until=args.until)
    if report:
        print(f"report written to {Path(cfg.out_dir) / 'report.json'}")
    return 0


def _cmd_stage(stage: str):
    def cmd(args) -> int:
        cfg = _pipeline_config(args)
        pipeline.run_pipeline(cfg, resume=args.resume, until=stage)
        print(f"pipeline finished after stage {stage!r}; products in {cfg.out_dir}")
        return 0

    return cmd


def _cmd_phantom(args) -> int:
    shape = tuple(args.shape)
    spec_kwargs = dict(
        shape=shape, n_ave=args.n_ave, seed=args.seed,
        max_shift=args.max_shift, max_rotation=args.max_rotation,
        max_scale=args.max_scale, noise_sigma=args.noise,
        corruption_factor=args.corruption_factor,
        chest_blob=args.chest_blob, edge_blobs=args.edge_blobs,
    )
    if args.r_endo is not None:
        spec_kwargs["r_endo"] = args.r_endo
    if args.r_epi is not None:
        spec_kwargs["r_epi"] = args.r_epi
    try:
        spec = phantom_mod.PhantomSpec(**spec_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    corrupted: tuple[int, ...] = ()
    if args.corrupt_frames:
        corrupted = tuple(int(s) for s in args.corrupt_frames.split(","))
    elif args.n_corrupt:
        corrupted = phantom_mod.choose_corrupted(args.seed, spec.n_frames, args.n_corrupt)
    if corrupted:
        spec = phantom_mod.PhantomSpec(**{**spec_kwargs, "corrupted": corrupted})

    stk, annotations, truth = phantom_mod.make_phantom(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stack.save_dataset(out, stk, annotations)
    if args.truth:
        phantom_mod.save_truth(out / "truth", truth)
    print(f"phantom dataset written to {out / 'manifest.json'}"
          + (f" ({len(corrupted)} corrupted frames)" if corrupted else ""))
    return 0


def _cmd_bench(args) -> int:
    cfg = _pipeline_config(args)
    totals = pipeline.bench_registration(cfg)
    for engine, total in totals.items():
        print(f"{engine:6s} {total:8.3f} s")
    return 0


def _cmd_compare_arms(args) -> int:
    cfg = _pipeline_config(args)
    rows = pipeline.compare_arms(cfg, manual_keep=args.manual_keep)
    for r in rows:
        print(f"{r['arm']:16s} r2={r['r_square_mean']:.4f} rmse={r['rmse_mean']:.3f} "
              f"nega1={r['nega1']:.2f} rejected={r['frames_rejected']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dtmoco",
        description="Low-rank motion correction, frame selection, and tensor "
                    "fitting for diffusion-weighted cardiac image stacks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full pipeline")
    _add_pipeline_flags(p_run)
    p_run.add_argument("--resume", choices=pipeline.STAGES,
                       help="start at this stage, loading earlier products")
    p_run.add_argument("--until", choices=pipeline.STAGES, help="stop after this stage")
    p_run.set_defaults(func=_cmd_run)

    for stage in ("register", "select", "fit", "evaluate"):
        p_stage = sub.add_parser(stage, help=f"pipeline through the {stage} stage")
        _add_pipeline_flags(p_stage)
        p_stage.add_argument("--resume", choices=pipeline.STAGES)
        p_stage.set_defaults(func=_cmd_stage(stage))

    p_ph = sub.add_parser("phantom", help="generate a synthetic dataset")
    p_ph.add_argument("--out", required=True)
    p_ph.add_argument("--seed", type=int, default=0)
    p_ph.add_argument("--shape", type=int, nargs=2, default=(96, 96), metavar=("NX", "NY"))
    p_ph.add_argument("--n-ave", type=int, default=9)
    p_ph.add_argument("--r-endo", type=float)
    p_ph.add_argument("--r-epi", type=float)
    p_ph.add_argument("--max-shift", type=float, default=0.0, help="px")
    p_ph.add_argument("--max-rotation", type=float, default=0.0, help="degrees")
    p_ph.add_argument("--max-scale", type=float, default=0.0, help="e.g. 0.05")
    p_ph.add_argument("--noise", type=float, default=0.0, help="Rician sigma / S0")
    p_ph.add_argument("--corrupt-frames", help="comma-separated frame indices")
    p_ph.add_argument("--n-corrupt", type=int, help="randomly pick N frames to corrupt")
    p_ph.add_argument("--corruption-factor", type=float, default=0.5)
    p_ph.add_argument("--chest-blob", action="store_true",
                      help="static bright off-center blob")
    p_ph.add_argument("--edge-blobs", action="store_true",
                      help="tissue at the x edges, for crop exercises")
    p_ph.add_argument("--truth", action="store_true", help="also write ground truth")
    _add_common(p_ph)
    p_ph.set_defaults(func=_cmd_phantom)

    p_bench = sub.add_parser("bench", help="time dft vs rigid vs affine")
    _add_pipeline_flags(p_bench)
    p_bench.set_defaults(func=_cmd_bench)

    p_arms = sub.add_parser("compare-arms", help="engine x selection grid")
    _add_pipeline_flags(p_arms)
    p_arms.set_defaults(func=_cmd_compare_arms)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, stack.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
