"""Stage-sequential batch pipeline.

Stages run in a fixed order (crop, lowrank, register, select, average, fit,
evaluate, report); every stage persists its products into the output
directory and downstream stages consume the reloaded files, so `--resume`
is exact by construction and results cannot depend on what stayed in
memory. Wall-clock per stage goes to a separate timings.json that is the
single output allowed to differ between otherwise identical runs.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import dti, lowrank, metrics, register, selection
from . import stack as stk
from .register import OptimizerOptions, PlanarTransform, RegistrationConfig, TransformSet
from .stack import DatasetError, ImageStack, Protocol, ProtocolEntry

log = logging.getLogger(__name__)

STAGES = ("crop", "lowrank", "register", "select", "average", "fit", "evaluate", "report")

ARM_PRESETS = {
    "dft+manual": {"engine": "dft", "reference": "brightest", "moving": "original",
                   "selection": "manual"},
    "lowrank+manual": {"engine": "rigid", "reference": "rank1", "moving": "denoised",
                       "selection": "manual"},
    "lowrank+auto": {"engine": "rigid", "reference": "rank1", "moving": "denoised",
                     "selection": "auto"},
    "custom": {},
}


class ConfigError(ValueError):
    """Bad configuration or dataset; maps to exit code 2."""


class PipelineError(RuntimeError):
    """A stage failed; maps to exit code 3."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    dataset: str
    out_dir: str
    arm: str = "custom"
    engine: str = "rigid"               # dft | rigid | affine | none
    reference: str = "rank1"            # rank1 | brightest
    moving: str = "denoised"            # denoised | original
    selection: str = "auto"             # auto | manual | none
    manual_keep: str | None = None
    grouping: str = "per_config"
    rank: int = 6
    reference_rank: int = 1
    spokes: int = 24
    crop: int | None = None             # square crop size, None = no crop
    crop_offset: tuple[int, int] = (0, 0)
    upsample: int = 100
    pyramid_levels: int = 3
    max_iter: int = 200
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.arm not in ARM_PRESETS:
            raise ConfigError(f"unknown arm {self.arm!r}; choose from {sorted(ARM_PRESETS)}")
        if self.engine not in ("dft", "rigid", "affine", "none"):
            raise ConfigError(f"unknown engine {self.engine!r}")
        if self.selection not in ("auto", "manual", "none"):
            raise ConfigError(f"unknown selection mode {self.selection!r}")
        if self.selection == "manual" and not self.manual_keep:
            raise ConfigError("selection 'manual' needs --manual-keep FILE")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


_FIELDS = None  # populated after class creation


def config_field_names() -> set:
    global _FIELDS
    if _FIELDS is None:
        _FIELDS = {f.name for f in fields(PipelineConfig)}
    return _FIELDS


def build_config(dataset: str, out_dir: str, arm: str | None = None,
                 config_file: str | None = None, **cli_flags) -> PipelineConfig:
    """Layer the settings: defaults, then arm preset, then config file,
    then explicit CLI flags (pass only flags the user actually set)."""
    file_vals = {}
    if config_file:
        try:
            with open(config_file) as fh:
                file_vals = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_file}: {exc}") from exc
        unknown = set(file_vals) - config_field_names()
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "crop_offset" in file_vals:
            file_vals["crop_offset"] = tuple(file_vals["crop_offset"])

    arm = arm or file_vals.get("arm") or "custom"
    merged: dict = {"arm": arm}
    merged.update(ARM_PRESETS[arm])
    file_vals.pop("arm", None)
    merged.update(file_vals)
    merged.update({k: v for k, v in cli_flags.items() if v is not None})
    merged.pop("dataset", None)
    merged.pop("out_dir", None)
    unknown = set(merged) - config_field_names()
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return PipelineConfig(dataset=dataset, out_dir=out_dir, **merged)


def read_manual_keep(path, n_frames: int) -> list[int]:
    """Keep list: either the single word 'all' or one frame index per line
    ('#' comments allowed). Verdict CSVs from earlier runs also work."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read keep list {path}: {exc}") from exc
    if text.strip().lower() == "all":
        return list(range(n_frames))
    if text.startswith(selection.VERDICT_HEADER.split(",")[0]):
        return selection.read_keep_list(path)
    keep = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            keep.append(int(line))
        except ValueError as exc:
            raise ConfigError(f"bad keep-list line {line!r} in {path}") from exc
    return keep


# ---------------------------------------------------------------------------
# Stage implementations. Each stage has run(ctx) -> writes files, and
# load(ctx) -> reads them back; after a stage runs, load() replaces the
# in-memory values so memory and disk can never diverge.

def _out(cfg) -> Path:
    return Path(cfg.out_dir)


def _stage_crop_run(ctx, cfg):
    try:
        full_stack, _, annotations = stk.load_dataset(Path(cfg.dataset))
    except (DatasetError, OSError) as exc:
        raise ConfigError(f"invalid dataset {cfg.dataset}: {exc}") from exc
    if cfg.crop is not None:
        cropped, origin = stk.central_crop(full_stack, (cfg.crop, cfg.crop),
                                           tuple(cfg.crop_offset))
        annotations = stk.crop_annotations(annotations, origin, (cfg.crop, cfg.crop))
    else:
        cropped, origin = full_stack, (0, 0)
    out = _out(cfg) / "cropped"
    out.mkdir(parents=True, exist_ok=True)
    stk.save_dataset(out, cropped, annotations)
    with open(_out(cfg) / "crop.json", "w") as fh:
        json.dump({"origin": list(origin), "size": [cropped.nx, cropped.ny]},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stage_crop_load(ctx, cfg):
    stack, protocol, annotations = stk.load_dataset(_out(cfg) / "cropped" / "manifest.json")
    ctx["stack"] = stack
    ctx["protocol"] = protocol
    ctx["annotations"] = annotations


def _stage_lowrank_run(ctx, cfg):
    stack: ImageStack = ctx["stack"]
    denoised = lowrank.reconstruct_rank(stack, cfg.rank)
    if cfg.reference == "rank1":
        reference = lowrank.reference_image(stack, cfg.reference_rank)
    else:
        reference = stack.frame(register.brightest_frame(stack)).copy()
    stk.write_planes(_out(cfg) / "denoised.f32",
                     stk.flatten_casorati(denoised).T.reshape(stack.n_frames, stack.nx, stack.ny))
    stk.write_planes(_out(cfg) / "reference.f32", reference[None])


def _stage_lowrank_load(ctx, cfg):
    stack: ImageStack = ctx["stack"]
    planes = stk.read_planes(_out(cfg) / "denoised.f32", (stack.nx, stack.ny),
                             stack.n_frames)
    data = np.empty_like(stack.data)
    for k in range(stack.n_frames):
        a, d = stack.frame_coords(k)
        data[:, :, a, d] = planes[k]
    ctx["denoised"] = stack.with_data(data)
    ctx["reference"] = stk.read_planes(_out(cfg) / "reference.f32",
                                       (stack.nx, stack.ny), 1)[0]


def _stage_register_run(ctx, cfg):
    stack: ImageStack = ctx["stack"]
    if cfg.engine == "none":
        n = stack.n_frames
        tset = TransformSet(
            tuple(PlanarTransform.identity() for _ in range(n)),
            tuple(register.FrameTrace(1.0, 0, True) for _ in range(n)),
        )
        registered = stack.with_data(stack.data.copy())
    else:
        moving = ctx["denoised"] if cfg.moving == "denoised" else stack
        rcfg = RegistrationConfig(
            engine=cfg.engine, reference=cfg.reference, moving=cfg.moving,
            denoise_rank=cfg.rank, reference_rank=cfg.reference_rank,
            upsample=cfg.upsample,
            options=OptimizerOptions(pyramid_levels=cfg.pyramid_levels,
                                     max_iter=cfg.max_iter),
            threads=cfg.threads,
        )
        tset = register.register_frames(ctx["reference"], moving, rcfg)
        registered = register.resample_stack(stack, tset)
    register.write_transforms_csv(_out(cfg) / "transforms.csv", tset)
    out = _out(cfg) / "registered"
    out.mkdir(exist_ok=True)
    stk.save_dataset(out, registered, ctx["annotations"])


def _stage_register_load(ctx, cfg):
    ctx["tset"] = register.read_transforms_csv(_out(cfg) / "transforms.csv")
    registered, _, _ = stk.load_dataset(_out(cfg) / "registered" / "manifest.json")
    ctx["registered"] = registered


def _stage_select_run(ctx, cfg):
    registered: ImageStack = ctx["registered"]
    if cfg.selection == "auto":
        roi = selection.donut_roi(ctx["annotations"])
        verdicts = selection.select_frames(registered, roi, cfg.grouping)
    elif cfg.selection == "manual":
        keep = read_manual_keep(cfg.manual_keep, registered.n_frames)
        verdicts = selection.manual_verdicts(registered, keep)
    else:
        verdicts = selection.keep_all(registered)
    selection.write_verdicts_csv(_out(cfg) / "verdicts.csv", registered, verdicts)


def _stage_select_load(ctx, cfg):
    ctx["verdicts"] = selection.read_verdicts_csv(_out(cfg) / "verdicts.csv")


def _stage_average_run(ctx, cfg):
    means = dti.average_by_config(ctx["registered"], ctx["verdicts"])
    stk.write_planes(_out(cfg) / "means.f32", means.images)
    meta = {
        "counts": list(means.counts),
        "entries": [
            {"b": e.b, "direction": list(e.direction) if e.direction else None}
            for e in means.entries
        ],
    }
    with open(_out(cfg) / "means.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stage_average_load(ctx, cfg):
    with open(_out(cfg) / "means.json") as fh:
        meta = json.load(fh)
    entries = tuple(
        ProtocolEntry(e["b"], tuple(e["direction"]) if e["direction"] else None)
        for e in meta["entries"]
    )
    stack: ImageStack = ctx["registered"]
    images = stk.read_planes(_out(cfg) / "means.f32", (stack.nx, stack.ny), len(entries))
    ctx["means"] = dti.ConfigMeans(entries, images, tuple(meta["counts"]))


def _stage_fit_run(ctx, cfg):
    ann = ctx["annotations"]
    field = dti.fit_tensor(ctx["means"], ann.myo_mask)
    card = dti.frame_for_annotations(ann, ann.myo_mask.shape)
    ha, ok = dti.helix_angle_map(field, card)
    field = field.with_valid(ok)
    dti.write_tensor_planes(_out(cfg) / "tensor.f32", field, ha)


def _stage_fit_load(ctx, cfg):
    ann = ctx["annotations"]
    field, ha = dti.read_tensor_planes(_out(cfg) / "tensor.f32", ann.myo_mask.shape)
    ctx["field"] = field
    ctx["ha"] = ha


def _stage_evaluate_run(ctx, cfg):
    ann = ctx["annotations"]
    samples = metrics.transmural_profiles(ctx["ha"], ann.myo_mask,
                                          ann.blood_pool_center, cfg.spokes)
    profile = metrics.fit_profiles(samples)
    counts = metrics.negative_eig_counts(ctx["field"], ann.myo_mask)
    verdicts = ctx["verdicts"]
    rejected = int(len(verdicts.keep) - verdicts.n_kept)
    metrics.write_spokes_csv(_out(cfg) / "spokes.csv", profile, cfg.spokes)
    payload = metrics.report_dict(profile, counts, rejected)
    with open(_out(cfg) / "evaluate.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stage_evaluate_load(ctx, cfg):
    with open(_out(cfg) / "evaluate.json") as fh:
        ctx["metrics"] = json.load(fh)


def _stage_report_run(ctx, cfg):
    report = dict(ctx["metrics"])
    report.update({
        "arm": cfg.arm,
        "engine": cfg.engine,
        "selection": cfg.selection,
        "n_frames": int(ctx["registered"].n_frames),
        "seed": int(cfg.seed),
    })
    metrics.write_report_json(_out(cfg) / "report.json", report)
    metrics.write_pgm(_out(cfg) / "ha_map.pgm", ctx["ha"])


def _stage_report_load(ctx, cfg):
    with open(_out(cfg) / "report.json") as fh:
        ctx["report"] = json.load(fh)


_STAGE_FUNCS = {
    "crop": (_stage_crop_run, _stage_crop_load),
    "lowrank": (_stage_lowrank_run, _stage_lowrank_load),
    "register": (_stage_register_run, _stage_register_load),
    "select": (_stage_select_run, _stage_select_load),
    "average": (_stage_average_run, _stage_average_load),
    "fit": (_stage_fit_run, _stage_fit_load),
    "evaluate": (_stage_evaluate_run, _stage_evaluate_load),
    "report": (_stage_report_run, _stage_report_load),
}


def run_pipeline(cfg: PipelineConfig, resume: str | None = None,
                 until: str | None = None) -> dict:
    """Execute the stages; returns the final report dict (or {} when
    stopping before the report stage).

    ``resume``: skip stages before this one, loading their persisted
    products instead. ``until``: stop after this stage.
    """
    for name, val in (("resume", resume), ("until", until)):
        if val is not None and val not in STAGES:
            raise ConfigError(f"unknown {name} stage {val!r}; stages are {STAGES}")
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    start_at = STAGES.index(resume) if resume else 0
    stop_at = STAGES.index(until) if until else len(STAGES) - 1

    ctx: dict = {}
    timings = {}
    for i, name in enumerate(STAGES):
        if i > stop_at:
            break
        run, load = _STAGE_FUNCS[name]
        try:
            if i >= start_at:
                t0 = time.perf_counter()
                run(ctx, cfg)
                timings[name] = time.perf_counter() - t0
                log.info("stage %-8s %.3f s", name, timings[name])
            load(ctx, cfg)
        except ConfigError:
            raise
        except Exception as exc:
            raise PipelineError(name, exc) from exc
    if timings:
        with open(out / "timings.json", "w") as fh:
            json.dump(timings, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return ctx.get("report", {})


# ---------------------------------------------------------------------------
# Arm comparison and registration benchmark

ARM_GRID = (
    ("dft+auto", "dft", "auto"),
    ("dft+manual", "dft", "manual"),
    ("dft+none", "dft", "none"),
    ("lowrank+auto", "rigid", "auto"),
    ("lowrank+manual", "rigid", "manual"),
    ("lowrank+none", "rigid", "none"),
)

ARMS_HEADER = ("arm,engine,selection,r_square_mean,rmse_mean,nega1,nega2,"
               "frames_rejected")


def compare_arms(cfg: PipelineConfig, manual_keep: str | None = None) -> list[dict]:
    """Run the {dft, lowrank} x {auto, manual, none} grid; 'manual' without
    a keep list degrades to keeping every frame."""
    rows = []
    base_out = _out(cfg)
    for label, engine, select_mode in ARM_GRID:
        if engine == "dft":
            reference, moving = "brightest", "original"
        else:
            reference, moving = "rank1", "denoised"
        mode, keep = select_mode, manual_keep
        if select_mode == "manual" and not manual_keep:
            mode, keep = "none", None
        arm_cfg = replace(
            cfg, out_dir=str(base_out / label.replace("+", "_")),
            arm="custom", engine=engine, reference=reference, moving=moving,
            selection=mode, manual_keep=keep,
        )
        report = run_pipeline(arm_cfg)
        rows.append({"arm": label, "engine": engine, "selection": select_mode,
                     **{k: report[k] for k in ("r_square_mean", "rmse_mean", "nega1",
                                               "nega2", "frames_rejected")}})
    lines = [ARMS_HEADER]
    for r in rows:
        lines.append(
            f"{r['arm']},{r['engine']},{r['selection']},{r['r_square_mean']!r},"
            f"{r['rmse_mean']!r},{r['nega1']!r},{r['nega2']!r},{r['frames_rejected']}"
        )
    base_out.mkdir(parents=True, exist_ok=True)
    (base_out / "arms.csv").write_text("\n".join(lines) + "\n")
    with open(base_out / "arms.json", "w") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return rows


BENCH_HEADER = "engine,frame_index,seconds"


def bench_registration(cfg: PipelineConfig) -> dict:
    """Time dft vs rigid vs affine on the same reference/moving pair."""
    try:
        stack, _, _ = stk.load_dataset(Path(cfg.dataset))
    except (DatasetError, OSError) as exc:
        raise ConfigError(f"invalid dataset {cfg.dataset}: {exc}") from exc
    if stack.n_frames < 63:
        log.warning("benchmark dataset has %d frames; the reference context used 63",
                    stack.n_frames)
    denoised = lowrank.reconstruct_rank(stack, cfg.rank)
    reference = lowrank.reference_image(stack, cfg.reference_rank)
    options = OptimizerOptions(pyramid_levels=cfg.pyramid_levels, max_iter=cfg.max_iter)
    lines = [BENCH_HEADER]
    totals = {}
    for engine in ("dft", "rigid", "affine"):
        total = 0.0
        for k in range(stack.n_frames):
            frame = denoised.frame(k)
            t0 = time.perf_counter()
            if engine == "dft":
                register.dft_register(reference, frame, upsample=cfg.upsample)
            else:
                register.optimize_transform(reference, frame, engine, options)
            dt = time.perf_counter() - t0
            total += dt
            lines.append(f"{engine},{k},{dt!r}")
        totals[engine] = total
        lines.append(f"{engine},total,{total!r}")
        log.info("engine %-6s total %.3f s over %d frames", engine, total, stack.n_frames)
    out = _out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.csv").write_text("\n".join(lines) + "\n")
    return totals
