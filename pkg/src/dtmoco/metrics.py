"""Fit-quality metrics: transmural helix-angle line profiles (R², RMSE per
spoke), per-mille negative-eigenvalue counts, and report/map export."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import register, selection
from .dti import TensorField

DEFAULT_SPOKES = 24


# ---------------------------------------------------------------------------
# Transmural profiles

@dataclass(frozen=True)
class SpokeSamples:
    """(depth, HA) samples of one angular sector, sorted by depth."""

    spoke: int
    angle_deg: float
    depth: np.ndarray
    ha: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.depth)


def transmural_profiles(
    ha_map: np.ndarray,
    myo_mask: np.ndarray,
    center: tuple[float, float],
    n_spokes: int = DEFAULT_SPOKES,
) -> list[SpokeSamples]:
    """Bucket myocardium pixels into ``n_spokes`` equal angular sectors
    around ``center`` and normalize each pixel's radius into a per-spoke
    transmural depth.

    Depth runs 0 at the innermost to 1 at the outermost mask radius of the
    sector (local wall thickness); a sector of uniform radius degenerates to
    depth 0 everywhere. Pixels without a finite HA value are dropped from
    the samples but still shape the radius normalization.
    """
    if n_spokes < 8:
        raise ValueError(f"need at least 8 spokes, got {n_spokes}")
    mask = np.asarray(myo_mask).astype(bool)
    if not mask.any():
        raise ValueError("myocardium mask is empty")
    if ha_map.shape != mask.shape:
        raise ValueError(f"HA map shape {ha_map.shape} != mask {mask.shape}")
    cx, cy = center
    px = np.argwhere(mask)
    dx = px[:, 0] - cx
    dy = px[:, 1] - cy
    radius = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    width = np.pi / n_spokes                       # sector half-width
    sector = np.floor(((theta + width) % (2 * np.pi)) / (2 * width)).astype(int) % n_spokes
    ha = ha_map[px[:, 0], px[:, 1]]

    out = []
    for i in range(n_spokes):
        in_sector = sector == i
        r = radius[in_sector]
        if r.size == 0:
            out.append(SpokeSamples(i, i * 360.0 / n_spokes, np.empty(0), np.empty(0)))
            continue
        r_endo, r_epi = float(r.min()), float(r.max())
        span = r_epi - r_endo
        depth = np.clip((r - r_endo) / span, 0.0, 1.0) if span > 0 else np.zeros_like(r)
        vals = ha[in_sector]
        finite = np.isfinite(vals)
        order = np.argsort(depth[finite], kind="stable")
        out.append(
            SpokeSamples(
                i, i * 360.0 / n_spokes, depth[finite][order], vals[finite][order]
            )
        )
    return out


# ---------------------------------------------------------------------------
# Line fits

@dataclass(frozen=True)
class SpokeFit:
    spoke: int
    angle_deg: float
    n_samples: int
    slope: float            # deg per unit depth
    intercept: float        # deg
    r_square: float
    rmse: float             # deg

    def __post_init__(self):
        if self.n_samples < 3:
            raise ValueError("a fitted spoke needs at least 3 samples")
        if not 0.0 <= self.r_square <= 1.0:
            raise ValueError(f"r_square {self.r_square} outside [0, 1]")
        if self.rmse < 0:
            raise ValueError("rmse must be nonnegative")


def fit_line_profile(depth: np.ndarray, ha: np.ndarray,
                     spoke: int = 0, angle_deg: float = 0.0) -> SpokeFit:
    """OLS line HA = slope*depth + intercept with R² and RMSE.

    R² = 1 - SS_res/SS_tot; a depth-degenerate or zero-variance sample is
    rejected upstream, and SS_tot = 0 maps to R² = 1 when the fit is exact,
    0 otherwise.
    """
    depth = np.asarray(depth, dtype=np.float64)
    ha = np.asarray(ha, dtype=np.float64)
    if depth.size < 3:
        raise ValueError(f"need at least 3 samples, got {depth.size}")
    if np.unique(depth).size < 2:
        raise ValueError("need at least 2 distinct depths")
    dmean = depth.mean()
    hmean = ha.mean()
    sxx = ((depth - dmean) ** 2).sum()
    slope = ((depth - dmean) * (ha - hmean)).sum() / sxx
    intercept = hmean - slope * dmean
    resid = ha - (slope * depth + intercept)
    ss_res = float((resid**2).sum())
    ss_tot = float(((ha - hmean) ** 2).sum())
    if ss_tot == 0:
        r_square = 1.0 if ss_res == 0 else 0.0
    else:
        r_square = min(max(1.0 - ss_res / ss_tot, 0.0), 1.0)
    rmse = float(np.sqrt(ss_res / depth.size))
    return SpokeFit(spoke, angle_deg, int(depth.size), float(slope),
                    float(intercept), r_square, rmse)


@dataclass(frozen=True)
class ProfileFit:
    """Per-spoke line fits plus the dataset summary (unweighted mean and
    population std over fitted spokes)."""

    spokes: tuple[SpokeFit, ...]
    n_skipped: int
    r_square_mean: float
    r_square_std: float
    rmse_mean: float
    rmse_std: float


def fit_profiles(samples: list[SpokeSamples]) -> ProfileFit:
    """Fit every spoke with >= 3 samples and >= 2 distinct depths; skipped
    spokes are counted, not errors."""
    fits = []
    skipped = 0
    for s in samples:
        if s.n_samples < 3 or np.unique(s.depth).size < 2:
            skipped += 1
            continue
        fits.append(fit_line_profile(s.depth, s.ha, s.spoke, s.angle_deg))
    if not fits:
        raise ValueError("no spoke had enough samples for a line fit")
    r2 = np.array([f.r_square for f in fits])
    rmse = np.array([f.rmse for f in fits])
    return ProfileFit(
        tuple(fits), skipped,
        float(r2.mean()), float(r2.std()),
        float(rmse.mean()), float(rmse.std()),
    )


# ---------------------------------------------------------------------------
# Negative-eigenvalue counts

@dataclass(frozen=True)
class NegCounts:
    """Per-mille of valid myocardium pixels with exactly 1 / exactly 2
    negative eigenvalues."""

    nega1: float
    nega2: float

    def __post_init__(self):
        for v in (self.nega1, self.nega2):
            if not 0.0 <= v <= 1000.0:
                raise ValueError(f"per-mille value {v} outside [0, 1000]")


def negative_eig_counts(field: TensorField, myo_mask: np.ndarray) -> NegCounts:
    mask = np.asarray(myo_mask).astype(bool) & field.valid
    total = int(mask.sum())
    if total == 0:
        raise ValueError("no valid myocardium pixels")
    n_neg = (field.evals[mask] < 0).sum(axis=1)
    nega1 = 1000.0 * int((n_neg == 1).sum()) / total
    nega2 = 1000.0 * int((n_neg == 2).sum()) / total
    return NegCounts(nega1, nega2)


# ---------------------------------------------------------------------------
# Export

def ha_to_u8(ha_map: np.ndarray) -> np.ndarray:
    """Fixed [-90, 90] -> [0, 255] gray mapping; undefined pixels -> 0."""
    scaled = np.clip((ha_map + 90.0) / 180.0 * 255.0, 0.0, 255.0)
    out = np.where(np.isfinite(ha_map), np.round(scaled), 0.0)
    return out.astype(np.uint8)


def write_pgm(path, ha_map: np.ndarray) -> None:
    """Binary PGM (P5), width = Nx, rows along y."""
    gray = ha_to_u8(ha_map)
    nx, ny = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n255\n".encode("ascii"))
        fh.write(gray.T.tobytes())


SPOKE_HEADER = "spoke,angle_deg,n_samples,slope,intercept,r_square,rmse"


def write_spokes_csv(path, profile: ProfileFit, n_spokes: int) -> None:
    """One row per spoke; skipped spokes keep nan fields."""
    by_index = {f.spoke: f for f in profile.spokes}
    lines = [SPOKE_HEADER]
    for i in range(n_spokes):
        f = by_index.get(i)
        if f is None:
            lines.append(f"{i},{i * 360.0 / n_spokes!r},0,nan,nan,nan,nan")
        else:
            lines.append(
                f"{i},{f.angle_deg!r},{f.n_samples},{f.slope!r},{f.intercept!r},"
                f"{f.r_square!r},{f.rmse!r}"
            )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def report_dict(profile: ProfileFit, counts: NegCounts, frames_rejected: int,
                extra: dict | None = None) -> dict:
    report = {
        "r_square_mean": float(profile.r_square_mean),
        "r_square_std": float(profile.r_square_std),
        "rmse_mean": float(profile.rmse_mean),
        "rmse_std": float(profile.rmse_std),
        "nega1": float(counts.nega1),
        "nega2": float(counts.nega2),
        "frames_rejected": int(frames_rejected),
        "n_spokes_fitted": len(profile.spokes),
        "n_spokes_skipped": int(profile.n_skipped),
    }
    if extra:
        report.update(extra)
    return report


def write_report_json(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def emit_report(out_dir, report: dict, ha_map: np.ndarray, profile: ProfileFit,
                n_spokes: int, stack, verdicts, tset) -> dict:
    """Write the full artifact set; returns {name: path}."""
    paths = {
        "report": out_dir / "report.json",
        "spokes": out_dir / "spokes.csv",
        "ha_map": out_dir / "ha_map.pgm",
        "verdicts": out_dir / "verdicts.csv",
        "transforms": out_dir / "transforms.csv",
    }
    write_report_json(paths["report"], report)
    write_spokes_csv(paths["spokes"], profile, n_spokes)
    write_pgm(paths["ha_map"], ha_map)
    selection.write_verdicts_csv(paths["verdicts"], stack, verdicts)
    register.write_transforms_csv(paths["transforms"], tset)
    return paths
