"""Automatic frame rejection from a donut-shaped myocardial ROI.

Each registered frame is scored by the Pearson correlation between its ROI
pixel vector and the mean ROI vector of its comparison group (by default the
frames sharing its (b, direction) configuration, itself included). Frames
scoring more than three scaled MADs below the pooled median are rejected.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .stack import Annotations, ImageStack

log = logging.getLogger(__name__)

MAD_SCALE = 1.4826          # scaled MAD ~ sigma for a normal sample
REJECTION_MADS = 3.0
INNER_FACTOR = 0.95
OUTER_FACTOR = 1.05


@dataclass(frozen=True)
class DonutRoi:
    """Annulus between ``inner_radius`` and ``outer_radius`` around
    ``center``; ``mask`` marks exactly the pixels whose center falls in
    that band."""

    mask: np.ndarray            # u8 [Nx, Ny]
    inner_radius: float
    outer_radius: float
    center: tuple[float, float]

    def __post_init__(self):
        if not 0 < self.inner_radius < self.outer_radius:
            raise ValueError(
                f"need 0 < inner < outer, got {self.inner_radius}, {self.outer_radius}"
            )
        mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
        mask.flags.writeable = False
        object.__setattr__(self, "mask", mask)
        pixels = np.argwhere(mask != 0)
        pixels.flags.writeable = False
        object.__setattr__(self, "_pixels", pixels)

    @property
    def n_pixels(self) -> int:
        return len(self._pixels)

    def sample(self, image: np.ndarray) -> np.ndarray:
        """ROI pixel values in fixed scan order."""
        if image.shape != self.mask.shape:
            raise ValueError(f"image shape {image.shape} != ROI {self.mask.shape}")
        return image[self._pixels[:, 0], self._pixels[:, 1]]


def _boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one 4-neighbor outside the mask. Pixels on
    the array edge count (outside the array is background)."""
    padded = np.pad(mask.astype(bool), 1, mode="constant", constant_values=False)
    inner = padded[1:-1, 1:-1]
    has_bg = (
        ~padded[:-2, 1:-1] | ~padded[2:, 1:-1] | ~padded[1:-1, :-2] | ~padded[1:-1, 2:]
    )
    return np.argwhere(inner & has_bg)


def donut_roi(annotations: Annotations) -> DonutRoi:
    """Annulus from 95% of the nearest to 105% of the farthest distance
    between the blood-pool center and the myocardium boundary."""
    mask = annotations.myo_mask
    boundary = _boundary_pixels(mask)
    if boundary.size == 0:
        raise ValueError("myocardium mask is empty")
    cx, cy = annotations.blood_pool_center
    if mask[int(round(cx)), int(round(cy))]:
        raise ValueError("blood-pool center lies on the myocardium mask")
    dist = np.hypot(boundary[:, 0] - cx, boundary[:, 1] - cy)
    inner = INNER_FACTOR * float(dist.min())
    outer = OUTER_FACTOR * float(dist.max())
    xs = np.arange(mask.shape[0])[:, None]
    ys = np.arange(mask.shape[1])[None, :]
    r = np.hypot(xs - cx, ys - cy)
    roi_mask = ((r >= inner) & (r <= outer)).astype(np.uint8)
    if roi_mask.sum() < 10:
        raise ValueError("donut ROI has fewer than 10 pixels")
    return DonutRoi(roi_mask, inner, outer, (float(cx), float(cy)))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson r; -1.0 when either vector is constant (flagged upstream).

    Values within one part in 1e12 of +-1 snap to exactly +-1: identical
    frames must score exactly 1 so that the MAD = 0 rule keeps them all,
    and accumulated rounding in the mean vector sits far below 1e-12.
    """
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0:
        return -1.0
    r = float(np.clip((da * db).sum() / denom, -1.0, 1.0))
    if abs(abs(r) - 1.0) < 1e-12:
        r = math.copysign(1.0, r)
    return r


def frame_correlations(
    stack: ImageStack, roi: DonutRoi, grouping: str = "per_config"
) -> np.ndarray:
    """Mean-vector ROI correlation of each frame.

    Each frame is correlated with the mean ROI vector of its comparison
    group: the frames sharing its (b, direction) for ``per_config`` (the
    frame itself included), or all frames for ``global``. A frame constant
    inside the ROI scores -1 and is logged, so it is always rejectable.
    """
    if grouping not in ("per_config", "global"):
        raise ValueError(f"unknown grouping {grouping!r}")
    if roi.n_pixels < 10:
        raise ValueError("ROI has fewer than 10 pixels")
    n = stack.n_frames
    samples = np.empty((n, roi.n_pixels))
    for k in range(n):
        samples[k] = roi.sample(stack.frame(k))
    constant = np.ptp(samples, axis=1) == 0
    for k in np.flatnonzero(constant):
        log.warning("frame %d is constant inside the ROI; scoring it -1", k)

    if grouping == "global":
        groups = [list(range(n))]
    else:
        by_key: dict = {}
        for k in range(n):
            by_key.setdefault(stack.config_of(k).key(), []).append(k)
        groups = list(by_key.values())

    scores = np.full(n, -1.0)
    for members in groups:
        mean_vec = samples[members].mean(axis=0)
        for k in members:
            if not constant[k]:
                scores[k] = _pearson(samples[k], mean_vec)
    return scores


def rejection_threshold(scores: np.ndarray) -> float:
    """median - 3 * 1.4826 * MAD, pooled over all frames."""
    med = float(np.median(scores))
    mad = float(np.median(np.abs(scores - med)))
    return med - REJECTION_MADS * MAD_SCALE * mad


@dataclass(frozen=True)
class FrameVerdicts:
    scores: np.ndarray          # (n_frames,) ROI correlation per frame
    threshold: float
    keep: np.ndarray            # (n_frames,) bool, keep == (r >= threshold)

    def __post_init__(self):
        if self.scores.shape != self.keep.shape:
            raise ValueError("scores and keep must have the same shape")

    @property
    def n_kept(self) -> int:
        return int(self.keep.sum())

    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(self.keep)


def reject_outliers(scores: np.ndarray) -> FrameVerdicts:
    """Reject frames strictly below the pooled-MAD threshold.

    One-sided: high scores never reject. With MAD = 0 the threshold equals
    the median, so identical scores keep everything and only frames strictly
    below the median can fall.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 3:
        raise ValueError(f"need at least 3 scores, got {scores.size}")
    threshold = rejection_threshold(scores)
    keep = scores >= threshold
    if not keep.any():
        raise ValueError("selection would reject every frame")
    return FrameVerdicts(scores, threshold, keep)


def select_frames(
    stack: ImageStack, roi: DonutRoi, grouping: str = "per_config"
) -> FrameVerdicts:
    return reject_outliers(frame_correlations(stack, roi, grouping))


def manual_verdicts(stack: ImageStack, keep_indices) -> FrameVerdicts:
    """Verdicts from an explicit keep list; scores and threshold are NaN."""
    keep = np.zeros(stack.n_frames, dtype=bool)
    for k in keep_indices:
        k = int(k)
        if not 0 <= k < stack.n_frames:
            raise ValueError(f"keep index {k} outside 0..{stack.n_frames - 1}")
        keep[k] = True
    if not keep.any():
        raise ValueError("manual keep list is empty")
    return FrameVerdicts(np.full(stack.n_frames, np.nan), float("nan"), keep)


def keep_all(stack: ImageStack) -> FrameVerdicts:
    return FrameVerdicts(
        np.full(stack.n_frames, np.nan), float("nan"), np.ones(stack.n_frames, bool)
    )


VERDICT_HEADER = "frame_index,b,direction_index,r,threshold,kept"


def write_verdicts_csv(path, stack: ImageStack, verdicts: FrameVerdicts) -> None:
    """One row per frame; direction_index is the position of the frame's
    configuration among the distinct configurations, in protocol order."""
    keys = []
    for entry in stack.protocol.entries:
        if entry.key() not in keys:
            keys.append(entry.key())
    lines = [VERDICT_HEADER]
    for k in range(stack.n_frames):
        entry = stack.config_of(k)
        lines.append(
            f"{k},{entry.b!r},{keys.index(entry.key())},{float(verdicts.scores[k])!r},"
            f"{float(verdicts.threshold)!r},{int(verdicts.keep[k])}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_verdicts_csv(path) -> FrameVerdicts:
    scores = []
    keep = []
    threshold = float("nan")
    with open(path) as fh:
        header = fh.readline().strip()
        if header != VERDICT_HEADER:
            raise ValueError(f"{path}: unexpected verdict CSV header {header!r}")
        for line in fh:
            if not line.strip():
                continue
            fields = line.split(",")
            scores.append(float(fields[3]))
            threshold = float(fields[4])
            keep.append(int(fields[5]) == 1)
    if not keep:
        raise ValueError(f"{path}: no verdict rows")
    return FrameVerdicts(np.array(scores), threshold, np.array(keep, dtype=bool))


def read_keep_list(path) -> list[int]:
    """Frame indices kept according to a verdict CSV."""
    return [int(k) for k in np.flatnonzero(read_verdicts_csv(path).keep)]
