"""Synthetic short-axis LV phantom with ground truth.

Signal model: an annular myocardium with a linear transmural helix-angle
ramp and fixed tensor eigenvalues, isotropic blood inside, and smoothstep
intensity blending at the edges so subpixel registration has gradients to
work with. On myocardium pixels the per-pixel signal is exactly
S0 * exp(-b g^T D g), which makes the tensor fit an exact inverse of the
generator there. Per-frame rigid/affine motion, Rician noise, corrupted
frames (scaled myocardial signal), and a static bright off-center blob
(the unmoving-anatomy stress case) are all optional and seed-deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import stack as stk
from .dti import TensorField, cardiac_frame, design_matrix, write_tensor_planes
from .register import PlanarTransform, TransformSet, apply_transform, compose
from .selection import FrameVerdicts
from .stack import Annotations, ImageStack, Protocol, ProtocolEntry

EDGE_WIDTH = 3.0            # px, smoothstep blending width at tissue edges
BLOOD_FRACTION = 0.9        # blood plateau relative to s0
BLOOD_ADC = 3.0e-3          # mm^2/s, isotropic blood diffusivity
BLOB_ADC = 0.2e-3           # chest-wall-like blob attenuates barely

# classic six-direction scheme, full rank together with b0
_RAW_DIRS = np.array(
    [[1, 1, 0], [0, 1, 1], [1, 0, 1], [1, -1, 0], [0, 1, -1], [-1, 0, 1]],
    dtype=np.float64,
)
DIRECTIONS = _RAW_DIRS / np.sqrt(2.0)


def default_protocol(b_values=(150.0, 600.0)) -> Protocol:
    entries = [ProtocolEntry(0.0, None)]
    for b in b_values:
        for d in DIRECTIONS:
            entries.append(ProtocolEntry(float(b), tuple(d)))
    return Protocol(tuple(entries))


@dataclass(frozen=True)
class PhantomSpec:
    """Generator parameters; defaults give a 96x96, 9-average, 13-config
    stack (117 frames) with a +60 to -60 degree transmural HA ramp."""

    shape: tuple[int, int] = (96, 96)
    center: tuple[float, float] | None = None       # None: grid center
    r_endo: float = 12.0
    r_epi: float = 28.0
    ha_endo: float = 60.0
    ha_epi: float = -60.0
    eigenvalues: tuple[float, float, float] = (1.5e-3, 0.8e-3, 0.4e-3)
    s0: float = 1.0
    b_values: tuple[float, ...] = (150.0, 600.0)
    n_ave: int = 9
    max_shift: float = 0.0          # px, amplitude range along the drift axis
    max_rotation: float = 0.0       # degrees, uniform per frame
    max_scale: float = 0.0          # e.g. 0.05: per-frame scale in [1/1.05, 1.05]
    noise_sigma: float = 0.0        # Rician sigma relative to s0
    corrupted: tuple[int, ...] = ()
    corruption_factor: float = 0.5  # myocardial signal multiplier, in [0, 1)
    chest_blob: bool = False        # static bright structure, added after motion
    chest_amp: float = 2.0          # relative to s0
    chest_sigma: float = 6.0
    chest_center: tuple[float, float] | None = None  # None: upper-left corner
    edge_blobs: bool = True         # background tissue near the frame edges
    anatomy_spots: bool = True      # sharp papillary/chest-wall-like features
    texture: float = 0.10           # relative S0 shading amplitude on the wall
    scripted_motion: tuple | None = None  # exact per-frame transforms; overrides draws
    seed: int = 0

    def __post_init__(self):
        nx, ny = self.shape
        if not 0 < self.r_endo < self.r_epi < min(nx, ny) / 2:
            raise ValueError("need 0 < r_endo < r_epi < grid/2")
        if not 0 <= self.corruption_factor < 1:
            raise ValueError("corruption factor must be in [0, 1)")
        if self.noise_sigma < 0 or self.max_shift < 0 or self.max_rotation < 0:
            raise ValueError("noise and motion ranges must be nonnegative")
        if self.max_scale < 0 or self.max_scale >= 1:
            raise ValueError("max_scale must be in [0, 1)")
        if self.s0 <= 0:
            raise ValueError("s0 must be positive")
        if not 0 <= self.texture < 0.5:
            raise ValueError("texture amplitude must be in [0, 0.5)")
        if len(self.eigenvalues) != 3 or any(v <= 0 for v in self.eigenvalues):
            raise ValueError("eigenvalues must be 3 positive numbers")
        object.__setattr__(self, "corrupted", tuple(int(k) for k in self.corrupted))
        if self.scripted_motion is not None:
            sm = tuple(self.scripted_motion)
            if len(sm) != self.n_frames:
                raise ValueError(
                    f"scripted_motion has {len(sm)} transforms for {self.n_frames} frames"
                )
            object.__setattr__(self, "scripted_motion", sm)

    @property
    def center_xy(self) -> tuple[float, float]:
        if self.center is not None:
            return self.center
        return ((self.shape[0] - 1) / 2.0, (self.shape[1] - 1) / 2.0)

    @property
    def protocol(self) -> Protocol:
        return default_protocol(self.b_values)

    @property
    def n_frames(self) -> int:
        return len(self.protocol.entries) * self.n_ave


@dataclass(frozen=True)
class GroundTruth:
    """Everything the pipeline is supposed to recover."""

    clean_stack: ImageStack                 # noiseless, motion-free, uncorrupted
    transforms: tuple[PlanarTransform, ...] # true correcting transform per frame
    tensor: TensorField                     # on the myocardium mask
    ha: np.ndarray                          # degrees, NaN off the mask
    annotations: Annotations
    corrupted: tuple[int, ...]


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def _true_field(spec: PhantomSpec):
    """Per-pixel tensor (defined everywhere via clipped depth), HA ramp,
    myocardium mask, and the edge blend weights."""
    nx, ny = spec.shape
    cx, cy = spec.center_xy
    frame = cardiac_frame(spec.shape, (cx, cy))
    xs = np.arange(nx, dtype=np.float64)[:, None]
    ys = np.arange(ny, dtype=np.float64)[None, :]
    r = np.hypot(xs - cx, ys - cy)

    depth = np.clip((r - spec.r_endo) / (spec.r_epi - spec.r_endo), 0.0, 1.0)
    ha = spec.ha_endo + (spec.ha_epi - spec.ha_endo) * depth
    ha_rad = np.radians(ha)

    # e1 in the {c, z} plane at the prescribed HA; e3 radial; e2 = e3 x e1
    c3 = np.zeros((nx, ny, 3))
    c3[..., :2] = frame.circum
    r3 = np.zeros((nx, ny, 3))
    r3[..., :2] = frame.radial
    z3 = np.zeros((nx, ny, 3))
    z3[..., 2] = 1.0
    e1 = np.cos(ha_rad)[..., None] * c3 + np.sin(ha_rad)[..., None] * z3
    e3 = r3
    e2 = np.cross(e3, e1)

    l1, l2, l3 = spec.eigenvalues
    d_full = (
        l1 * e1[..., :, None] * e1[..., None, :]
        + l2 * e2[..., :, None] * e2[..., None, :]
        + l3 * e3[..., :, None] * e3[..., None, :]
    )
    # the exact grid center (if it lands on a pixel) has no radial direction
    iso = (l1 + l2 + l3) / 3.0 * np.eye(3)
    d_full[~frame.defined] = iso

    d6 = np.stack(
        [
            d_full[..., 0, 0], d_full[..., 1, 1], d_full[..., 2, 2],
            d_full[..., 0, 1], d_full[..., 0, 2], d_full[..., 1, 2],
        ],
        axis=-1,
    )
    mask = (r >= spec.r_endo) & (r <= spec.r_epi)
    blood_w = _smoothstep((spec.r_endo - r) / EDGE_WIDTH)       # 1 deep inside
    envelope = 1.0 - _smoothstep((r - spec.r_epi) / EDGE_WIDTH) # 0 far outside

    # smooth angular shading of the wall (coil profile / trabeculation
    # stand-in): low-order harmonics so the anatomy is not a perfect ring;
    # this is what makes small rotations observable to intensity metrics
    alpha = np.arctan2(ys - cy, xs - cx)
    rm = 0.5 * (spec.r_endo + spec.r_epi)
    rw = 0.5 * (spec.r_epi - spec.r_endo)
    wr = np.exp(-(((r - rm) / rw) ** 2))
    texture = 1.0 + spec.texture * wr * (
        np.cos(alpha - 0.7) + (2.0 / 3.0) * np.cos(2.0 * alpha - 2.1)
    )
    return d6, ha, mask, blood_w, envelope, texture, frame


def _config_images(spec: PhantomSpec, d6, mask, blood_w, envelope, texture) -> np.ndarray:
    """Noiseless motion-free image per configuration, (n_config, nx, ny).

    Myocardium pixels carry exactly s0(x, y) * exp(-b g^T D g) with the
    textured per-pixel S0; edges blend smoothly into blood (inward) and
    background (outward). Optional off-ring anatomy (edge blobs, sharp
    spots) rides on top without touching mask pixels.
    """
    entries = spec.protocol.entries
    design = design_matrix(entries)
    log_att = np.tensordot(design[:, 1:], np.moveaxis(d6, -1, 0), axes=(1, 0))
    att = np.exp(log_att)                                   # (n_config, nx, ny)
    tissue = (spec.s0 * texture)[None] * att
    blood = np.array(
        [BLOOD_FRACTION * spec.s0 * math.exp(-e.b * BLOOD_ADC) for e in entries]
    )
    images = envelope[None] * (
        (1.0 - blood_w)[None] * tissue + blood_w[None] * blood[:, None, None]
    )
    if spec.edge_blobs:
        nx, ny = spec.shape
        # asymmetric mid-edge blobs: break rotational symmetry with a long
        # lever arm and give the crop stage something to discard; compact
        # support keeps them off the myocardium so mask-pixel signals stay
        # closed-form exact, and inside the inscribed disk of every pyramid
        # level so coarse registration still sees them
        spots = (
            ((0.10 * nx, 0.42 * ny), 0.50),
            ((0.90 * nx, 0.58 * ny), 0.45),
        )
        fade = np.array([math.exp(-e.b * 0.5e-3) for e in entries])
        for bc, amp in spots:
            blob = _gaussian_blob(spec.shape, bc, 2.6, amp * spec.s0, truncate=True)
            images = images + fade[:, None, None] * blob[None]
    if spec.anatomy_spots:
        cx, cy = spec.center_xy
        nx, ny = spec.shape
        # sharp features with real rotational leverage: papillary-like spots
        # in the blood pool and chest-wall-like bumps outside the ring; a
        # rotationally symmetric ring alone leaves theta nearly unobservable.
        # Radii keep every support off the myocardium (closed-form signals
        # there) and clear of the endo/epi blend zones.
        spots = (
            (0.38 * spec.r_endo, 0.9, 1.2, 0.40),
            (0.30 * spec.r_endo, 3.9, 1.0, 0.30),
            (1.43 * spec.r_epi, 2.2, 2.0, 0.45),
            (1.36 * spec.r_epi, 5.2, 2.4, 0.35),
            (1.46 * spec.r_epi, 3.6, 1.8, 0.40),
        )
        fade = np.array([math.exp(-e.b * 0.5e-3) for e in entries])
        for rad, ang, sg, amp in spots:
            if rad + 3.5 * sg > min(nx, ny) / 2.0 - 1.0:
                continue        # would spill over the frame edge on small grids
            bc = (cx + rad * math.cos(ang), cy + rad * math.sin(ang))
            blob = _gaussian_blob(spec.shape, bc, sg, amp * spec.s0, truncate=True)
            images = images + fade[:, None, None] * blob[None]
    return images


def _gaussian_blob(shape, center, sigma, amplitude, truncate=False) -> np.ndarray:
    xs = np.arange(shape[0], dtype=np.float64)[:, None]
    ys = np.arange(shape[1], dtype=np.float64)[None, :]
    rr = (xs - center[0]) ** 2 + (ys - center[1]) ** 2
    blob = amplitude * np.exp(-rr / (2.0 * sigma * sigma))
    if truncate:
        # smooth fade to exact zero between 2.5 and 3.5 sigma
        blob *= 1.0 - _smoothstep((np.sqrt(rr) - 2.5 * sigma) / sigma)
    return blob


def _draw_motion(spec: PhantomSpec, rng: np.random.Generator) -> list[PlanarTransform]:
    """Per-frame true motion.

    Translations follow a breathing-like model: one dominant in-plane axis
    drawn per dataset and a per-frame amplitude uniform in +-max_shift along
    it, the way respiratory drift moves the heart along a fixed direction.
    Rotations and (for affine) log-scales are uniform and independent per
    frame. A scripted_motion list bypasses the draws entirely.
    """
    if spec.scripted_motion is not None:
        return list(spec.scripted_motion)
    n = spec.n_frames
    phi = rng.uniform(0.0, 2.0 * np.pi)
    axis = np.array([math.cos(phi), math.sin(phi)])
    amps = rng.uniform(-spec.max_shift, spec.max_shift, n)
    shifts = amps[:, None] * axis
    thetas = np.radians(rng.uniform(-spec.max_rotation, spec.max_rotation, n))

    out = []
    for k in range(n):
        tx, ty = shifts[k]
        if spec.max_scale:
            lim = math.log1p(spec.max_scale)
            s = math.exp(rng.uniform(-lim, lim))
            c, si = math.cos(thetas[k]), math.sin(thetas[k])
            out.append(
                PlanarTransform.affine(s * np.array([[c, -si], [si, c]]), (tx, ty))
            )
        elif spec.max_rotation:
            out.append(PlanarTransform.rigid(tx, ty, thetas[k]))
        else:
            out.append(PlanarTransform.translate(tx, ty))
    return out


def make_phantom(spec: PhantomSpec) -> tuple[ImageStack, Annotations, GroundTruth]:
    """Build the dataset and its ground truth.

    RNG streams: one for motion draws, one reserved for corruption-frame
    choice (used by the CLI), then one per frame for noise, all spawned from
    the seed, so e.g. changing noise_sigma never changes the motion.
    """
    for k in spec.corrupted:
        if not 0 <= k < spec.n_frames:
            raise ValueError(f"corrupted frame index {k} outside 0..{spec.n_frames - 1}")
    d6, ha_full, mask, blood_w, envelope, texture, card = _true_field(spec)
    images = _config_images(spec, d6, mask, blood_w, envelope, texture)
    entries = spec.protocol.entries
    n_config, nx, ny = images.shape
    n_ave = spec.n_ave

    streams = np.random.SeedSequence(spec.seed).spawn(spec.n_frames + 2)
    motion_rng = np.random.Generator(np.random.PCG64(streams[0]))
    transforms = _draw_motion(spec, motion_rng)

    blob = None
    if spec.chest_blob:
        bc = spec.chest_center
        if bc is None:
            bc = (0.11 * nx, 0.11 * ny)
        # compact support so a sane crop window can exclude it entirely
        blob = _gaussian_blob(
            spec.shape, bc, spec.chest_sigma, spec.chest_amp * spec.s0, truncate=True
        )
        blob_fade = np.array([math.exp(-e.b * BLOB_ADC) for e in entries])

    corrupted = frozenset(spec.corrupted)
    data = np.zeros((nx, ny, n_ave, n_config))
    clean = np.zeros_like(data)
    sigma = spec.noise_sigma * spec.s0
    for j in range(n_config):
        for a in range(n_ave):
            k = j * n_ave + a
            frame = images[j]
            clean[:, :, a, j] = frame
            if k in corrupted:
                frame = frame.copy()
                frame[mask] *= spec.corruption_factor
            t = transforms[k]
            if not t.is_identity:
                frame = apply_transform(frame, t.inverse())
            if blob is not None:
                frame = frame + blob_fade[j] * blob
            if sigma > 0:
                rng = np.random.Generator(np.random.PCG64(streams[2 + k]))
                n1 = rng.normal(0.0, sigma, frame.shape)
                n2 = rng.normal(0.0, sigma, frame.shape)
                frame = np.hypot(frame + n1, n2)
            data[:, :, a, j] = frame

    protocol = spec.protocol
    stack = ImageStack(data, 1.0, protocol)
    clean_stack = ImageStack(clean, 1.0, protocol)
    annotations = Annotations(mask.astype(np.uint8), spec.center_xy)

    s0_map = np.where(mask, spec.s0 * texture, 0.0)
    d6_masked = np.where(mask[..., None], d6, 0.0)
    eigenvalues = np.array(spec.eigenvalues, dtype=np.float64)
    evals = np.where(mask[..., None], eigenvalues[None, None, :], 0.0)
    evecs = np.zeros((nx, ny, 3, 3))
    # recompute the basis the same way _true_field did, for the truth record
    ha_rad = np.radians(ha_full)
    c3 = np.zeros((nx, ny, 3))
    c3[..., :2] = card.circum
    z3 = np.zeros((nx, ny, 3))
    z3[..., 2] = 1.0
    r3 = np.zeros((nx, ny, 3))
    r3[..., :2] = card.radial
    e1 = np.cos(ha_rad)[..., None] * c3 + np.sin(ha_rad)[..., None] * z3
    evecs[..., :, 0] = e1
    evecs[..., :, 2] = r3
    evecs[..., :, 1] = np.cross(r3, e1)
    evecs = np.where(mask[..., None, None], evecs, 0.0)
    truth_field = TensorField(
        s0_map, d6_masked, evals, evecs, mask.copy(), np.zeros_like(mask)
    )
    truth = GroundTruth(
        clean_stack,
        tuple(transforms),
        truth_field,
        np.where(mask, ha_full, np.nan),
        annotations,
        tuple(sorted(corrupted)),
    )
    return stack, annotations, truth


def choose_corrupted(spec_seed: int, n_frames: int, n_corrupt: int) -> tuple[int, ...]:
    """Deterministic corruption-frame choice from the seed's reserved
    stream (stream index 1, matching make_phantom's layout)."""
    streams = np.random.SeedSequence(spec_seed).spawn(2)
    rng = np.random.Generator(np.random.PCG64(streams[1]))
    picks = rng.choice(n_frames, size=n_corrupt, replace=False)
    return tuple(sorted(int(k) for k in picks))


# ---------------------------------------------------------------------------
# Truth persistence

def save_truth(out_dir, truth: GroundTruth) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clean_dir = out_dir / "clean"
    clean_dir.mkdir(exist_ok=True)
    stk.save_dataset(clean_dir, truth.clean_stack, truth.annotations)
    write_tensor_planes(out_dir / "truth_tensor.f32", truth.tensor, truth.ha)
    payload = {
        "corrupted": list(truth.corrupted),
        "clean_manifest": "clean/manifest.json",
        "tensor_file": "truth_tensor.f32",
        "transforms": [
            {"kind": t.kind, "params": list(t.parameters())} for t in truth.transforms
        ],
    }
    with open(out_dir / "truth.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_truth(truth_dir) -> GroundTruth:
    from .dti import read_tensor_planes

    truth_dir = Path(truth_dir)
    with open(truth_dir / "truth.json") as fh:
        payload = json.load(fh)
    clean_stack, _, annotations = stk.load_dataset(truth_dir / payload["clean_manifest"])
    field, ha = read_tensor_planes(
        truth_dir / payload["tensor_file"], (clean_stack.nx, clean_stack.ny)
    )
    transforms = []
    for item in payload["transforms"]:
        tx, ty, theta, a11, a12, a21, a22 = item["params"]
        kind = item["kind"]
        if kind == "translation":
            transforms.append(PlanarTransform.translate(tx, ty))
        elif kind == "rigid":
            transforms.append(PlanarTransform.rigid(tx, ty, theta))
        else:
            transforms.append(PlanarTransform.affine([[a11, a12], [a21, a22]], (tx, ty)))
    return GroundTruth(
        clean_stack,
        tuple(transforms),
        field,
        ha,
        annotations,
        tuple(payload["corrupted"]),
    )


# ---------------------------------------------------------------------------
# Truth comparison

@dataclass(frozen=True)
class TruthReport:
    """Pipeline-vs-truth errors. Motion residuals are reported after
    removing the mean offset over frames: the reference image sits at the
    stack's average position, so a common offset is not an error."""

    residual_px: np.ndarray         # per frame
    residual_deg: np.ndarray        # per frame
    residual_scale: np.ndarray      # per frame, max |singular value - 1|
    ha_mae: float
    tensor_rmse: float
    confusion: dict                 # rejected = positive

    @property
    def sensitivity(self) -> float:
        tp, fn = self.confusion["tp"], self.confusion["fn"]
        return tp / (tp + fn) if tp + fn else float("nan")

    @property
    def specificity(self) -> float:
        tn, fp = self.confusion["tn"], self.confusion["fp"]
        return tn / (tn + fp) if tn + fp else float("nan")


def _angle_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Orientation distance in degrees, HA being defined modulo 180."""
    d = np.abs(a - b) % 180.0
    return np.minimum(d, 180.0 - d)


def motion_residuals(
    estimated, true_transforms, subset=None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame residual (px, deg, scale) after gauge removal.

    E_k = estimated_k composed after true_k^{-1} would equal one common
    transform G for a perfect estimate against a displaced reference; the
    residual is E_k's parameter distance from the mean E. ``subset`` limits
    the gauge estimate to given frame indices (e.g. kept frames).
    """
    if isinstance(estimated, TransformSet):
        estimated = estimated.transforms
    n = len(estimated)
    if n != len(true_transforms):
        raise ValueError("transform counts differ")
    trans = np.empty((n, 2))
    thetas = np.empty(n)
    mats = np.empty((n, 2, 2))
    for k, (est, true) in enumerate(zip(estimated, true_transforms)):
        e = compose(true.inverse(), est)
        trans[k] = e.translation
        mats[k] = e.matrix
        thetas[k] = (
            e.theta
            if e.kind != "affine"
            else math.atan2(e.matrix[1, 0] - e.matrix[0, 1], e.matrix[0, 0] + e.matrix[1, 1])
        )
    idx = np.arange(n) if subset is None else np.asarray(subset, dtype=int)
    t_gauge = trans[idx].mean(axis=0)
    th_gauge = thetas[idx].mean()
    log_scale = 0.5 * np.log(np.abs(np.linalg.det(mats[idx])))
    s_gauge = math.exp(log_scale.mean())

    residual_px = np.hypot(*(trans - t_gauge).T)
    residual_deg = np.degrees(np.abs(thetas - th_gauge))
    svals = np.linalg.svd(mats, compute_uv=False)
    residual_scale = np.abs(svals / s_gauge - 1.0).max(axis=1)
    return residual_px, residual_deg, residual_scale


def compare_to_truth(
    tset: TransformSet,
    verdicts: FrameVerdicts,
    field: TensorField,
    ha_map: np.ndarray,
    truth: GroundTruth,
) -> TruthReport:
    residual_px, residual_deg, residual_scale = motion_residuals(
        tset, truth.transforms, subset=verdicts.kept_indices()
    )

    myo = truth.annotations.myo_mask.astype(bool)
    both = myo & field.valid & np.isfinite(ha_map) & np.isfinite(truth.ha)
    if not both.any():
        raise ValueError("no overlapping valid pixels for HA comparison")
    ha_mae = float(_angle_error(ha_map[both], truth.ha[both]).mean())

    fit_px = myo & field.valid & truth.tensor.valid
    diff = field.d6[fit_px] - truth.tensor.d6[fit_px]
    weights = np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])  # Frobenius counts off-diagonals twice
    tensor_rmse = float(np.sqrt(((diff**2) * weights).sum(axis=1).mean()))

    corrupted = set(truth.corrupted)
    rejected = ~verdicts.keep
    tp = sum(1 for k in range(len(rejected)) if rejected[k] and k in corrupted)
    fp = sum(1 for k in range(len(rejected)) if rejected[k] and k not in corrupted)
    fn = sum(1 for k in range(len(rejected)) if not rejected[k] and k in corrupted)
    tn = len(rejected) - tp - fp - fn
    return TruthReport(
        residual_px,
        residual_deg,
        residual_scale,
        ha_mae,
        tensor_rmse,
        {"tp": tp, "fp": fp, "fn": fn, "tn": tn},
    )
