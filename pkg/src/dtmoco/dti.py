"""Per-config averaging, log-linear diffusion tensor fit, eigensystem, and
helix-angle maps.

The tensor is fitted pixelwise by ordinary least squares on

    ln S = ln S0 - b g^T D g

jointly over all (b, g) configurations, b0 rows carrying zero diffusion
terms. Signals are clamped to eps = 1e-6 * max(S) before the log; clamped
pixels keep a quality flag. Negative eigenvalues are preserved, they feed
the fit-quality metrics downstream.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .stack import Annotations, ImageStack, ProtocolEntry, read_planes, write_planes
from .selection import FrameVerdicts

CLAMP_REL = 1e-6
HA_PLANE_TOL = 1e-9      # |projection onto {c,z}| below this: HA undefined
_EIG_GROUP_REL = 1e-9


# ---------------------------------------------------------------------------
# Averaging kept frames per diffusion configuration

@dataclass(frozen=True)
class ConfigMeans:
    """Arithmetic mean image of the kept frames of each distinct
    (b, direction) configuration, in first-occurrence protocol order."""

    entries: tuple[ProtocolEntry, ...]
    images: np.ndarray              # (n_config, nx, ny)
    counts: tuple[int, ...]         # kept frames behind each mean

    def __post_init__(self):
        if len(self.entries) != self.images.shape[0] or len(self.entries) != len(self.counts):
            raise ValueError("entries, images, counts disagree on config count")
        img = np.asarray(self.images, dtype=np.float64)
        img.flags.writeable = False
        object.__setattr__(self, "images", img)


def average_by_config(stack: ImageStack, verdicts: FrameVerdicts) -> ConfigMeans:
    """Mean over kept frames per configuration.

    Raises if any configuration loses all its frames, naming it, since the
    tensor fit downstream needs every configuration.
    """
    if len(verdicts.keep) != stack.n_frames:
        raise ValueError("verdicts do not match the stack frame count")
    order: list = []
    members: dict = {}
    for k in range(stack.n_frames):
        key = stack.config_of(k).key()
        if key not in members:
            order.append(stack.config_of(k))
            members[key] = []
        if verdicts.keep[k]:
            members[key].append(k)
    images = np.empty((len(order), stack.nx, stack.ny))
    counts = []
    for i, entry in enumerate(order):
        kept = members[entry.key()]
        if not kept:
            raise ValueError(
                f"configuration b={entry.b} direction={entry.direction} has no kept frames"
            )
        images[i] = np.mean([stack.frame(k) for k in kept], axis=0)
        counts.append(len(kept))
    return ConfigMeans(tuple(order), images, tuple(counts))


# ---------------------------------------------------------------------------
# Design matrix and OLS fit

def design_matrix(entries) -> np.ndarray:
    """Rows [1, -b gx^2, -b gy^2, -b gz^2, -2b gxgy, -2b gxgz, -2b gygz]
    against coefficients [ln S0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz]."""
    rows = np.zeros((len(entries), 7))
    rows[:, 0] = 1.0
    for i, entry in enumerate(entries):
        if entry.direction is None:
            continue
        gx, gy, gz = entry.direction
        b = entry.b
        rows[i, 1:] = (
            -b * gx * gx, -b * gy * gy, -b * gz * gz,
            -2 * b * gx * gy, -2 * b * gx * gz, -2 * b * gy * gz,
        )
    return rows


@dataclass(frozen=True)
class TensorField:
    """Pixelwise fit result. ``d6`` stacks (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz);
    eigenvalues are sorted nonincreasing, eigenvectors are the matching
    columns. Arrays are zero outside ``valid``."""

    s0: np.ndarray          # (nx, ny)
    d6: np.ndarray          # (nx, ny, 6)
    evals: np.ndarray       # (nx, ny, 3) descending
    evecs: np.ndarray       # (nx, ny, 3, 3) columns e1,e2,e3
    valid: np.ndarray       # (nx, ny) bool
    clamped: np.ndarray     # (nx, ny) bool, log clamp hit during the fit

    def __post_init__(self):
        for name in ("s0", "d6", "evals", "evecs", "valid", "clamped"):
            arr = getattr(self, name)
            arr.flags.writeable = False

    def tensor_at(self, x: int, y: int) -> np.ndarray:
        xx, yy, zz, xy, xz, yz = self.d6[x, y]
        return np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])

    def with_valid(self, valid: np.ndarray) -> "TensorField":
        return dataclasses.replace(self, valid=self.valid & valid)


def fit_tensor(means: ConfigMeans, mask: np.ndarray) -> TensorField:
    """OLS log-linear tensor fit on every mask pixel.

    Needs at least 7 configurations spanning a rank-7 design; anything less
    is a protocol error and raises.
    """
    entries = means.entries
    if len(entries) < 7:
        raise ValueError(f"tensor fit needs >= 7 configurations, got {len(entries)}")
    design = design_matrix(entries)
    if np.linalg.matrix_rank(design) < 7:
        raise ValueError("design matrix is rank deficient; protocol cannot resolve a tensor")
    mask = np.asarray(mask).astype(bool)
    if mask.shape != means.images.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} != image shape {means.images.shape[1:]}")
    if not mask.any():
        raise ValueError("mask is empty")

    signals = means.images[:, mask]                     # (n_config, n_pix)
    eps = CLAMP_REL * float(means.images.max())
    if eps <= 0:
        raise ValueError("signals are nonpositive everywhere")
    clamped_px = (signals < eps).any(axis=0)
    logs = np.log(np.maximum(signals, eps))

    q, r = np.linalg.qr(design)
    beta = solve_triangular(r, q.T @ logs)              # (7, n_pix)

    nx, ny = mask.shape
    s0 = np.zeros((nx, ny))
    d6 = np.zeros((nx, ny, 6))
    clamped = np.zeros((nx, ny), dtype=bool)
    s0[mask] = np.exp(beta[0])
    d6[mask] = beta[1:].T
    clamped[mask] = clamped_px

    d_mats = np.zeros((int(mask.sum()), 3, 3))
    xx, yy, zz, xy, xz, yz = beta[1:]
    d_mats[:, 0, 0] = xx
    d_mats[:, 1, 1] = yy
    d_mats[:, 2, 2] = zz
    d_mats[:, 0, 1] = d_mats[:, 1, 0] = xy
    d_mats[:, 0, 2] = d_mats[:, 2, 0] = xz
    d_mats[:, 1, 2] = d_mats[:, 2, 1] = yz
    vals, vecs = _eig3_batch(d_mats)

    evals = np.zeros((nx, ny, 3))
    evecs = np.zeros((nx, ny, 3, 3))
    evals[mask] = vals
    evecs[mask] = vecs
    return TensorField(s0, d6, evals, evecs, mask.copy(), clamped)


def forward_signals(s0: np.ndarray, d6: np.ndarray, entries) -> np.ndarray:
    """S = S0 * exp(-b g^T D g) per configuration; inverse of the fit."""
    design = design_matrix(entries)
    with np.errstate(divide="ignore"):
        beta = np.concatenate(
            [np.log(s0)[None, ...], np.moveaxis(d6, -1, 0)], axis=0
        )
    logs = np.tensordot(design, beta, axes=(1, 0))
    return np.exp(logs)


# ---------------------------------------------------------------------------
# Deterministic symmetric 3x3 eigensystem

def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip each eigenvector (column) so its largest-|.| component is
    positive; first index wins magnitude ties."""
    comp = np.argmax(np.abs(vecs), axis=-2)                       # (..., 3)
    picked = np.take_along_axis(vecs, comp[..., None, :], axis=-2)[..., 0, :]
    return np.where(picked[..., None, :] < 0, -vecs, vecs)


def _axis_rebasis(block: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal basis of the subspace spanned by the
    columns of ``block``: greedily maximize |x|, then |y| component."""
    q, _ = np.linalg.qr(block)
    basis = []
    for axis in np.eye(3):
        if len(basis) == block.shape[1]:
            break
        v = q @ (q.T @ axis)
        for u in basis:
            v = v - u * (u @ v)
        norm = np.linalg.norm(v)
        if norm > 1e-9:
            basis.append(v / norm)
    # greedy axis projections always span the subspace (see tests)
    if len(basis) != block.shape[1]:
        raise AssertionError("degenerate-subspace rebasis lost a dimension")
    return np.stack(basis, axis=1)


def _eig3_batch(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(mats)
    vals = vals[..., ::-1]
    vecs = vecs[..., ::-1]
    scale = np.linalg.norm(mats, axis=(-2, -1))
    tol = _EIG_GROUP_REL * scale
    gaps = vals[..., :-1] - vals[..., 1:]
    degenerate = np.flatnonzero((gaps <= tol[..., None]).any(axis=-1))
    for i in degenerate:
        v, w = vals[i], vecs[i]
        j = 0
        while j < 3:
            k = j + 1
            while k < 3 and v[j] - v[k] <= tol[i]:
                k += 1
            if k - j > 1:
                w[:, j:k] = _axis_rebasis(w[:, j:k])
            j = k
    return vals, _fix_signs(vecs)


def eig3_sym(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and matching eigenvector columns of a
    symmetric 3x3, deterministic: largest-|.| component of each vector is
    positive, and repeated eigenvalues take the subspace basis maximizing
    the |x| then |y| components."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {d.shape}")
    if not np.allclose(d, d.T, rtol=0, atol=1e-12 * max(1.0, float(np.abs(d).max()))):
        raise ValueError("matrix is not symmetric")
    sym = (d + d.T) / 2.0
    vals, vecs = _eig3_batch(sym[None])
    return vals[0], vecs[0]


# ---------------------------------------------------------------------------
# Cardiac local frame and helix angle

@dataclass(frozen=True)
class CardiacFrame:
    """Per-pixel right-handed basis {radial, circumferential, +z} around the
    LV center. ``defined`` is False at the center pixel itself."""

    lv_center: tuple[float, float]
    radial: np.ndarray          # (nx, ny, 2) in-plane unit r-hat
    circum: np.ndarray          # (nx, ny, 2) in-plane unit c-hat = z x r
    defined: np.ndarray         # (nx, ny) bool

    def __post_init__(self):
        for name in ("radial", "circum", "defined"):
            getattr(self, name).flags.writeable = False


def cardiac_frame(shape: tuple[int, int], lv_center: tuple[float, float]) -> CardiacFrame:
    cx, cy = lv_center
    dx = np.arange(shape[0], dtype=np.float64)[:, None] - cx
    dy = np.arange(shape[1], dtype=np.float64)[None, :] - cy
    dx, dy = np.broadcast_arrays(dx, dy)
    norm = np.hypot(dx, dy)
    defined = norm > 1e-12
    safe = np.where(defined, norm, 1.0)
    radial = np.stack([dx / safe, dy / safe], axis=-1)
    circum = np.stack([-radial[..., 1], radial[..., 0]], axis=-1)
    return CardiacFrame((float(cx), float(cy)), radial, circum, defined)


def frame_for_annotations(ann: Annotations, shape: tuple[int, int]) -> CardiacFrame:
    return cardiac_frame(shape, ann.blood_pool_center)


def _ha_from_components(c_comp, z_comp):
    """HA in degrees from the {c, z} plane components, NaN where the
    projection vanishes. Sign fixed so c_comp >= 0 (and z_comp >= 0 when
    c_comp is exactly 0), making the result invariant to e1 -> -e1."""
    c_comp = np.asarray(c_comp, dtype=np.float64)
    z_comp = np.asarray(z_comp, dtype=np.float64)
    ok = np.hypot(c_comp, z_comp) > HA_PLANE_TOL
    flip = (c_comp < 0) | ((c_comp == 0) & (z_comp < 0))
    sign = np.where(flip, -1.0, 1.0)
    ha = np.degrees(np.arctan2(sign * z_comp, sign * c_comp))
    return np.where(ok, ha, np.nan)


def helix_angle(e1: np.ndarray, pixel: tuple[int, int], frame: CardiacFrame) -> float:
    """Angle of e1's tangent-plane projection against the circumferential
    direction, in [-90, 90] degrees. NaN when e1 is radial within 1e-9."""
    x, y = pixel
    if not frame.defined[x, y]:
        raise ValueError(f"pixel {pixel} is the LV center; no local frame there")
    e1 = np.asarray(e1, dtype=np.float64)
    c_comp = e1[0] * frame.circum[x, y, 0] + e1[1] * frame.circum[x, y, 1]
    z_comp = e1[2]
    return float(_ha_from_components(c_comp, z_comp))


def helix_angle_map(field: TensorField, frame: CardiacFrame) -> tuple[np.ndarray, np.ndarray]:
    """HA per valid pixel (NaN elsewhere) and the bool map of pixels where
    HA is defined; intersect the latter with field.valid downstream."""
    e1 = field.evecs[..., :, 0]
    c_comp = (e1[..., :2] * frame.circum).sum(axis=-1)
    ha = _ha_from_components(c_comp, e1[..., 2])
    ok = np.isfinite(ha) & frame.defined & field.valid
    return np.where(ok, ha, np.nan), ok


# ---------------------------------------------------------------------------
# Serialization: 9 planes (S0, 6 tensor components, HA, validity)

def write_tensor_planes(path, field: TensorField, ha: np.ndarray) -> None:
    planes = np.concatenate(
        [
            field.s0[None],
            np.moveaxis(field.d6, -1, 0),
            ha[None],
            field.valid.astype(np.float64)[None],
        ],
        axis=0,
    )
    write_planes(path, planes)


def read_tensor_planes(path, shape: tuple[int, int]) -> tuple[TensorField, np.ndarray]:
    planes = read_planes(path, shape, 9)
    s0 = planes[0]
    d6 = np.moveaxis(planes[1:7], 0, -1)
    ha = planes[7]
    valid = planes[8] != 0

    d_mats = np.zeros((valid.sum(), 3, 3))
    comp = d6[valid]
    d_mats[:, 0, 0], d_mats[:, 1, 1], d_mats[:, 2, 2] = comp[:, 0], comp[:, 1], comp[:, 2]
    d_mats[:, 0, 1] = d_mats[:, 1, 0] = comp[:, 3]
    d_mats[:, 0, 2] = d_mats[:, 2, 0] = comp[:, 4]
    d_mats[:, 1, 2] = d_mats[:, 2, 1] = comp[:, 5]
    vals, vecs = _eig3_batch(d_mats)
    evals = np.zeros(valid.shape + (3,))
    evecs = np.zeros(valid.shape + (3, 3))
    evals[valid] = vals
    evecs[valid] = vecs
    field = TensorField(s0, d6, evals, evecs, valid, np.zeros_like(valid))
    return field, ha
