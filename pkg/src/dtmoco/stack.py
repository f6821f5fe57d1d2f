"""Data model and file I/O for 4-D diffusion-weighted image stacks.

A dataset is one short-axis slice: a real-valued array of shape
``(nx, ny, n_ave, n_dwi)`` plus the diffusion protocol labelling the last
axis and the myocardium annotations (binary mask + blood-pool center).
On disk a dataset is a small JSON manifest next to headerless binaries.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

STACK_DTYPE = "<f4"   # little-endian float32, headerless
MASK_DTYPE = "u1"     # 8-bit {0,1}
PLANE_AXES = (3, 2, 1, 0)  # file order: x fastest, then y, then ave, then dwi

UNIT_NORM_TOL = 1e-9


class DatasetError(ValueError):
    """A dataset, manifest, protocol, or annotation failed validation."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ProtocolEntry:
    """One diffusion configuration: b-value (s/mm^2) and unit direction.

    ``direction`` is None for b0 entries.
    """

    b: float
    direction: tuple[float, float, float] | None

    def __post_init__(self):
        if self.b < 0:
            raise DatasetError(f"negative b-value {self.b}")
        if self.direction is not None:
            norm = float(np.linalg.norm(self.direction))
            if abs(norm - 1.0) > UNIT_NORM_TOL:
                raise DatasetError(
                    f"gradient direction {self.direction} has norm {norm!r}, expected 1"
                )

    @property
    def is_b0(self) -> bool:
        return self.direction is None

    def key(self):
        """Hashable identity used to group frames of equal contrast."""
        return (self.b, self.direction)


@dataclass(frozen=True)
class Protocol:
    """Ordered diffusion configurations indexing the DWI axis of a stack."""

    entries: tuple[ProtocolEntry, ...]

    def __post_init__(self):
        if len(self.entries) == 0:
            raise DatasetError("protocol has no entries")

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> ProtocolEntry:
        return self.entries[i]

    @property
    def b_values(self) -> tuple[float, ...]:
        return tuple(sorted({e.b for e in self.entries}))

    def n_b0(self) -> int:
        return sum(1 for e in self.entries if e.is_b0)

    def distinct_directions(self) -> list[tuple[float, float, float]]:
        """Distinct non-b0 directions, sign-insensitive (g and -g coincide)."""
        seen: list[np.ndarray] = []
        for e in self.entries:
            if e.is_b0:
                continue
            g = np.asarray(e.direction, float)
            if not any(
                min(np.linalg.norm(g - h), np.linalg.norm(g + h)) < 1e-6 for h in seen
            ):
                seen.append(g)
        return [tuple(g) for g in seen]

    def validate_for_fitting(self) -> None:
        """Tensor fitting needs at least one b0 and six distinct directions."""
        if self.n_b0() < 1:
            raise DatasetError("protocol has no b0 entry; tensor fit needs one")
        if len(self.distinct_directions()) < 6:
            raise DatasetError(
                "protocol has fewer than 6 distinct encoding directions"
            )


@dataclass(frozen=True)
class ImageStack:
    """4-D image stack ``data[x, y, ave, dwi]`` with its protocol.

    Data is float64 in memory (files store float32). Entry ``protocol[d]``
    labels ``data[..., d]``. Instances are immutable; arrays are marked
    read-only so they can be shared across workers.
    """

    data: np.ndarray
    pixel_spacing: float
    protocol: Protocol

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4:
            raise DatasetError(f"stack data must be 4-D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise DatasetError(f"stack has an empty dimension: {data.shape}")
        if not np.isfinite(data).all():
            raise DatasetError("stack data contains NaN or Inf")
        if len(self.protocol) != data.shape[3]:
            raise DatasetError(
                f"protocol lists {len(self.protocol)} configs but stack has "
                f"{data.shape[3]} DWI volumes"
            )
        if not self.pixel_spacing > 0:
            raise DatasetError(f"pixel spacing must be positive, got {self.pixel_spacing}")
        object.__setattr__(self, "data", _readonly(data))

    @property
    def nx(self) -> int:
        return self.data.shape[0]

    @property
    def ny(self) -> int:
        return self.data.shape[1]

    @property
    def n_ave(self) -> int:
        return self.data.shape[2]

    @property
    def n_dwi(self) -> int:
        return self.data.shape[3]

    @property
    def n_frames(self) -> int:
        return self.n_ave * self.n_dwi

    def frame_index(self, ave: int, dwi: int) -> int:
        return dwi * self.n_ave + ave

    def frame_coords(self, k: int) -> tuple[int, int]:
        """(ave, dwi) for flat frame index ``k = dwi * n_ave + ave``."""
        return k % self.n_ave, k // self.n_ave

    def frame(self, k: int) -> np.ndarray:
        a, d = self.frame_coords(k)
        return self.data[:, :, a, d]

    def config_of(self, k: int) -> ProtocolEntry:
        """Protocol entry of flat frame index ``k``."""
        return self.protocol[self.frame_coords(k)[1]]

    def with_data(self, data: np.ndarray) -> "ImageStack":
        return dataclasses.replace(self, data=data)


@dataclass(frozen=True)
class Annotations:
    """Per-slice myocardium mask and blood-pool center, in pixel coordinates."""

    myo_mask: np.ndarray                  # uint8 {0,1}, shape (nx, ny)
    blood_pool_center: tuple[float, float]

    def __post_init__(self):
        mask = np.asarray(self.myo_mask)
        if mask.ndim != 2:
            raise DatasetError(f"mask must be 2-D, got shape {mask.shape}")
        if not np.isin(mask, (0, 1)).all():
            raise DatasetError("mask values must be 0 or 1")
        mask = mask.astype(np.uint8)
        if mask.sum() == 0:
            raise DatasetError("myocardium mask is empty")
        cx, cy = self.blood_pool_center
        if not (0 <= cx < mask.shape[0] and 0 <= cy < mask.shape[1]):
            raise DatasetError(f"blood-pool center {self.blood_pool_center} outside image")
        if mask[int(round(cx)), int(round(cy))]:
            raise DatasetError(
                f"blood-pool center {self.blood_pool_center} lies on a mask pixel"
            )
        object.__setattr__(self, "myo_mask", _readonly(mask))
        object.__setattr__(self, "blood_pool_center", (float(cx), float(cy)))


# ---------------------------------------------------------------------------
# Casorati unfolding

def flatten_casorati(stack: ImageStack) -> np.ndarray:
    """Unfold a stack into the (pixels x frames) Casorati matrix.

    Row ``x * ny + y`` holds pixel (x, y); column ``d * n_ave + a`` holds
    frame (ave=a, dwi=d). The unfolding is an exact bijection with
    :func:`unflatten_casorati`.
    """
    nx, ny, na, nd = stack.data.shape
    return stack.data.transpose(0, 1, 3, 2).reshape(nx * ny, nd * na)


def unflatten_casorati(matrix: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    """Inverse of :func:`flatten_casorati`; returns a plain 4-D array."""
    nx, ny, na, nd = shape
    if matrix.shape != (nx * ny, nd * na):
        raise ValueError(f"matrix shape {matrix.shape} does not match stack shape {shape}")
    return matrix.reshape(nx, ny, nd, na).transpose(0, 1, 3, 2)


# ---------------------------------------------------------------------------
# Cropping

def central_crop(
    stack: ImageStack,
    size: tuple[int, int],
    offset: tuple[int, int] = (0, 0),
) -> tuple[ImageStack, tuple[int, int]]:
    """Crop a centered window of ``size=(w, h)`` shifted by ``offset``.

    The window center is the geometric image center plus ``offset``; on odd
    remainders the window is biased toward the low index. Returns the cropped
    stack and the window origin ``(ox, oy)`` so callers can re-express
    annotations in cropped coordinates.
    """
    w, h = int(size[0]), int(size[1])
    if w < 1 or h < 1:
        raise DatasetError(f"crop size must be positive, got {size}")
    ox = (stack.nx - w) // 2 + int(offset[0])
    oy = (stack.ny - h) // 2 + int(offset[1])
    if ox < 0 or oy < 0 or ox + w > stack.nx or oy + h > stack.ny:
        raise DatasetError(
            f"crop window {w}x{h} at origin ({ox}, {oy}) exceeds stack "
            f"bounds {stack.nx}x{stack.ny}"
        )
    cropped = stack.with_data(stack.data[ox : ox + w, oy : oy + h])
    return cropped, (ox, oy)


def crop_annotations(ann: Annotations, origin: tuple[int, int], size: tuple[int, int]) -> Annotations:
    """Re-express annotations inside a crop window returned by central_crop."""
    ox, oy = origin
    w, h = size
    return Annotations(
        myo_mask=ann.myo_mask[ox : ox + w, oy : oy + h],
        blood_pool_center=(ann.blood_pool_center[0] - ox, ann.blood_pool_center[1] - oy),
    )


# ---------------------------------------------------------------------------
# Binary plane I/O (shared by stacks, masks, and tensor plane files)

def write_planes(path, planes: np.ndarray) -> None:
    """Write ``planes[k, x, y]`` as k float32 planes, x fastest varying."""
    arr = np.asarray(planes)
    if arr.ndim == 2:
        arr = arr[None]
    np.ascontiguousarray(arr.transpose(0, 2, 1)).astype(STACK_DTYPE).tofile(path)


def read_planes(path, shape_xy: tuple[int, int], n_planes: int) -> np.ndarray:
    """Read float32 planes written by :func:`write_planes`, as float64,
    shaped (n_planes, nx, ny)."""
    nx, ny = shape_xy
    raw = np.fromfile(path, dtype=STACK_DTYPE)
    if raw.size != nx * ny * n_planes:
        raise DatasetError(
            f"{path}: expected {nx * ny * n_planes} float32 values, found {raw.size}"
        )
    return raw.reshape(n_planes, ny, nx).transpose(0, 2, 1).astype(np.float64)


def _write_stack_binary(path, data: np.ndarray) -> None:
    np.ascontiguousarray(data.transpose(PLANE_AXES)).astype(STACK_DTYPE).tofile(path)


def _read_stack_binary(path, dims: tuple[int, int, int, int]) -> np.ndarray:
    nx, ny, na, nd = dims
    raw = np.fromfile(path, dtype=STACK_DTYPE)
    if raw.size != nx * ny * na * nd:
        raise DatasetError(
            f"{path}: expected {nx * ny * na * nd} float32 values, found {raw.size}"
        )
    return raw.reshape(nd, na, ny, nx).transpose(PLANE_AXES).astype(np.float64)


def _write_mask_binary(path, mask: np.ndarray) -> None:
    np.ascontiguousarray(mask.transpose(1, 0)).astype(MASK_DTYPE).tofile(path)


def _read_mask_binary(path, shape_xy: tuple[int, int]) -> np.ndarray:
    nx, ny = shape_xy
    raw = np.fromfile(path, dtype=MASK_DTYPE)
    if raw.size != nx * ny:
        raise DatasetError(f"{path}: expected {nx * ny} mask bytes, found {raw.size}")
    return raw.reshape(ny, nx).transpose(1, 0)


# ---------------------------------------------------------------------------
# Dataset manifest

def save_dataset(
    out_dir,
    stack: ImageStack,
    annotations: Annotations,
    manifest_name: str = "manifest.json",
) -> Path:
    """Write a dataset directory (manifest + stack/mask binaries).

    Returns the manifest path. Stack values are stored as float32, so a
    save/load round trip is bit-exact only for float32-representable data.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_stack_binary(out_dir / "stack.f32", stack.data)
    _write_mask_binary(out_dir / "myo_mask.u8", annotations.myo_mask)
    manifest = {
        "stack_file": "stack.f32",
        "dims": [int(d) for d in stack.data.shape],
        "pixel_spacing_mm": float(stack.pixel_spacing),
        "protocol": [
            {
                "b": float(e.b),
                "gx": 0.0 if e.is_b0 else float(e.direction[0]),
                "gy": 0.0 if e.is_b0 else float(e.direction[1]),
                "gz": 0.0 if e.is_b0 else float(e.direction[2]),
            }
            for e in stack.protocol.entries
        ],
        "mask_file": "myo_mask.u8",
        "center": [float(c) for c in annotations.blood_pool_center],
    }
    path = out_dir / manifest_name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path) -> tuple[ImageStack, Protocol, Annotations]:
    """Load and validate a dataset from its manifest file (a dataset
    directory also works and means its manifest.json)."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path}: invalid manifest JSON ({e})") from e

    for key in ("stack_file", "dims", "pixel_spacing_mm", "protocol", "mask_file", "center"):
        if key not in manifest:
            raise DatasetError(f"{manifest_path}: manifest missing key {key!r}")

    dims = tuple(int(v) for v in manifest["dims"])
    if len(dims) != 4:
        raise DatasetError(f"{manifest_path}: dims must have 4 entries, got {manifest['dims']}")

    entries = []
    for row in manifest["protocol"]:
        b = float(row["b"])
        g = (float(row["gx"]), float(row["gy"]), float(row["gz"]))
        entries.append(ProtocolEntry(b=b, direction=None if b == 0 else g))
    protocol = Protocol(entries=tuple(entries))
    if len(protocol) != dims[3]:
        raise DatasetError(
            f"{manifest_path}: manifest declares {dims[3]} DWIs but protocol "
            f"lists {len(protocol)}"
        )

    base = manifest_path.parent
    stack_path = base / manifest["stack_file"]
    mask_path = base / manifest["mask_file"]
    for p in (stack_path, mask_path):
        if not p.is_file():
            raise DatasetError(f"dataset file not found: {p}")

    data = _read_stack_binary(stack_path, dims)
    stack = ImageStack(data=data, pixel_spacing=float(manifest["pixel_spacing_mm"]), protocol=protocol)
    mask = _read_mask_binary(mask_path, dims[:2])
    ann = Annotations(myo_mask=mask, blood_pool_center=tuple(float(v) for v in manifest["center"]))
    return stack, protocol, ann
