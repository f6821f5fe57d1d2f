"""Truncated SVD of the Casorati matrix and low-rank image operations.

The SVD is computed through the Gram matrix of the smaller (frame)
dimension, which for a typical 96x96x9x13 stack is ~100x100 versus ~9000
pixels, then back-projected to the pixel basis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .stack import ImageStack, flatten_casorati, unflatten_casorati

log = logging.getLogger(__name__)

_ZERO_SV_RTOL = 1e-12


@dataclass(frozen=True)
class SvdFactors:
    """Top-L singular triples of a Casorati matrix.

    ``spatial_basis`` has orthonormal columns (pixel basis images),
    ``dynamic_factors`` orthonormal rows (per-frame weights), and
    ``singular_values`` is nonincreasing. Sign convention: in each spatial
    basis column the entry of largest magnitude is positive, which makes
    the decomposition deterministic.
    """

    spatial_basis: np.ndarray     # (n_pixels, rank)
    singular_values: np.ndarray   # (rank,)
    dynamic_factors: np.ndarray   # (rank, n_frames)
    rank: int

    def reconstruct(self) -> np.ndarray:
        return self.spatial_basis @ (self.singular_values[:, None] * self.dynamic_factors)


def _orthonormal_completion(basis: list[np.ndarray], n: int) -> np.ndarray:
    """First canonical vector made orthonormal to ``basis`` by Gram-Schmidt."""
    for i in range(n):
        v = np.zeros(n)
        v[i] = 1.0
        for u in basis:
            v -= (u @ v) * u
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            return v / norm
    raise RuntimeError("could not complete orthonormal basis")


def truncated_svd(matrix: np.ndarray, rank: int) -> SvdFactors:
    """Top-``rank`` singular triples of ``matrix`` via the smaller Gram matrix.

    Raises ValueError if ``rank`` is outside ``[1, min(matrix.shape)]``.
    Zero singular values are permitted: their basis columns are filled by
    Gram-Schmidt completion and flagged in the log.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    m, n = a.shape
    if not 1 <= rank <= min(m, n):
        raise ValueError(f"rank {rank} out of range [1, {min(m, n)}]")

    tall = m >= n
    gram = a.T @ a if tall else a @ a.T
    evals, evecs = np.linalg.eigh(gram)          # ascending
    order = np.argsort(evals)[::-1][:rank]
    svals = np.sqrt(np.clip(evals[order], 0.0, None))
    small = evecs[:, order]                       # (min_dim, rank), orthonormal

    cutoff = svals[0] * _ZERO_SV_RTOL if svals[0] > 0 else 0.0
    big_cols: list[np.ndarray] = []
    for i in range(rank):
        if svals[i] > cutoff:
            col = (a @ small[:, i] if tall else a.T @ small[:, i]) / svals[i]
        else:
            log.warning("singular value %d is zero; completing basis by Gram-Schmidt", i)
            svals[i] = 0.0
            col = _orthonormal_completion(big_cols, m if tall else n)
        big_cols.append(col)
    big = np.stack(big_cols, axis=1)              # (max_dim, rank)

    u, v = (big, small.T) if tall else (small, big.T)
    # deterministic sign: largest-magnitude entry of each spatial column positive
    for i in range(rank):
        j = int(np.argmax(np.abs(u[:, i])))
        if u[j, i] < 0:
            u[:, i] = -u[:, i]
            v[i, :] = -v[i, :]
    return SvdFactors(spatial_basis=u, singular_values=svals, dynamic_factors=v, rank=rank)


def reconstruct_rank(stack: ImageStack, rank: int) -> ImageStack:
    """Rank-``rank`` approximation of every frame (used at L=6 for denoising).

    Negative reconstructed values are allowed and preserved.
    """
    factors = truncated_svd(flatten_casorati(stack), rank)
    return stack.with_data(unflatten_casorati(factors.reconstruct(), stack.data.shape))


def rank1_reference(stack: ImageStack) -> np.ndarray:
    """Registration reference: geometric average of the rank-1 frames.

    With rank-1 frames ``f_k = phi * w_k`` (signs normalized so mean(w) > 0)
    this is ``phi`` scaled by the geometric mean of the weights, i.e. the
    pixelwise geometric mean of the rank-1 reconstructed frames. Requires
    all weights strictly positive, which holds for nonnegative stacks with
    a dominant mean component.
    """
    factors = truncated_svd(flatten_casorati(stack), 1)
    phi = factors.spatial_basis[:, 0]
    weights = factors.singular_values[0] * factors.dynamic_factors[0, :]
    if weights.mean() < 0:
        phi, weights = -phi, -weights
    if np.any(weights <= 0):
        raise ValueError(
            "rank-1 frame weights are not all positive; input stack looks pathological"
        )
    scale = np.exp(np.mean(np.log(weights)))
    ref = (phi * scale).reshape(stack.nx, stack.ny)
    # Perron-Frobenius makes phi nonnegative for nonnegative data; clip roundoff
    return np.maximum(ref, 0.0)


def reference_image(stack: ImageStack, rank: int = 1) -> np.ndarray:
    """Reference image for registration at a configurable rank.

    Rank 1 is the exact geometric-average reference. Higher ranks fall back
    to the pixelwise geometric mean of the rank-``rank`` frames with
    nonpositive values clamped to a tiny floor before the log.
    """
    if rank == 1:
        return rank1_reference(stack)
    recon = reconstruct_rank(stack, rank).data
    frames = recon.reshape(stack.nx, stack.ny, -1)
    floor = 1e-9 * max(float(np.abs(frames).max()), 1e-300)
    return np.exp(np.mean(np.log(np.maximum(frames, floor)), axis=2))
