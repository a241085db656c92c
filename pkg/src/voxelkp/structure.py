"""Learnable keypoint adjacency and differentiable Gaussian line rendering.

Edge maps are the structural bottleneck of the reconstruction objective: each
keypoint pair contributes a Gaussian-profile line scaled by its adjacency
weight, and the per-pixel maximum over pairs forms the map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
from torch import Tensor

from .geometry import indices_to_pixels

logger = logging.getLogger(__name__)


class StructureError(ValueError):
    """Invalid adjacency or rendering input."""


@dataclass
class EdgeMap:
    values: Tensor  # (1, H, W), range [0, 1]
    view_index: int = 0


def adjacency_weights(logits: Tensor) -> Tensor:
    """Symmetrized sigmoid weights with a hard-zero diagonal.

    weights = sigmoid((logits + logits^T) / 2), diagonal forced to 0.
    """
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise StructureError(f"adjacency logits must be square, got {tuple(logits.shape)}")
    sym = (logits + logits.T) / 2.0
    w = torch.sigmoid(sym)
    eye = torch.eye(logits.shape[0], dtype=logits.dtype, device=logits.device)
    return w * (1.0 - eye)


def default_sigma_line(image_size: tuple[int, int]) -> float:
    """1.5 px at 64x64, scaled proportionally with resolution."""
    return 1.5 * min(image_size) / 64.0


def _pixel_lattice(size: tuple[int, int], dtype, device) -> Tensor:
    """(H, W, 2) pixel coordinates (center-origin x, y) of every array cell."""
    h, w = size
    rows = torch.arange(h, dtype=dtype, device=device)
    cols = torch.arange(w, dtype=dtype, device=device)
    gr, gc = torch.meshgrid(rows, cols, indexing="ij")
    return indices_to_pixels(torch.stack([gr, gc], dim=-1), size)


def _segment_distance_sq(p: Tensor, q: Tensor, lattice: Tensor) -> Tensor:
    """Squared distance from each lattice point to segments p->q.

    ``p``, ``q``: (..., 2); ``lattice``: (H, W, 2). Returns (..., H, W).
    """
    ab = q - p  # (..., 2)
    denom = (ab * ab).sum(-1).clamp_min(1e-12)  # (...,)
    rel = lattice - p[..., None, None, :]  # (..., H, W, 2)
    t = (rel * ab[..., None, None, :]).sum(-1) / denom[..., None, None]
    t = t.clamp(0.0, 1.0)
    closest = p[..., None, None, :] + t[..., None] * ab[..., None, None, :]
    diff = lattice - closest
    return (diff * diff).sum(-1)


def render_gaussian_line(
    p: Tensor, q: Tensor, size: tuple[int, int], sigma_line: float
) -> Tensor:
    """Gaussian-profile line segment: exp(-dist(u, pq)^2 / (2 sigma^2)).

    ``p`` and ``q`` are pixel coordinates (center-origin). Coincident
    endpoints degenerate to an isotropic blob. Differentiable w.r.t. both
    endpoints. Returns an (H, W) map.
    """
    if sigma_line <= 0:
        raise StructureError(f"sigma_line must be positive, got {sigma_line}")
    lattice = _pixel_lattice(size, p.dtype, p.device)
    d2 = _segment_distance_sq(p, q, lattice)
    return torch.exp(-d2 / (2.0 * sigma_line**2))


def render_edge_map(
    kps2d: Tensor,
    weights: Tensor,
    size: tuple[int, int],
    sigma_line: float,
    valid: Tensor | None = None,
    view_index: int = 0,
) -> EdgeMap:
    """Weighted Gaussian lines between all keypoint pairs, fused by per-pixel
    maximum: E(u) = max_{i<j} w_ij * line_ij(u).

    ``kps2d``: (N, 2) projected keypoints in pixel coordinates. Keypoints
    flagged invalid are excluded from every pair. With fewer than two valid
    keypoints the map is all zeros (logged, not an error).
    """
    if sigma_line <= 0:
        raise StructureError(f"sigma_line must be positive, got {sigma_line}")
    n = kps2d.shape[0]
    h, w = size
    if valid is None:
        valid = torch.ones(n, dtype=torch.bool, device=kps2d.device)
    if int(valid.sum()) < 2:
        logger.warning("edge map: fewer than 2 valid keypoints, rendering zeros")
        return EdgeMap(
            values=torch.zeros(1, h, w, dtype=kps2d.dtype, device=kps2d.device),
            view_index=view_index,
        )
    ii, jj = torch.triu_indices(n, n, offset=1, device=kps2d.device)
    pair_w = weights[ii, jj] * (valid[ii] & valid[jj]).to(kps2d.dtype)
    lattice = _pixel_lattice(size, kps2d.dtype, kps2d.device)
    d2 = _segment_distance_sq(kps2d[ii], kps2d[jj], lattice)  # (P, H, W)
    lines = torch.exp(-d2 / (2.0 * sigma_line**2))
    fused = (pair_w[:, None, None] * lines).max(dim=0).values
    return EdgeMap(values=fused[None], view_index=view_index)
