"""Keypoint localization: a small 3D conv net over the fused feature volume
and soft-argmax integral regression of grid coordinates."""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .lifting import FeatureVolume, LiftingError, VoxelGrid


@dataclass
class HeatmapVolume:
    """Pre-softmax per-keypoint logit volumes."""

    values: Tensor  # (N, M, M, M) or (B, N, M, M, M)
    grid: VoxelGrid


@dataclass
class KeypointSet3D:
    positions: Tensor  # (N, 3) or (B, N, 3), world coordinates
    grid: VoxelGrid


class VolumeNet(nn.Module):
    """Three same-padded 3D convolutions, widths N -> 2N -> 2N -> N.

    ``logit_gain`` scales the output logits; soft-argmax needs logits well
    above 1/M^3 contrast to move off the grid centroid early in training.
    """

    def __init__(self, num_keypoints: int, logit_gain: float = 1.0):
        super().__init__()
        n = num_keypoints
        self.net = nn.Sequential(
            nn.Conv3d(n, 2 * n, kernel_size=3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv3d(2 * n, 2 * n, kernel_size=3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv3d(2 * n, n, kernel_size=3, padding=1),
        )
        self.logit_gain = logit_gain
        self.num_keypoints = n


def volume_net_apply(volume: FeatureVolume, net: VolumeNet) -> HeatmapVolume:
    """(N, M, M, M) feature volume -> per-keypoint logit volume."""
    x = volume.values
    unbatched = x.ndim == 4
    if unbatched:
        x = x[None]
    if x.shape[1] != net.num_keypoints:
        raise LiftingError(
            f"volume has {x.shape[1]} channels, net expects {net.num_keypoints}"
        )
    logits = net.net(x) * net.logit_gain
    if unbatched:
        logits = logits[0]
    return HeatmapVolume(values=logits, grid=volume.grid)


def integral_regression(heatmaps: HeatmapVolume) -> KeypointSet3D:
    """Soft-argmax over all voxels: position = sum_x x * softmax(H(x)).

    Softmax runs over the full M^3 support (max-subtracted internally), so the
    result is a convex combination of voxel centers and always lies inside the
    grid box. Fully differentiable.
    """
    x = heatmaps.values
    m = heatmaps.grid.resolution
    if x.shape[-3:] != (m, m, m):
        raise LiftingError(f"heatmap shape {tuple(x.shape)} does not match M={m}")
    flat = x.reshape(*x.shape[:-3], m * m * m)
    probs = torch.softmax(flat, dim=-1)
    centers = heatmaps.grid.centers_flat(dtype=x.dtype).to(x.device)
    positions = probs @ centers
    return KeypointSet3D(positions=positions, grid=heatmaps.grid)


def keypoints_to_json(kps: KeypointSet3D) -> str:
    g = kps.grid
    doc = {
        "positions": [[float(v) for v in p] for p in kps.positions.reshape(-1, 3)],
        "grid": {
            "resolution": g.resolution,
            "bounds_lo": list(g.bounds_lo),
            "bounds_hi": list(g.bounds_hi),
        },
    }
    return json.dumps(doc, indent=1)


def keypoints_from_json(text: str) -> KeypointSet3D:
    doc = json.loads(text)
    g = doc["grid"]
    grid = VoxelGrid(
        resolution=g["resolution"],
        bounds_lo=tuple(g["bounds_lo"]),
        bounds_hi=tuple(g["bounds_hi"]),
    )
    positions = torch.tensor(doc["positions"], dtype=torch.float64)
    return KeypointSet3D(positions=positions, grid=grid)
