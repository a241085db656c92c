"""2D-to-3D feature lifting.

Per-view feature stacks are fused layer-wise (learned scalar weights plus 1x1
bottlenecks), mapped to keypoint-specific channels, unprojected into a voxel
grid by bilinear sampling at each voxel's projection, and fused across views
with softmax attention on the sampled values.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .geometry import CameraRig, pixels_to_indices, project_points


class LiftingError(ValueError):
    """Shape or configuration mismatch in the lifting stack."""


@dataclass(frozen=True)
class VoxelGrid:
    """Uniform M^3 lattice over an axis-aligned box (default the canonical
    cube). Voxel centers are offset half a voxel from the box faces."""

    resolution: int
    bounds_lo: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    bounds_hi: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.resolution < 2:
            raise LiftingError(f"grid resolution must be >= 2, got {self.resolution}")
        if any(h <= l for l, h in zip(self.bounds_lo, self.bounds_hi)):
            raise LiftingError(f"empty box: {self.bounds_lo}..{self.bounds_hi}")

    @property
    def voxel_size(self) -> tuple[float, float, float]:
        m = self.resolution
        return tuple((h - l) / m for l, h in zip(self.bounds_lo, self.bounds_hi))

    def axis_centers(self, dtype=torch.float64) -> tuple[Tensor, Tensor, Tensor]:
        m = self.resolution
        out = []
        for l, h in zip(self.bounds_lo, self.bounds_hi):
            step = (h - l) / m
            out.append(l + step * (torch.arange(m, dtype=dtype) + 0.5))
        return tuple(out)

    def centers(self, dtype=torch.float64) -> Tensor:
        """(M, M, M, 3) lattice of voxel centers, indexed (x, y, z)."""
        xs, ys, zs = self.axis_centers(dtype)
        gx, gy, gz = torch.meshgrid(xs, ys, zs, indexing="ij")
        return torch.stack([gx, gy, gz], dim=-1)

    def centers_flat(self, dtype=torch.float64) -> Tensor:
        """(M^3, 3) centers in C order over (x, y, z) indices."""
        return self.centers(dtype).reshape(-1, 3)


@dataclass
class FeatureVolume:
    values: Tensor  # (N, M, M, M) or (B, N, M, M, M)
    grid: VoxelGrid

    def __post_init__(self):
        m = self.grid.resolution
        if self.values.shape[-3:] != (m, m, m):
            raise LiftingError(
                f"volume shape {tuple(self.values.shape)} does not match grid M={m}"
            )


class FeatureAggregator(nn.Module):
    """Learned weighted sum of upsampled, bottlenecked feature layers."""

    def __init__(self, layer_channels: list[int], out_channels: int,
                 target_resolution: tuple[int, int]):
        super().__init__()
        if len(layer_channels) < 1:
            raise LiftingError("need at least one feature layer")
        self.layer_weights = nn.Parameter(torch.ones(len(layer_channels)))
        self.bottlenecks = nn.ModuleList(
            [nn.Conv2d(c, out_channels, kernel_size=1) for c in layer_channels]
        )
        self.out_channels = out_channels
        self.target_resolution = tuple(target_resolution)

    @property
    def num_layers(self) -> int:
        return len(self.bottlenecks)


def _views_to_batch(x: Tensor) -> tuple[Tensor, tuple]:
    """(C, K, h, w) or (B, C, K, h, w) -> (B*K, C, h, w) plus restore info."""
    if x.ndim == 4:
        c, k, h, w = x.shape
        return x.permute(1, 0, 2, 3), (None, k)
    b, c, k, h, w = x.shape
    return x.permute(0, 2, 1, 3, 4).reshape(b * k, c, h, w), (b, k)


def _batch_to_views(x: Tensor, info: tuple) -> Tensor:
    b, k = info
    if b is None:
        return x.permute(1, 0, 2, 3)
    bk, c, h, w = x.shape
    return x.reshape(b, k, c, h, w).permute(0, 2, 1, 3, 4)


def aggregate_features(stack: list[Tensor], params: FeatureAggregator) -> Tensor:
    """Fuse L per-layer stacks into one (C', K, H, W) map.

    Each layer is bilinearly upsampled to the target resolution, projected by
    its 1x1 bottleneck, scaled by its learned weight, and summed.
    """
    if len(stack) != params.num_layers:
        raise LiftingError(
            f"aggregator configured for {params.num_layers} layers, got {len(stack)}"
        )
    h, w = params.target_resolution
    out = None
    for l, feat in enumerate(stack):
        x, info = _views_to_batch(feat)
        if x.shape[-2:] != (h, w):
            x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        x = params.bottlenecks[l](x) * params.layer_weights[l]
        out = x if out is None else out + x
    return _batch_to_views(out, info)


class KeypointHead(nn.Module):
    """Two pointwise linear layers with one nonlinearity: C' -> hidden -> N."""

    def __init__(self, in_channels: int, num_keypoints: int, hidden: int | None = None):
        super().__init__()
        hidden = in_channels if hidden is None else hidden
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, hidden, kernel_size=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(hidden, num_keypoints, kernel_size=1),
        )
        self.num_keypoints = num_keypoints


def keypoint_head(f_agg: Tensor, head: KeypointHead) -> Tensor:
    """Apply the head per pixel per view: (C', K, H, W) -> (N, K, H, W)."""
    x, info = _views_to_batch(f_agg)
    return _batch_to_views(head.net(x), info)


def bilinear_sample(maps: Tensor, rc: Tensor, valid: Tensor | None = None) -> Tensor:
    """Sample (..., C, H, W) maps at continuous (row, col) positions (P, 2).

    Positions outside [0, H-1] x [0, W-1] (or flagged invalid) yield exactly
    zero. Differentiable w.r.t. ``maps`` and, away from the cut boundary,
    w.r.t. ``rc``. Returns (..., C, P).
    """
    h, w = maps.shape[-2:]
    r, c = rc[..., 0], rc[..., 1]
    inside = (r >= 0) & (r <= h - 1) & (c >= 0) & (c <= w - 1)
    if valid is not None:
        inside = inside & valid
    r = r.clamp(0, h - 1)
    c = c.clamp(0, w - 1)
    r0 = r.floor().clamp(max=h - 2)
    c0 = c.floor().clamp(max=w - 2)
    wr = r - r0
    wc = c - c0
    r0 = r0.long()
    c0 = c0.long()
    flat = maps.reshape(*maps.shape[:-2], h * w)
    i00 = r0 * w + c0
    v00 = flat[..., i00]
    v01 = flat[..., i00 + 1]
    v10 = flat[..., i00 + w]
    v11 = flat[..., i00 + w + 1]
    top = v00 * (1 - wc) + v01 * wc
    bot = v10 * (1 - wc) + v11 * wc
    return (top * (1 - wr) + bot * wr) * inside.to(maps.dtype)


class Unprojector:
    """Precomputed voxel-to-pixel sampling for a fixed (rig, grid) pair.

    For every voxel center and view, caches the projected (row, col) position
    and a validity mask (in front of the camera, inside the image).
    """

    def __init__(self, rig: CameraRig, grid: VoxelGrid):
        self.rig = rig
        self.grid = grid
        centers = grid.centers_flat(dtype=torch.float64)
        rcs, valids = [], []
        for k in range(len(rig)):
            pixels, depths, ok = project_points(centers, rig[k])
            rc = pixels_to_indices(pixels, rig.image_size)
            rcs.append(rc)
            valids.append(ok & (depths > 0))
        self.sample_rc = torch.stack(rcs, dim=0)  # (K, M^3, 2) float64
        self.sample_valid = torch.stack(valids, dim=0)  # (K, M^3) bool

    def __call__(self, f_kp: Tensor) -> Tensor:
        """(N, K, H, W) -> (N, K, M, M, M); batched input adds a leading B."""
        k = len(self.rig)
        if f_kp.shape[-3] != k:
            raise LiftingError(
                f"feature view axis {f_kp.shape[-3]} != rig size {k}"
            )
        m = self.grid.resolution
        rc = self.sample_rc.to(dtype=f_kp.dtype, device=f_kp.device)
        valid = self.sample_valid.to(f_kp.device)
        per_view = []
        for view in range(k):
            # (..., N, H, W) sampled at M^3 positions -> (..., N, M^3)
            s = bilinear_sample(f_kp[..., :, view, :, :], rc[view], valid[view])
            per_view.append(s)
        out = torch.stack(per_view, dim=-2)  # (..., N, K, M^3)
        return out.reshape(*out.shape[:-1], m, m, m)


def unproject(f_kp: Tensor, rig: CameraRig, grid: VoxelGrid) -> Tensor:
    """One-shot unprojection; see :class:`Unprojector` for the cached form."""
    return Unprojector(rig, grid)(f_kp)


def attention_fuse(per_view: Tensor, grid: VoxelGrid) -> FeatureVolume:
    """Softmax attention over the view axis of (..., N, K, M, M, M) samples.

    Per voxel and channel the K sampled scalars are both the attention logits
    and the values: weights = softmax_k(f_k), fused = sum_k weights_k * f_k.
    """
    if per_view.ndim < 5:
        raise LiftingError(f"expected (..., N, K, M, M, M), got {tuple(per_view.shape)}")
    weights = torch.softmax(per_view, dim=-4)
    fused = (weights * per_view).sum(dim=-4)
    return FeatureVolume(values=fused, grid=grid)
