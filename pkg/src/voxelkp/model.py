"""End-to-end model assembly: feature stacks in, 3D keypoints and edge maps out.

``KeypointModel`` owns every trainable piece of the keypoint path (aggregator,
keypoint head, volume net, adjacency logits); ``ReconNet`` is the separately
scheduled reconstruction decoder. The training module wires them together.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .geometry import CameraRig, project_points
from .keypoints import (
    HeatmapVolume,
    KeypointSet3D,
    VolumeNet,
    integral_regression,
    volume_net_apply,
)
from .lifting import (
    FeatureAggregator,
    FeatureVolume,
    KeypointHead,
    Unprojector,
    VoxelGrid,
    aggregate_features,
    attention_fuse,
    keypoint_head,
)


class KeypointModel(nn.Module):
    """Aggregation -> keypoint head -> unprojection -> fusion -> volume net
    -> integral regression, plus the learnable adjacency logits."""

    def __init__(
        self,
        layer_channels: list[int],
        image_size: tuple[int, int],
        num_keypoints: int,
        grid_resolution: int,
        agg_channels: int = 32,
        logit_gain: float = 1.0,
    ):
        super().__init__()
        self.aggregator = FeatureAggregator(layer_channels, agg_channels, image_size)
        self.head = KeypointHead(agg_channels, num_keypoints)
        self.volume_net = VolumeNet(num_keypoints, logit_gain=logit_gain)
        self.adjacency_logits = nn.Parameter(torch.zeros(num_keypoints, num_keypoints))
        self.grid = VoxelGrid(resolution=grid_resolution)
        self.num_keypoints = num_keypoints
        self.image_size = tuple(image_size)
        self.layer_channels = list(layer_channels)

    def forward(
        self, stack: list[Tensor], unprojector: Unprojector
    ) -> tuple[KeypointSet3D, HeatmapVolume, FeatureVolume]:
        f_agg = aggregate_features(stack, self.aggregator)
        f_kp = keypoint_head(f_agg, self.head)
        per_view = unprojector(f_kp)
        volume = attention_fuse(per_view, self.grid)
        heat = volume_net_apply(volume, self.volume_net)
        kps = integral_regression(heat)
        return kps, heat, volume


def project_keypoints(
    kps: KeypointSet3D, rig: CameraRig
) -> tuple[Tensor, Tensor]:
    """Project predicted keypoints into every rig view.

    Returns (pixels, valid): (..., K, N, 2) and (..., K, N) stacked over views.
    """
    pix, val = [], []
    for k in range(len(rig)):
        p, _, v = project_points(kps.positions, rig[k])
        pix.append(p)
        val.append(v)
    return torch.stack(pix, dim=-3), torch.stack(val, dim=-2)
