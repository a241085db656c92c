"""voxelkp: unsupervised monocular 3D keypoint discovery and automatic rigging.

The pipeline lifts per-view 2D feature stacks into a voxel feature volume,
localizes keypoints by soft-argmax integral regression, trains itself with a
multi-view edge-map reconstruction objective, and rigs meshes from the
discovered keypoints and adjacency.
"""

__version__ = "0.1.0"
