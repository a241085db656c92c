#!/usr/bin/env python3
"""Regenerate the viewer test fixtures from the core pipeline.

Writes a small deterministic rig bundle plus 5 reference poses and the
core-deformed vertices for each, used by the vitest parity suite. Run from
the frontend directory with the core package installed:

    python3 scripts/make_fixtures.py
"""

import json
from pathlib import Path

import numpy as np

from voxelkp.rigging import (
    build_mst,
    export_rig_bundle,
    lbs_deform,
    make_capsule_mesh,
    orient_tree,
    pose_from_json,
    pose_to_json,
    skinning_weights,
)

OUT = Path(__file__).resolve().parent.parent / "test" / "fixtures"


def main():
    rng = np.random.default_rng(20240917)
    n = 5
    keypoints = rng.uniform(-0.5, 0.5, size=(n, 3))
    adjacency = rng.uniform(0.1, 0.9, size=(n, n))
    adjacency = (adjacency + adjacency.T) / 2
    np.fill_diagonal(adjacency, 0.0)

    tree = build_mst(keypoints, adjacency)
    skeleton = orient_tree(keypoints, tree, adjacency=adjacency)
    mesh = make_capsule_mesh(skeleton, radius=0.06, ring_segments=8, rings_per_edge=6)
    weights = skinning_weights(mesh, skeleton)

    bundle_dir = OUT / "rig_bundle"
    export_rig_bundle(
        mesh, skeleton, weights, keypoints, adjacency, bundle_dir,
        params={"sigma": 0.1, "alpha": 1.0},
    )

    poses = []
    for _ in range(5):
        axis_angles = rng.uniform(-0.7, 0.7, size=(len(skeleton.edges), 3))
        poses.append(axis_angles.tolist())

    expected = []
    for axis_angles in poses:
        rotations = pose_from_json(pose_to_json(np.array(axis_angles)))
        deformed = lbs_deform(mesh, skeleton, rotations, weights)
        expected.append(deformed.tolist())

    span = mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
    doc = {
        "poses": poses,
        "expected_vertices": expected,
        "bbox_diagonal": float(np.linalg.norm(span)),
    }
    (OUT / "reference_poses.json").write_text(json.dumps(doc))
    print(f"fixtures written to {OUT}: {len(mesh.vertices)} vertices, "
          f"{len(skeleton.edges)} bones, {len(poses)} poses")


if __name__ == "__main__":
    main()
