"""Automatic rigging: MST skeleton extraction over discovered keypoints,
Gaussian skinning weights, forward-kinematic linear blend skinning, and the
versioned on-disk RigBundle contract shared with the viewer.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container

logger = logging.getLogger(__name__)

RIG_BUNDLE_FORMAT_VERSION = 1


class RiggingError(ValueError):
    """Invalid skeleton, weights, or bundle."""


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise RiggingError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if not np.isfinite(self.vertices).all():
            raise RiggingError("vertices must be finite")
        if len(self.faces) and (
            self.faces.min() < 0 or self.faces.max() >= len(self.vertices)
        ):
            raise RiggingError("face indices out of range")


@dataclass
class Skeleton:
    """Directed tree: N joints, N-1 (parent, child) edges ordered so every
    parent joint is introduced before its descendants."""

    joints: np.ndarray  # (N, 3)
    edges: tuple[tuple[int, int], ...]
    root: int

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        n = len(self.joints)
        if self.joints.ndim != 2 or self.joints.shape[1] != 3:
            raise RiggingError(f"joints must be (N, 3), got {self.joints.shape}")
        if len(self.edges) != n - 1:
            raise RiggingError(f"need N-1={n - 1} edges, got {len(self.edges)}")
        if not 0 <= self.root < n:
            raise RiggingError(f"root {self.root} out of range")
        parent = {self.root: None}
        for p, c in self.edges:
            if p not in parent:
                raise RiggingError(f"edge ({p},{c}): parent {p} not yet reachable from root")
            if c in parent:
                raise RiggingError(f"joint {c} has more than one parent")
            parent[c] = p
        if len(parent) != n:
            raise RiggingError("edges do not span all joints")

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    def parent_edge_index(self) -> list[int]:
        """For each edge, the index of its parent edge (-1 at the root)."""
        child_to_edge = {c: l for l, (_, c) in enumerate(self.edges)}
        return [child_to_edge.get(p, -1) for p, _ in self.edges]


@dataclass
class SkinningWeights:
    matrix: np.ndarray  # (V, N-1), rows nonnegative and summing to 1

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise RiggingError(f"weights must be 2-D, got shape {self.matrix.shape}")
        if (self.matrix < 0).any():
            raise RiggingError("skinning weights must be nonnegative")
        sums = self.matrix.sum(axis=1)
        worst = float(np.abs(sums - 1.0).max()) if len(sums) else 0.0
        if worst > 1e-6:
            raise RiggingError(
                f"skinning weight rows must sum to 1 (worst deviation {worst:.3e})"
            )


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[rb] = ra
        return True


def mst_edge_costs(positions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Pairwise costs d_ij / d_max + (1 - a_ij); all-coincident points fall
    back to the adjacency term alone."""
    n = len(positions)
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    d_max = dist.max()
    if d_max == 0.0:
        logger.warning("all keypoints coincide; MST costs use adjacency only")
        return 1.0 - weights
    return dist / d_max + (1.0 - weights)


def build_mst(positions, weights) -> list[tuple[int, int]]:
    """Minimum spanning tree over the complete keypoint graph.

    ``positions``: (N, 3) or a KeypointSet3D; ``weights``: (N, N) adjacency in
    [0, 1]. Ties break lexicographically on (i, j). Returns undirected edges
    as (i, j) pairs with i < j, sorted.
    """
    if hasattr(positions, "positions"):
        positions = positions.positions.detach().cpu().numpy()
    positions = np.asarray(positions, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n = len(positions)
    if n < 2:
        raise RiggingError(f"need at least 2 keypoints, got {n}")
    if weights.shape != (n, n):
        raise RiggingError(f"adjacency must be ({n},{n}), got {weights.shape}")
    costs = mst_edge_costs(positions, weights)
    candidates = sorted(
        ((costs[i, j], i, j) for i in range(n) for j in range(i + 1, n)),
    )
    uf = _UnionFind(n)
    tree = []
    for _, i, j in candidates:
        if uf.union(i, j):
            tree.append((i, j))
            if len(tree) == n - 1:
                break
    return sorted(tree)


def orient_tree(
    joints: np.ndarray,
    edges: list[tuple[int, int]],
    adjacency: np.ndarray | None = None,
    root: int | None = None,
) -> Skeleton:
    """Direct an undirected spanning tree away from a root.

    With no root given, the joint with maximal total adjacency weight wins
    (ties to the lowest index). Edges come out in BFS discovery order.
    """
    joints = np.asarray(joints, dtype=np.float64)
    n = len(joints)
    if len(edges) != n - 1:
        raise RiggingError(f"need N-1={n - 1} edges, got {len(edges)}")
    neighbors: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        neighbors[i].append(j)
        neighbors[j].append(i)
    if root is None:
        if adjacency is None:
            raise RiggingError("root selection needs the adjacency matrix")
        totals = np.asarray(adjacency, dtype=np.float64).sum(axis=1)
        root = int(np.argmax(totals))  # argmax takes the lowest index on ties
    if not 0 <= root < n:
        raise RiggingError(f"root {root} out of range")
    directed = []
    seen = {root}
    queue = [root]
    while queue:
        p = queue.pop(0)
        for c in sorted(neighbors[p]):
            if c not in seen:
                seen.add(c)
                directed.append((p, c))
                queue.append(c)
    if len(seen) != n:
        raise RiggingError("edge set is disconnected")
    return Skeleton(joints=joints, edges=tuple(directed), root=root)


def point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from (V, 3) points to segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def default_sigma(skeleton: Skeleton) -> float:
    """0.1 x the skeleton bounding-box diagonal."""
    span = skeleton.joints.max(axis=0) - skeleton.joints.min(axis=0)
    diag = float(np.linalg.norm(span))
    return 0.1 * diag if diag > 0 else 0.1


def skinning_weights(
    mesh: Mesh, skeleton: Skeleton, sigma: float | None = None, alpha: float = 1.0
) -> SkinningWeights:
    """Gaussian falloff from vertices to bone segments, row-normalized:
    G = exp(-alpha d^2 / (2 sigma^2)), W = G / sum(G).

    Rows whose G underflows to zero everywhere collapse to one-hot on the
    nearest edge (logged).
    """
    if sigma is None:
        sigma = default_sigma(skeleton)
    if sigma <= 0:
        raise RiggingError(f"sigma must be positive, got {sigma}")
    if alpha <= 0:
        raise RiggingError(f"alpha must be positive, got {alpha}")
    if skeleton.num_joints < 2:
        raise RiggingError("skinning needs at least one edge")
    dists = np.stack(
        [
            point_segment_distance(mesh.vertices, skeleton.joints[p], skeleton.joints[c])
            for p, c in skeleton.edges
        ],
        axis=1,
    )  # (V, N-1)
    g = np.exp(-alpha * dists**2 / (2.0 * sigma**2))
    sums = g.sum(axis=1)
    dead = sums == 0.0
    if dead.any():
        logger.warning(
            "%d vertices underflowed all skinning Gaussians; snapping to nearest edge",
            int(dead.sum()),
        )
        nearest = np.argmin(dists[dead], axis=1)
        g[dead] = 0.0
        g[dead, nearest] = 1.0
        sums = g.sum(axis=1)
    return SkinningWeights(matrix=g / sums[:, None])


def _check_rotations(rotations: np.ndarray, count: int) -> np.ndarray:
    rotations = np.asarray(rotations, dtype=np.float64)
    if rotations.shape != (count, 3, 3):
        raise RiggingError(f"need {count} rotations of shape (3,3), got {rotations.shape}")
    eye = np.eye(3)
    for l, r in enumerate(rotations):
        if np.linalg.norm(r.T @ r - eye) > 1e-5 or abs(np.linalg.det(r) - 1.0) > 1e-5:
            raise RiggingError(f"rotation {l} is not orthonormal with det +1")
    return rotations


def edge_transforms(
    skeleton: Skeleton, joint_rotations: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Forward kinematics: per-edge global rigid transforms (R, t).

    Each edge rotates about its parent joint's rest position; transforms
    compose parent-to-child down the tree. Returns (rots (L,3,3), trans (L,3)).
    """
    rotations = _check_rotations(joint_rotations, len(skeleton.edges))
    parent_edge = skeleton.parent_edge_index()
    rots = np.zeros_like(rotations)
    trans = np.zeros((len(skeleton.edges), 3))
    for l, (p, _) in enumerate(skeleton.edges):
        pivot = skeleton.joints[p]
        local_r = rotations[l]
        local_t = pivot - local_r @ pivot
        pe = parent_edge[l]
        if pe < 0:
            rots[l], trans[l] = local_r, local_t
        else:
            rots[l] = rots[pe] @ local_r
            trans[l] = rots[pe] @ local_t + trans[pe]
    return rots, trans


def lbs_deform(
    mesh: Mesh,
    skeleton: Skeleton,
    joint_rotations: np.ndarray,
    weights: SkinningWeights,
) -> np.ndarray:
    """Linear blend skinning: v' = sum_l W[v,l] * T_l(v).

    Identity rotations return the rest vertices bit-for-bit (short-circuited
    so no float blending touches them).
    """
    rotations = _check_rotations(joint_rotations, len(skeleton.edges))
    if weights.matrix.shape != (len(mesh.vertices), len(skeleton.edges)):
        raise RiggingError(
            f"weights shape {weights.matrix.shape} does not match "
            f"(V={len(mesh.vertices)}, L={len(skeleton.edges)})"
        )
    if all(np.array_equal(r, np.eye(3)) for r in rotations):
        return mesh.vertices.copy()
    rots, trans = edge_transforms(skeleton, rotations)
    # (L, V, 3) transformed copies, blended by per-vertex weights
    moved = np.einsum("lab,vb->lva", rots, mesh.vertices) + trans[:, None, :]
    return np.einsum("vl,lva->va", weights.matrix, moved)


def transport_points(
    points: np.ndarray,
    skeleton: Skeleton,
    joint_rotations: np.ndarray,
    sigma: float | None = None,
    alpha: float = 1.0,
) -> np.ndarray:
    """Carry free points (e.g. splat centers) along with the deformation.

    Weights come from the same Gaussian falloff as mesh skinning; each point
    then moves by its blended edge transforms. Centers only: per-point frames
    or covariances are not rotated.
    """
    points = np.asarray(points, dtype=np.float64)
    carrier = Mesh(vertices=points, faces=np.zeros((0, 3), dtype=np.int64))
    weights = skinning_weights(carrier, skeleton, sigma=sigma, alpha=alpha)
    return lbs_deform(carrier, skeleton, joint_rotations, weights)


def posed_joints(skeleton: Skeleton, joint_rotations: np.ndarray) -> np.ndarray:
    """Joint positions after applying per-edge rotations (root stays put)."""
    rots, trans = edge_transforms(skeleton, joint_rotations)
    out = skeleton.joints.copy()
    for l, (_, c) in enumerate(skeleton.edges):
        out[c] = rots[l] @ skeleton.joints[c] + trans[l]
    return out


def axis_angle_matrix(v: np.ndarray) -> np.ndarray:
    """Rotation matrix from an axis-angle vector (angle = norm, radians)."""
    v = np.asarray(v, dtype=np.float64)
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        return np.eye(3)
    x, y, z = v / angle
    c, s = np.cos(angle), np.sin(angle)
    cc = 1.0 - c
    return np.array(
        [
            [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
            [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
            [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
        ]
    )


POSE_FORMAT_VERSION = 1


def pose_to_json(axis_angles: np.ndarray) -> str:
    """Serialize per-edge axis-angle rotations (the viewer's export format)."""
    axis_angles = np.asarray(axis_angles, dtype=np.float64)
    doc = {
        "format_version": POSE_FORMAT_VERSION,
        "rotations": [[float(x) for x in v] for v in axis_angles],
    }
    return json.dumps(doc, indent=1)


def pose_from_json(text: str) -> np.ndarray:
    """Read a pose file; returns per-edge rotation matrices (L, 3, 3)."""
    doc = json.loads(text)
    if doc.get("format_version") != POSE_FORMAT_VERSION:
        raise RiggingError(f"unknown pose format version {doc.get('format_version')!r}")
    return np.stack([axis_angle_matrix(np.array(v)) for v in doc["rotations"]])


# -- mesh & bundle I/O --------------------------------------------------------


def write_obj(mesh: Mesh, path: Path | str) -> None:
    lines = ["# ASCII mesh"]
    for v in mesh.vertices:
        lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: Path | str) -> Mesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
            for a, b in zip(idx[1:-1], idx[2:]):  # fan-triangulate polygons
                faces.append([idx[0], a, b])
    if not verts:
        raise RiggingError(f"{path}: no vertices found")
    return Mesh(vertices=np.array(verts), faces=np.array(faces, dtype=np.int64).reshape(-1, 3))


def make_capsule_mesh(skeleton: Skeleton, radius: float = 0.08, ring_segments: int = 8,
                      rings_per_edge: int = 5) -> Mesh:
    """Tube mesh wrapped around each bone; a demo stand-in for imported meshes."""
    verts: list[np.ndarray] = []
    faces: list[list[int]] = []
    for p, c in skeleton.edges:
        a, b = skeleton.joints[p], skeleton.joints[c]
        axis = b - a
        norm = np.linalg.norm(axis)
        axis = axis / norm if norm > 1e-12 else np.array([0.0, 0.0, 1.0])
        helper = np.array([1.0, 0.0, 0.0])
        if abs(axis @ helper) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        u = np.cross(axis, helper)
        u /= np.linalg.norm(u)
        w = np.cross(axis, u)
        base = len(verts)
        for ri in range(rings_per_edge):
            t = ri / (rings_per_edge - 1)
            center = a + t * (b - a)
            for si in range(ring_segments):
                ang = 2 * np.pi * si / ring_segments
                verts.append(center + radius * (np.cos(ang) * u + np.sin(ang) * w))
        for ri in range(rings_per_edge - 1):
            for si in range(ring_segments):
                i0 = base + ri * ring_segments + si
                i1 = base + ri * ring_segments + (si + 1) % ring_segments
                j0 = i0 + ring_segments
                j1 = i1 + ring_segments
                faces.append([i0, j0, i1])
                faces.append([i1, j0, j1])
    return Mesh(vertices=np.array(verts), faces=np.array(faces, dtype=np.int64))


def export_rig_bundle(
    mesh: Mesh,
    skeleton: Skeleton,
    weights: SkinningWeights,
    keypoints: np.ndarray,
    adjacency: np.ndarray,
    path: Path | str,
    params: dict | None = None,
) -> None:
    """Write the core<->viewer RigBundle directory.

    Layout: ``rig.json`` (skeleton, adjacency, keypoints, parameters),
    ``mesh.obj``, and the skinning weights as a raw tensor with manifest.
    Refuses to export invalid weights.
    """
    SkinningWeights(matrix=weights.matrix)  # re-validate before writing
    if weights.matrix.shape != (len(mesh.vertices), len(skeleton.edges)):
        raise RiggingError("weights shape does not match mesh/skeleton")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    keypoints = np.asarray(keypoints, dtype=np.float64)
    adjacency = np.asarray(adjacency, dtype=np.float64)
    rig = {
        "format_version": RIG_BUNDLE_FORMAT_VERSION,
        "joints": skeleton.joints.tolist(),
        "edges": [list(e) for e in skeleton.edges],
        "root": skeleton.root,
        "keypoints": keypoints.tolist(),
        "adjacency": adjacency.tolist(),
        "params": params or {},
        "mesh_file": "mesh.obj",
    }
    (path / "rig.json").write_text(json.dumps(rig, indent=1))
    write_obj(mesh, path / "mesh.obj")
    container.write_dir(
        path,
        {"weights": weights.matrix.astype(np.float64)},
        {"kind": "rig_weights", "format_version": RIG_BUNDLE_FORMAT_VERSION},
    )


def load_rig_bundle(path: Path | str):
    """Read a RigBundle; returns (mesh, skeleton, weights, keypoints, adjacency, params)."""
    path = Path(path)
    rig_path = path / "rig.json"
    if not rig_path.is_file():
        raise RiggingError(f"no rig.json in {path}")
    rig = json.loads(rig_path.read_text())
    if rig.get("format_version") != RIG_BUNDLE_FORMAT_VERSION:
        raise RiggingError(f"unknown rig bundle version {rig.get('format_version')!r}")
    skeleton = Skeleton(
        joints=np.array(rig["joints"], dtype=np.float64),
        edges=tuple(tuple(e) for e in rig["edges"]),
        root=rig["root"],
    )
    mesh = read_obj(path / rig["mesh_file"])
    tensors, meta = container.read_dir(path)
    if meta.get("kind") != "rig_weights":
        raise RiggingError(f"{path}: weight container kind {meta.get('kind')!r}")
    weights = SkinningWeights(matrix=tensors["weights"].astype(np.float64))
    if weights.matrix.shape != (len(mesh.vertices), len(skeleton.edges)):
        raise RiggingError("weights shape does not match mesh/skeleton")
    keypoints = np.array(rig["keypoints"], dtype=np.float64)
    adjacency = np.array(rig["adjacency"], dtype=np.float64)
    return mesh, skeleton, weights, keypoints, adjacency, rig.get("params", {})
