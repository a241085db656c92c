"""Multi-view sample sources: a synthetic articulated-figure oracle and the
on-disk feature-bundle format.

The oracle renders a capsule-limb figure posed inside the canonical cube from
every camera of a rig, with exact silhouette masks and per-limb soft-occupancy
feature stacks at two resolutions. It stands in for an external multi-view
feature extractor while keeping ground-truth joints available for evaluation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import container
from .geometry import (
    CameraRig,
    pixels_to_indices,
    project_points,
    rig_from_json,
    rig_to_json,
)

logger = logging.getLogger(__name__)

BUNDLE_FORMAT_VERSION = 1
DATASET_FORMAT_VERSION = 1

CUBE_MARGIN = 0.9  # figure must stay inside [-margin, margin]^3


class BundleError(ValueError):
    """Malformed multi-view bundle."""


class SceneError(ValueError):
    """Invalid synthetic scene specification."""


@dataclass(frozen=True)
class SceneSpec:
    """Articulated capsule figure: a joint tree with per-limb radii and
    per-joint rotation ranges. ``appearance_seed`` fixes rest shape, rotation
    axes, and limb colors."""

    joint_count: int
    limb_topology: tuple[int, ...]  # parent index per joint, -1 for the root
    limb_radii: tuple[float, ...]  # one per limb (joints 1..J-1)
    joint_angle_ranges: tuple[tuple[float, float], ...]  # radians, per joint
    appearance_seed: int = 0

    def __post_init__(self):
        j = self.joint_count
        if j < 1:
            raise SceneError(f"joint_count must be >= 1, got {j}")
        if len(self.limb_topology) != j:
            raise SceneError("limb_topology length must equal joint_count")
        if self.limb_topology[0] != -1:
            raise SceneError("joint 0 must be the root (parent -1)")
        for i, p in enumerate(self.limb_topology[1:], start=1):
            if not 0 <= p < j or p == i:
                raise SceneError(f"joint {i}: invalid parent {p}")
        # connectivity: walk child lists from the root
        children: list[list[int]] = [[] for _ in range(j)]
        for i, p in enumerate(self.limb_topology[1:], start=1):
            children[p].append(i)
        seen, stack = {0}, [0]
        while stack:
            for c in children[stack.pop()]:
                if c in seen:
                    raise SceneError("limb_topology contains a cycle")
                seen.add(c)
                stack.append(c)
        if len(seen) != j:
            raise SceneError("limb_topology is not connected")
        if len(self.limb_radii) != max(j - 1, 0):
            raise SceneError("need one radius per limb (joint_count - 1)")
        if any(r <= 0 for r in self.limb_radii):
            raise SceneError("limb radii must be positive")
        if len(self.joint_angle_ranges) != j:
            raise SceneError("need one angle range per joint")
        for lo, hi in self.joint_angle_ranges:
            if hi < lo:
                raise SceneError(f"bad angle range ({lo}, {hi})")

    @property
    def limbs(self) -> list[tuple[int, int]]:
        """(parent, child) pairs, one per non-root joint, in joint order."""
        return [(p, i) for i, p in enumerate(self.limb_topology) if p >= 0]


def default_scene_spec(joint_count: int = 6, appearance_seed: int = 0) -> SceneSpec:
    """A serial-chain-with-branches figure used by the CLI and tests.

    The root joint spins freely (full orientation diversity) and the other
    joints articulate widely, so pose regression from 200-odd frames is only
    easy for representations that actually track the parts.
    """
    if joint_count < 2:
        raise SceneError("default scene needs at least 2 joints")
    # root, then a chain; every third joint branches off the chain's midpoint
    topology = [-1]
    for i in range(1, joint_count):
        topology.append(i - 1 if i % 3 != 0 else max(i - 3, 0))
    angle_ranges = [(-math.pi, math.pi)] + [(-1.1, 1.1)] * (joint_count - 1)
    return SceneSpec(
        joint_count=joint_count,
        limb_topology=tuple(topology),
        limb_radii=tuple([0.11] * (joint_count - 1)),
        joint_angle_ranges=tuple(angle_ranges),
        appearance_seed=appearance_seed,
    )


@dataclass
class MultiViewSample:
    """One training/inference item: K view images with masks and cameras,
    optional per-layer feature stacks, optional ground-truth joints."""

    images: np.ndarray  # (K, 3, H, W) float32 in [0, 1]
    masks: np.ndarray  # (K, H, W) uint8, exactly {0, 1}
    rig: CameraRig
    layer_features: list[np.ndarray] | None = None  # each (C_l, K, h_l, w_l)
    ground_truth_joints: np.ndarray | None = None  # (J, 3) float64
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        k, _, h, w = self.images.shape
        if self.images.shape[1] != 3:
            raise BundleError(f"images must be (K,3,H,W), got {self.images.shape}")
        if self.masks.shape != (k, h, w):
            raise BundleError(
                f"masks: expected shape {(k, h, w)}, found {self.masks.shape}"
            )
        if len(self.rig) != k:
            raise BundleError(f"rig has {len(self.rig)} cameras but images have K={k}")
        if self.rig.image_size != (h, w):
            raise BundleError(
                f"rig image size {self.rig.image_size} != image shape {(h, w)}"
            )
        vals = np.unique(self.masks)
        if not np.all(np.isin(vals, [0, 1])):
            raise BundleError(f"masks must be binary, found values {vals[:8]}")
        if self.layer_features is not None:
            for l, feat in enumerate(self.layer_features):
                if feat.ndim != 4 or feat.shape[1] != k:
                    raise BundleError(
                        f"layer_features[{l}]: expected (C,{k},h,w), found {feat.shape}"
                    )
                hl, wl = feat.shape[2], feat.shape[3]
                if h % hl or w % wl:
                    raise BundleError(
                        f"layer_features[{l}]: spatial size ({hl},{wl}) must divide ({h},{w})"
                    )

    @property
    def num_views(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    x, y, z = _unit(axis)
    c, s = np.cos(angle), np.sin(angle)
    cc = 1.0 - c
    return np.array(
        [
            [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
            [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
            [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
        ]
    )


@dataclass(frozen=True)
class _FigureShape:
    rest_joints: np.ndarray  # (J, 3)
    rotation_axes: np.ndarray  # (J, 3) unit vectors
    limb_colors: np.ndarray  # (J-1, 3) in (0, 1]


def _figure_shape(spec: SceneSpec) -> _FigureShape:
    rng = np.random.default_rng(np.random.SeedSequence([spec.appearance_seed, 0xF1]))
    j = spec.joint_count
    rest = np.zeros((j, 3))
    path_len = np.zeros(j)
    for i, p in enumerate(spec.limb_topology):
        if p < 0:
            continue
        d = _unit(rng.normal(size=3))
        length = rng.uniform(0.35, 0.55)
        rest[i] = rest[p] + length * d
        path_len[i] = path_len[p] + length
    # root stays at the origin; scale so even a fully extended chain stays
    # inside the cube margin under any joint angles (no pose clamping needed)
    reach = path_len.max() if j > 1 else 0.0
    if reach > 0:
        rest *= 0.78 / reach
    axes = rng.normal(size=(j, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    hues = (np.arange(max(j - 1, 1)) / max(j - 1, 1) + rng.uniform()) % 1.0
    colors = np.stack(
        [
            0.3 + 0.7 * (0.5 + 0.5 * np.cos(2 * np.pi * (hues + shift)))
            for shift in (0.0, 1.0 / 3.0, 2.0 / 3.0)
        ],
        axis=1,
    )
    return _FigureShape(rest_joints=rest, rotation_axes=axes, limb_colors=colors)


def _pose_joints(spec: SceneSpec, shape: _FigureShape, angles: np.ndarray) -> np.ndarray:
    """Forward kinematics: per-joint rotations about fixed axes, composed from
    the root down. Returns posed joint positions (J, 3)."""
    j = spec.joint_count
    local = [_axis_angle_matrix(shape.rotation_axes[i], angles[i]) for i in range(j)]
    glob = [np.eye(3)] * j
    pos = np.zeros((j, 3))
    pos[0] = shape.rest_joints[0]
    glob[0] = local[0]
    order = [0]
    children: list[list[int]] = [[] for _ in range(j)]
    for i, p in enumerate(spec.limb_topology):
        if p >= 0:
            children[p].append(i)
    head = 0
    while head < len(order):
        p = order[head]
        head += 1
        for c in children[p]:
            offset = shape.rest_joints[c] - shape.rest_joints[p]
            pos[c] = pos[p] + glob[p] @ offset
            glob[c] = glob[p] @ local[c]
            order.append(c)
    return pos


def _sample_pose(spec: SceneSpec, shape: _FigureShape, seed: int) -> np.ndarray:
    """Sample joint angles, shrinking them if the figure leaves the cube."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.appearance_seed, seed, 0xA0]))
    lo = np.array([r[0] for r in spec.joint_angle_ranges])
    hi = np.array([r[1] for r in spec.joint_angle_ranges])
    angles = rng.uniform(lo, hi)
    max_radius = max(spec.limb_radii) if spec.limb_radii else 0.0
    for attempt in range(12):
        pos = _pose_joints(spec, shape, angles)
        if np.abs(pos).max() + max_radius <= CUBE_MARGIN:
            return pos
        logger.info("pose attempt %d leaves the cube; clamping angles", attempt)
        angles = angles * 0.7
    return _pose_joints(spec, shape, np.zeros_like(angles))


def _project_to_indices(points: np.ndarray, camera, image_size) -> tuple[np.ndarray, np.ndarray]:
    pts = torch.as_tensor(points, dtype=torch.float64)
    pixels, depths, _ = project_points(pts, camera)
    idx = pixels_to_indices(pixels, image_size)
    return idx.numpy(), depths.numpy()


def _segment_fields(
    idx_a: np.ndarray,
    idx_b: np.ndarray,
    query_rc: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Distance and interpolation parameter from query points to a 2D segment.

    ``query_rc``: (..., 2) array positions. Returns (dist, t), each (...,).
    """
    ab = idx_b - idx_a
    denom = float(ab @ ab)
    rel = query_rc - idx_a
    if denom < 1e-12:
        t = np.zeros(query_rc.shape[:-1])
    else:
        t = np.clip((rel @ ab) / denom, 0.0, 1.0)
    closest = idx_a + t[..., None] * ab
    dist = np.linalg.norm(query_rc - closest, axis=-1)
    return dist, t


def _render_view(
    spec: SceneSpec,
    shape: _FigureShape,
    joints: np.ndarray,
    camera,
    image_size: tuple[int, int],
    focal_px: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Render one view. Returns (image 3xHxW, mask HxW, features CxHxW at the
    query resolution, limb_visible (L,) bool at projected midpoints)."""
    h, w = image_size
    limbs = spec.limbs
    n_limbs = len(limbs)
    if n_limbs == 0:
        return (
            np.zeros((3, h, w), dtype=np.float32),
            np.zeros((h, w), dtype=np.uint8),
            np.zeros((0, h, w), dtype=np.float32),
            np.zeros(0, dtype=bool),
        )
    idx, depths = _project_to_indices(joints, camera, image_size)
    rows, cols = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    query = np.stack([rows, cols], axis=-1)  # (H, W, 2)

    dist = np.zeros((n_limbs, h, w))
    depth_at = np.full((n_limbs, h, w), np.inf)
    prad = np.zeros((n_limbs, h, w))
    for l, (p, c) in enumerate(limbs):
        d, t = _segment_fields(idx[p], idx[c], query)
        z = depths[p] * (1.0 - t) + depths[c] * t
        z = np.maximum(z, 1e-6)
        dist[l] = d
        depth_at[l] = z
        prad[l] = spec.limb_radii[l] * focal_px / z

    covered = dist <= prad  # (L, H, W)
    zbuf = np.where(covered, depth_at, np.inf)
    winner = np.argmin(zbuf, axis=0)  # (H, W); ties -> lowest limb index
    mask = covered.any(axis=0)

    image = np.zeros((3, h, w), dtype=np.float32)
    if n_limbs:
        colors = shape.limb_colors[winner]  # (H, W, 3)
        image = np.where(mask[None], colors.transpose(2, 0, 1), 0.0).astype(np.float32)

    # soft occupancy per limb, dimmed where a strictly nearer limb covers the pixel
    feats = np.exp(-(dist**2) / (2.0 * np.maximum(prad, 1e-6) ** 2))
    occluded = covered & (winner[None] != np.arange(max(n_limbs, 1))[:, None, None])
    feats = np.where(occluded, 0.4 * feats, feats).astype(np.float32)

    # midpoint visibility bookkeeping for the oracle's alignment invariant
    visible = np.zeros(n_limbs, dtype=bool)
    for l, (p, c) in enumerate(limbs):
        mid = np.round((idx[p] + idx[c]) / 2.0).astype(int)
        r0, c0 = int(mid[0]), int(mid[1])
        if 0 <= r0 < h and 0 <= c0 < w:
            visible[l] = covered[l, r0, c0] and winner[r0, c0] == l
    return image, mask.astype(np.uint8), feats, visible


def _downsample_mean(x: np.ndarray, factor: int) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))


def limb_midpoint_visibility(
    spec: SceneSpec, joints: np.ndarray, rig: CameraRig
) -> np.ndarray:
    """(K, L) bool: is each limb's projected midpoint unoccluded in each view?

    Recomputes the renderer's z-test; used to verify feature/view alignment.
    """
    shape = _figure_shape(spec)
    focal = float(rig[0].intrinsics[0, 0])
    out = []
    for k in range(len(rig)):
        _, _, _, vis = _render_view(spec, shape, joints, rig[k], rig.image_size, focal)
        out.append(vis)
    return np.stack(out, axis=0)


def synth_generate(spec: SceneSpec, rig: CameraRig, seed: int) -> MultiViewSample:
    """Render a posed figure from every camera of ``rig``.

    Deterministic for fixed (spec, seed). Produces exact silhouette masks,
    per-limb soft-occupancy feature stacks at full and half resolution, and
    ground-truth joints.
    """
    h, w = rig.image_size
    if h % 2 or w % 2:
        raise SceneError(f"image size must be even for the half-res feature stack, got {(h, w)}")
    shape = _figure_shape(spec)
    joints = _sample_pose(spec, shape, seed)
    focal = float(rig[0].intrinsics[0, 0])

    k = len(rig)
    n_limbs = len(spec.limbs)
    images = np.zeros((k, 3, h, w), dtype=np.float32)
    masks = np.zeros((k, h, w), dtype=np.uint8)
    feats_full = np.zeros((n_limbs, k, h, w), dtype=np.float32)
    for view in range(k):
        img, msk, f, _ = _render_view(spec, shape, joints, rig[view], (h, w), focal)
        images[view] = img
        masks[view] = msk
        if n_limbs:
            feats_full[:, view] = f
    feats_half = np.stack(
        [_downsample_mean(feats_full[:, view], 2) for view in range(k)], axis=1
    ) if n_limbs else np.zeros((0, k, h // 2, w // 2), dtype=np.float32)

    return MultiViewSample(
        images=images,
        masks=masks,
        rig=rig,
        layer_features=[feats_full, feats_half.astype(np.float32)],
        ground_truth_joints=joints.astype(np.float64),
        meta={"source": "synthetic", "seed": seed},
    )


def write_bundle(sample: MultiViewSample, path: Path | str) -> None:
    """Write a sample as a container directory (manifest + raw tensors)."""
    tensors: dict[str, np.ndarray] = {
        "images": sample.images.astype(np.float32),
        "masks": sample.masks.astype(np.uint8),
    }
    if sample.layer_features is not None:
        for l, feat in enumerate(sample.layer_features):
            tensors[f"layer_features/{l}"] = feat.astype(np.float32)
    if sample.ground_truth_joints is not None:
        tensors["ground_truth_joints"] = sample.ground_truth_joints.astype(np.float64)
    meta = {
        "kind": "multiview_sample",
        "bundle_format_version": BUNDLE_FORMAT_VERSION,
        "rig": json.loads(rig_to_json(sample.rig)),
        "num_layers": 0 if sample.layer_features is None else len(sample.layer_features),
        "extra": sample.meta,
    }
    container.write_dir(path, tensors, meta)


def read_bundle(path: Path | str) -> MultiViewSample:
    tensors, meta = container.read_dir(path)
    if meta.get("kind") != "multiview_sample":
        raise BundleError(f"{path}: not a multi-view sample bundle")
    version = meta.get("bundle_format_version")
    if version != BUNDLE_FORMAT_VERSION:
        raise BundleError(f"{path}: unknown bundle format version {version!r}")
    rig = rig_from_json(json.dumps(meta["rig"]))
    for name in ("images", "masks"):
        if name not in tensors:
            raise BundleError(f"{path}: missing entry '{name}'")
    images = tensors["images"]
    k = len(rig)
    if images.shape[0] != k:
        raise BundleError(
            f"entry 'images': rig declares K={k} views, found shape {images.shape}"
        )
    n_layers = meta.get("num_layers", 0)
    feats = None
    if n_layers:
        feats = []
        for l in range(n_layers):
            name = f"layer_features/{l}"
            if name not in tensors:
                raise BundleError(f"{path}: missing entry '{name}'")
            feats.append(tensors[name])
    try:
        return MultiViewSample(
            images=images,
            masks=tensors["masks"],
            rig=rig,
            layer_features=feats,
            ground_truth_joints=tensors.get("ground_truth_joints"),
            meta=meta.get("extra", {}),
        )
    except BundleError as err:
        raise BundleError(f"{path}: {err}") from err


def bundle_content_hash(path: Path | str) -> str:
    """SHA-256 over manifest and binary payloads, independent of mtimes."""
    path = Path(path)
    digest = hashlib.sha256()
    for f in sorted(p for p in path.iterdir() if p.is_file()):
        digest.update(f.name.encode())
        digest.update(f.read_bytes())
    return digest.hexdigest()


def write_dataset_index(
    out_dir: Path | str, bundle_names: list[str], extra: dict | None = None
) -> dict:
    out_dir = Path(out_dir)
    hashes = [bundle_content_hash(out_dir / name) for name in bundle_names]
    digest = hashlib.sha256()
    for h in hashes:
        digest.update(h.encode())
    index = {
        "format_version": DATASET_FORMAT_VERSION,
        "count": len(bundle_names),
        "bundles": bundle_names,
        "content_hash": digest.hexdigest(),
    }
    if extra:
        index.update(extra)
    (out_dir / "dataset.json").write_text(json.dumps(index, indent=1))
    return index


def read_dataset_index(dataset_dir: Path | str) -> dict:
    p = Path(dataset_dir) / "dataset.json"
    if not p.is_file():
        raise BundleError(f"no dataset.json in {dataset_dir}")
    index = json.loads(p.read_text())
    if index.get("format_version") != DATASET_FORMAT_VERSION:
        raise BundleError(f"unknown dataset format version {index.get('format_version')!r}")
    return index


def load_dataset(dataset_dir: Path | str) -> list[MultiViewSample]:
    dataset_dir = Path(dataset_dir)
    index = read_dataset_index(dataset_dir)
    return [read_bundle(dataset_dir / name) for name in index["bundles"]]
