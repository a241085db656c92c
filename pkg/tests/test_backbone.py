import json

import numpy as np
import pytest
import scipy.ndimage as ndi
import torch

from voxelkp import container
from voxelkp.backbone import (
    BundleError,
    SceneError,
    SceneSpec,
    default_scene_spec,
    limb_midpoint_visibility,
    read_bundle,
    synth_generate,
    write_bundle,
)
from voxelkp.geometry import make_orbit_rig, pixels_to_indices, project_points


class TestContainer:
    def test_dir_round_trip(self, tmp_path):
        tensors = {
            "a": np.arange(12, dtype=np.float32).reshape(3, 4),
            "b/x": np.array([[1, 0], [0, 1]], dtype=np.uint8),
            "c": np.linspace(0, 1, 5),
        }
        container.write_dir(tmp_path / "c", tensors, {"tag": "t"})
        out, meta = container.read_dir(tmp_path / "c")
        assert meta == {"tag": "t"}
        for k in tensors:
            assert out[k].dtype == tensors[k].dtype
            assert np.array_equal(out[k], tensors[k])

    def test_zip_round_trip_and_determinism(self, tmp_path):
        tensors = {"w": np.random.default_rng(0).normal(size=(7, 3)).astype(np.float32)}
        container.write_zip(tmp_path / "a.zip", tensors, {"n": 1})
        container.write_zip(tmp_path / "b.zip", tensors, {"n": 1})
        assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()
        out, meta = container.read_zip(tmp_path / "a.zip")
        assert np.array_equal(out["w"], tensors["w"]) and meta == {"n": 1}

    def test_shape_mismatch_names_entry(self, tmp_path):
        container.write_dir(tmp_path / "c", {"vec": np.zeros(4, dtype=np.float32)}, {})
        manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
        manifest["entries"]["vec"]["shape"] = [5]
        (tmp_path / "c" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(container.ContainerError, match="'vec'.*expected 20 bytes"):
            container.read_dir(tmp_path / "c")

    def test_unknown_version(self, tmp_path):
        container.write_dir(tmp_path / "c", {}, {})
        manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
        manifest["format_version"] = 42
        (tmp_path / "c" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(container.ContainerError, match="version"):
            container.read_dir(tmp_path / "c")


class TestSceneSpec:
    def test_rejects_cycle(self):
        with pytest.raises(SceneError):
            SceneSpec(
                joint_count=3,
                limb_topology=(-1, 2, 1),
                limb_radii=(0.1, 0.1),
                joint_angle_ranges=((0, 0),) * 3,
            )

    def test_rejects_bad_radius(self):
        with pytest.raises(SceneError, match="radii"):
            SceneSpec(
                joint_count=2,
                limb_topology=(-1, 0),
                limb_radii=(0.0,),
                joint_angle_ranges=((0, 0),) * 2,
            )


class TestSynthGenerate:
    def test_deterministic(self, scene_spec, small_rig):
        a = synth_generate(scene_spec, small_rig, seed=5)
        b = synth_generate(scene_spec, small_rig, seed=5)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.masks, b.masks)
        assert np.array_equal(a.ground_truth_joints, b.ground_truth_joints)
        for fa, fb in zip(a.layer_features, b.layer_features):
            assert np.array_equal(fa, fb)

    def test_empty_scene(self, small_rig):
        spec = SceneSpec(
            joint_count=1, limb_topology=(-1,), limb_radii=(),
            joint_angle_ranges=((0.0, 0.0),),
        )
        s = synth_generate(spec, small_rig, seed=0)
        assert s.masks.sum() == 0
        assert s.images.sum() == 0
        assert all(f.shape[0] == 0 for f in s.layer_features)

    def test_mask_image_consistency(self, sample):
        for k in range(sample.num_views):
            outside = sample.masks[k] == 0
            assert np.all(sample.images[k][:, outside] == 0.0)
            inside = sample.masks[k] == 1
            assert sample.images[k][:, inside].max() > 0

    def test_joint_mask_containment(self, scene_spec, small_rig):
        """Projected ground-truth joints land in the 3px-dilated silhouette."""
        total, inside = 0, 0
        for seed in range(6):
            s = synth_generate(scene_spec, small_rig, seed=seed)
            joints = torch.as_tensor(s.ground_truth_joints)
            for k in range(s.num_views):
                pix, _, _ = project_points(joints, small_rig[k])
                rc = pixels_to_indices(pix, s.image_size).numpy()
                dil = ndi.binary_dilation(s.masks[k], iterations=3)
                h, w = s.image_size
                for r, c in rc:
                    ri, ci = int(round(r)), int(round(c))
                    total += 1
                    if 0 <= ri < h and 0 <= ci < w and dil[ri, ci]:
                        inside += 1
        assert inside / total >= 0.95

    def test_feature_view_alignment(self, scene_spec, small_rig):
        """Per-limb channel argmax at an unoccluded limb's projected midpoint
        identifies that limb for >= 90% of unoccluded limbs."""
        limbs = scene_spec.limbs
        hits, checked = 0, 0
        for seed in range(6):
            s = synth_generate(scene_spec, small_rig, seed=seed)
            joints = s.ground_truth_joints
            vis = limb_midpoint_visibility(scene_spec, joints, small_rig)
            feats = s.layer_features[0]  # (L, K, H, W)
            h, w = s.image_size
            for k in range(s.num_views):
                pix, _, _ = project_points(torch.as_tensor(joints), small_rig[k])
                rc = pixels_to_indices(pix, s.image_size).numpy()
                for l, (p, c) in enumerate(limbs):
                    if not vis[k, l]:
                        continue
                    mid = np.round((rc[p] + rc[c]) / 2).astype(int)
                    if not (0 <= mid[0] < h and 0 <= mid[1] < w):
                        continue
                    checked += 1
                    if feats[:, k, mid[0], mid[1]].argmax() == l:
                        hits += 1
        assert checked > 20
        assert hits / checked >= 0.90

    def test_figure_stays_in_cube(self, small_rig):
        spec = default_scene_spec(6, appearance_seed=1)
        wild = SceneSpec(
            joint_count=spec.joint_count,
            limb_topology=spec.limb_topology,
            limb_radii=spec.limb_radii,
            joint_angle_ranges=tuple([(-3.0, 3.0)] * spec.joint_count),
            appearance_seed=1,
        )
        for seed in range(4):
            s = synth_generate(wild, small_rig, seed=seed)
            assert np.abs(s.ground_truth_joints).max() <= 0.9 + 1e-9


class TestBundleIO:
    def test_round_trip(self, sample, tmp_path):
        write_bundle(sample, tmp_path / "b")
        out = read_bundle(tmp_path / "b")
        assert np.array_equal(out.images, sample.images)
        assert np.array_equal(out.masks, sample.masks)
        assert np.array_equal(out.ground_truth_joints, sample.ground_truth_joints)
        assert len(out.layer_features) == len(sample.layer_features)
        for fa, fb in zip(out.layer_features, sample.layer_features):
            assert np.array_equal(fa, fb)
        for a, b in zip(out.rig.cameras, sample.rig.cameras):
            assert torch.equal(a.projection, b.projection)

    def test_view_count_mismatch(self, sample, tmp_path):
        write_bundle(sample, tmp_path / "b")
        # shrink the image tensor to 3 views while the rig still declares 4
        manifest_path = tmp_path / "b" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        spec = manifest["entries"]["images"]
        spec["shape"][0] = 3
        manifest_path.write_text(json.dumps(manifest))
        data = (tmp_path / "b" / spec["file"]).read_bytes()
        (tmp_path / "b" / spec["file"]).write_bytes(data[: 3 * len(data) // 4])
        with pytest.raises(BundleError, match="images.*K=4"):
            read_bundle(tmp_path / "b")

    def test_optional_features_absent(self, sample, tmp_path):
        bare = type(sample)(
            images=sample.images,
            masks=sample.masks,
            rig=sample.rig,
            layer_features=None,
            ground_truth_joints=None,
        )
        write_bundle(bare, tmp_path / "b")
        out = read_bundle(tmp_path / "b")
        assert out.layer_features is None
        assert out.ground_truth_joints is None

    def test_unknown_bundle_version(self, sample, tmp_path):
        write_bundle(sample, tmp_path / "b")
        manifest_path = tmp_path / "b" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["meta"]["bundle_format_version"] = 9
        manifest_path.write_text(json.dumps(manifest))
        with pytest.raises(BundleError, match="version"):
            read_bundle(tmp_path / "b")
