import numpy as np
import pytest
import torch

from voxelkp.geometry import (
    backproject_ray,
    indices_to_pixels,
    make_orbit_rig,
    pixels_to_indices,
    project_points,
)
from voxelkp.lifting import (
    FeatureAggregator,
    KeypointHead,
    LiftingError,
    Unprojector,
    VoxelGrid,
    aggregate_features,
    attention_fuse,
    bilinear_sample,
    keypoint_head,
    unproject,
)


def identity_aggregator(channels, size, dtype=torch.float32):
    agg = FeatureAggregator([channels], channels, size).to(dtype)
    with torch.no_grad():
        agg.bottlenecks[0].weight.copy_(
            torch.eye(channels, dtype=dtype).reshape(channels, channels, 1, 1)
        )
        agg.bottlenecks[0].bias.zero_()
        agg.layer_weights.fill_(1.0)
    return agg


class TestVoxelGrid:
    def test_centers_layout(self):
        grid = VoxelGrid(resolution=4)
        centers = grid.centers()
        assert centers.shape == (4, 4, 4, 3)
        assert torch.allclose(centers[0, 0, 0], torch.tensor([-0.75] * 3, dtype=torch.float64))
        assert torch.allclose(centers[-1, -1, -1], torch.tensor([0.75] * 3, dtype=torch.float64))
        # centroid of all centers is the box center
        assert centers.reshape(-1, 3).mean(0).abs().max() < 1e-12

    def test_rejects_tiny(self):
        with pytest.raises(LiftingError):
            VoxelGrid(resolution=1)


class TestAggregateFeatures:
    def test_single_layer_identity(self):
        agg = identity_aggregator(3, (16, 16))
        x = torch.rand(3, 2, 16, 16)
        out = aggregate_features([x], agg)
        assert torch.allclose(out, x, atol=1e-6)

    def test_two_layer_constant_blend(self):
        agg = FeatureAggregator([2, 2], 2, (8, 8))
        with torch.no_grad():
            for b in agg.bottlenecks:
                b.weight.copy_(torch.eye(2).reshape(2, 2, 1, 1))
                b.bias.zero_()
            agg.layer_weights.copy_(torch.tensor([0.3, 0.7]))
        a = torch.full((2, 1, 8, 8), 2.0)
        b = torch.full((2, 1, 8, 8), -1.0)
        out = aggregate_features([a, b], agg)
        assert torch.allclose(out, torch.full_like(out, 0.3 * 2.0 + 0.7 * -1.0), atol=1e-6)

    def test_upsampling_path(self):
        agg = identity_aggregator(1, (8, 8))
        low = torch.ones(1, 1, 4, 4)
        out = aggregate_features([low], agg)
        assert out.shape == (1, 1, 8, 8)
        assert torch.allclose(out, torch.ones_like(out), atol=1e-6)

    def test_layer_count_mismatch(self):
        agg = identity_aggregator(1, (8, 8))
        with pytest.raises(LiftingError, match="layers"):
            aggregate_features([torch.ones(1, 1, 8, 8)] * 2, agg)

    def test_layer_weight_gradient(self):
        torch.manual_seed(0)
        agg = FeatureAggregator([2, 3], 4, (6, 6)).double()
        stack = [torch.randn(2, 2, 6, 6, dtype=torch.float64),
                 torch.randn(3, 2, 3, 3, dtype=torch.float64)]

        def scalar():
            return aggregate_features(stack, agg).pow(2).sum()

        loss = scalar()
        loss.backward()
        h = 1e-6
        for l in range(2):
            with torch.no_grad():
                agg.layer_weights[l] += h
                up = scalar()
                agg.layer_weights[l] -= 2 * h
                dn = scalar()
                agg.layer_weights[l] += h
            fd = float((up - dn) / (2 * h))
            an = float(agg.layer_weights.grad[l])
            assert abs(fd - an) / max(abs(fd), 1e-8) < 1e-4


class TestKeypointHead:
    def test_zero_head(self):
        head = KeypointHead(4, 5)
        with torch.no_grad():
            for m in head.net:
                if hasattr(m, "weight"):
                    m.weight.zero_()
                    m.bias.zero_()
        out = keypoint_head(torch.randn(4, 3, 8, 8), head)
        assert torch.equal(out, torch.zeros(5, 3, 8, 8))

    def test_shape_contract(self):
        head = KeypointHead(6, 9)
        out = keypoint_head(torch.randn(6, 2, 10, 12), head)
        assert out.shape == (9, 2, 10, 12)

    def test_view_permutation_equivariance(self):
        torch.manual_seed(1)
        head = KeypointHead(3, 4)
        x = torch.randn(3, 5, 7, 7)
        perm = torch.tensor([3, 0, 4, 1, 2])
        a = keypoint_head(x, head)[:, perm]
        b = keypoint_head(x[:, perm], head)
        assert torch.allclose(a, b, atol=1e-6)


class TestBilinearSample:
    def test_midpoint(self):
        maps = torch.zeros(1, 2, 2)
        maps[0, 0, 1] = 1.0
        rc = torch.tensor([[0.0, 0.5]])
        out = bilinear_sample(maps, rc)
        assert torch.allclose(out, torch.tensor([[0.5]]))

    def test_outside_is_exactly_zero(self):
        maps = torch.ones(1, 4, 4)
        rc = torch.tensor([[-0.001, 2.0], [2.0, 3.0001], [5.0, 1.0]])
        out = bilinear_sample(maps, rc)
        assert torch.equal(out, torch.tensor([[0.0, 0.0, 0.0]]))

    def test_corner_exact(self):
        maps = torch.arange(16.0).reshape(1, 4, 4)
        rc = torch.tensor([[3.0, 3.0], [0.0, 0.0]])
        out = bilinear_sample(maps, rc)
        assert torch.allclose(out, torch.tensor([[15.0, 0.0]]))


class TestUnproject:
    def test_constant_field(self):
        rig = make_orbit_rig(2, 10.0, 2.5, (32, 32))
        grid = VoxelGrid(resolution=10)
        f_kp = torch.ones(3, 2, 32, 32)
        vol = unproject(f_kp, rig, grid)
        assert vol.shape == (3, 2, 10, 10, 10)
        # oracle: voxels whose projection is strictly inside the image sample 1
        centers = grid.centers_flat()
        h, w = rig.image_size
        for k in range(2):
            pix, depth, valid = project_points(centers, rig[k])
            rc = pixels_to_indices(pix, (h, w))
            inside = (
                (rc[:, 0] >= 0) & (rc[:, 0] <= h - 1)
                & (rc[:, 1] >= 0) & (rc[:, 1] <= w - 1)
                & valid & (depth > 0)
            )
            got = vol[0, k].reshape(-1)
            assert torch.allclose(got[inside], torch.ones(int(inside.sum())))
            assert torch.equal(got[~inside], torch.zeros(int((~inside).sum())))

    def test_delta_image_lights_camera_ray(self):
        """The max of the unprojected volume sits on the ray through the lit
        pixel (checked against an exact ray-to-voxel-center oracle)."""
        rig = make_orbit_rig(1, 15.0, 2.5, (32, 32))
        grid = VoxelGrid(resolution=16)
        r0, c0 = 13, 21
        f_kp = torch.zeros(1, 1, 32, 32)
        f_kp[0, 0, r0, c0] = 1.0
        vol = unproject(f_kp, rig, grid)[0, 0]
        best = int(vol.reshape(-1).argmax())
        assert float(vol.reshape(-1)[best]) > 0.1
        center = grid.centers_flat()[best]
        pixel = indices_to_pixels(torch.tensor([float(r0), float(c0)]), (32, 32))
        origin, direction = backproject_ray(pixel, rig[0])
        rel = center - origin
        dist = torch.linalg.norm(rel - (rel @ direction) * direction)
        voxel_diag = float(np.linalg.norm(grid.voxel_size))
        assert float(dist) <= voxel_diag / 2 + 1e-9

    def test_view_axis_mismatch(self):
        rig = make_orbit_rig(2, 0.0, 2.0, (16, 16))
        with pytest.raises(LiftingError, match="view axis"):
            unproject(torch.ones(1, 3, 16, 16), rig, VoxelGrid(resolution=4))


class TestAttentionFuse:
    def test_single_view_identity(self):
        grid = VoxelGrid(resolution=4)
        x = torch.randn(2, 1, 4, 4, 4)
        fused = attention_fuse(x, grid)
        assert torch.allclose(fused.values, x[:, 0])

    def test_equal_views(self):
        grid = VoxelGrid(resolution=3)
        v = torch.randn(1, 1, 3, 3, 3)
        x = torch.cat([v, v], dim=1)
        fused = attention_fuse(x, grid)
        assert torch.allclose(fused.values, v[:, 0], atol=1e-6)

    def test_analytic_softmax(self):
        grid = VoxelGrid(resolution=2)
        x = torch.zeros(1, 2, 2, 2, 2, dtype=torch.float64)
        x[0, 1] = float(np.log(3.0))
        fused = attention_fuse(x, grid)
        expected = 0.75 * np.log(3.0)
        assert torch.allclose(fused.values, torch.full_like(fused.values, expected))

    def test_view_permutation_invariance(self):
        rig = make_orbit_rig(4, 20.0, 2.5, (32, 32))
        grid = VoxelGrid(resolution=8)
        torch.manual_seed(0)
        f_kp = torch.rand(2, 4, 32, 32)
        fused_a = attention_fuse(unproject(f_kp, rig, grid), grid).values
        perm = [2, 0, 3, 1]
        from voxelkp.geometry import CameraRig

        rig_p = CameraRig(cameras=tuple(rig.cameras[i] for i in perm), image_size=rig.image_size)
        fused_b = attention_fuse(unproject(f_kp[:, perm], rig_p, grid), grid).values
        assert (fused_a - fused_b).abs().max() < 1e-6

    def test_convex_combination(self):
        grid = VoxelGrid(resolution=5)
        torch.manual_seed(3)
        x = torch.randn(3, 4, 5, 5, 5)
        fused = attention_fuse(x, grid).values
        lo = x.min(dim=1).values
        hi = x.max(dim=1).values
        assert bool((fused >= lo - 1e-6).all())
        assert bool((fused <= hi + 1e-6).all())

    def test_full_chain_gradient(self):
        """Gradient of sum(fused volume) w.r.t. F_kp vs central differences."""
        rig = make_orbit_rig(2, 10.0, 2.0, (16, 16))
        grid = VoxelGrid(resolution=6)
        unprojector = Unprojector(rig, grid)
        torch.manual_seed(2)
        f_kp = torch.rand(2, 2, 16, 16, dtype=torch.float64, requires_grad=True)

        def scalar(x):
            return attention_fuse(unprojector(x), grid).values.sum()

        scalar(f_kp).backward()
        rng = np.random.default_rng(0)
        h = 1e-6
        checked = 0
        for _ in range(50):
            idx = tuple(rng.integers(0, s) for s in f_kp.shape)
            d = torch.zeros_like(f_kp)
            d[idx] = h
            fd = float((scalar(f_kp.detach() + d) - scalar(f_kp.detach() - d)) / (2 * h))
            an = float(f_kp.grad[idx])
            if abs(fd) < 1e-10 and abs(an) < 1e-10:
                continue
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-3
            checked += 1
        assert checked >= 20
