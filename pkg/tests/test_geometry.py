import math

import numpy as np
import pytest
import torch

from voxelkp.geometry import (
    CameraProjection,
    GeometryError,
    backproject_ray,
    compose_projection,
    indices_to_pixels,
    make_orbit_rig,
    pixels_to_indices,
    project_points,
    rig_from_json,
    rig_to_json,
)

I3 = torch.eye(3, dtype=torch.float64)


def t64(*vals):
    return torch.tensor(vals, dtype=torch.float64)


class TestComposeProjection:
    def test_identity_case(self):
        cam = compose_projection(I3, I3, t64(0, 0, 0))
        expected = torch.cat([I3, torch.zeros(3, 1, dtype=torch.float64)], dim=1)
        assert torch.equal(cam.projection, expected)

    def test_unit_translation(self):
        cam = compose_projection(I3, I3, t64(0, 0, 1))
        hom = cam.projection @ t64(0, 0, 0, 1)
        assert torch.allclose(hom, t64(0, 0, 1))
        pix, depth, valid = project_points(t64(0, 0, 0)[None], cam)
        assert torch.allclose(pix[0], t64(0, 0))
        assert valid[0] and depth[0] == 1.0

    def test_diagonal_intrinsics(self):
        cam = compose_projection(torch.diag(t64(2, 2, 1)), I3, t64(0, 0, 0))
        pix, depth, _ = project_points(t64(1, 1, 2)[None], cam)
        assert torch.allclose(pix[0], t64(1, 1))
        assert depth[0] == 2.0

    def test_rejects_non_orthonormal(self):
        bad = I3.clone()
        bad[0, 0] = 2.0
        with pytest.raises(GeometryError, match="R\\^T R"):
            compose_projection(I3, bad, t64(0, 0, 0))

    def test_rejects_reflection(self):
        refl = torch.diag(t64(1, 1, -1))
        with pytest.raises(GeometryError, match="det"):
            compose_projection(I3, refl, t64(0, 0, 0))


class TestProjectPoints:
    def test_identity_camera(self):
        cam = compose_projection(I3, I3, t64(0, 0, 0))
        pix, depth, valid = project_points(t64(0, 0, 1)[None], cam)
        assert torch.allclose(pix[0], t64(0, 0))
        assert depth[0] == 1.0 and valid[0]

    def test_analytic_point(self):
        cam = compose_projection(I3, I3, t64(0, 0, 0))
        pix, depth, _ = project_points(t64(2, 3, 2)[None], cam)
        assert torch.allclose(pix[0], t64(1, 1.5))
        assert depth[0] == 2.0

    def test_zero_depth_flagged(self):
        cam = compose_projection(I3, I3, t64(0, 0, 0))
        pix, depth, valid = project_points(t64(0, 0, 0)[None], cam)
        assert not valid[0]
        assert torch.isfinite(pix).all()

    def test_round_trip_ray(self):
        rng = np.random.default_rng(7)
        rig = make_orbit_rig(5, 15.0, 2.5, (64, 64))
        for trial in range(40):
            cam = rig[trial % len(rig)]
            point = torch.tensor(rng.uniform(-1, 1, size=3))
            pix, depth, valid = project_points(point[None], cam)
            assert valid[0]
            origin, direction = backproject_ray(pix[0], cam)
            to_point = point - origin
            dist = torch.linalg.norm(to_point - (to_point @ direction) * direction)
            assert dist < 1e-6

    def test_homogeneous_scale_invariance(self):
        rng = np.random.default_rng(3)
        rig = make_orbit_rig(3, 25.0, 2.0, (48, 48))
        points = torch.tensor(rng.uniform(-1, 1, size=(50, 3)))
        for k in range(len(rig)):
            cam = rig[k]
            for s in (0.5, 3.0, 117.0):
                scaled = CameraProjection(
                    intrinsics=s * cam.intrinsics,
                    rotation=cam.rotation,
                    translation=cam.translation,
                )
                assert torch.allclose(scaled.projection, s * cam.projection)
                p1, _, v1 = project_points(points, cam)
                p2, _, v2 = project_points(points, scaled)
                assert torch.equal(v1, v2)
                assert (p1 - p2).abs().max() < 1e-9

    def test_gradient_matches_finite_differences(self):
        rig = make_orbit_rig(2, 10.0, 2.5, (64, 64))
        cam = rig[1]
        rng = np.random.default_rng(5)
        pts = torch.tensor(rng.uniform(-0.8, 0.8, size=(6, 3)), requires_grad=True)

        def scalar(p):
            pix, _, _ = project_points(p, cam)
            return (pix * torch.tensor([[1.3, -0.7]], dtype=torch.float64)).sum()

        scalar(pts).backward()
        grad = pts.grad.clone()
        h = 1e-5
        for i in range(pts.shape[0]):
            for j in range(3):
                d = torch.zeros_like(pts)
                d[i, j] = h
                fd = (scalar(pts.detach() + d) - scalar(pts.detach() - d)) / (2 * h)
                rel = abs(float(fd) - float(grad[i, j])) / max(abs(float(fd)), 1e-8)
                assert rel < 1e-4


class TestOrbitRig:
    def test_single_view_on_z_axis(self):
        rig = make_orbit_rig(1, 0.0, 2.0, (32, 32))
        center = rig[0].center
        assert torch.allclose(center, t64(0, 0, 2), atol=1e-12)
        # looks at the origin: the origin projects to pixel (0, 0)
        pix, depth, valid = project_points(torch.zeros(1, 3, dtype=torch.float64), rig[0])
        assert valid[0] and depth[0] > 0
        assert pix.abs().max() < 1e-12

    def test_four_view_symmetry(self):
        rig = make_orbit_rig(4, 0.0, 2.0, (32, 32))
        rot_y_pi = torch.tensor(
            [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]], dtype=torch.float64
        )
        for a, b in ((0, 2), (1, 3)):
            expected = rig[a].rotation @ rot_y_pi
            assert (rig[b].rotation - expected).abs().max() < 1e-12

    def test_orbit_radius(self):
        rig = make_orbit_rig(21, 20.0, 2.0, (64, 64))
        for cam in rig.cameras:
            radius = torch.linalg.norm(-cam.rotation.T @ cam.translation)
            assert abs(float(radius) - 2.0) < 1e-9

    def test_validation(self):
        with pytest.raises(GeometryError):
            make_orbit_rig(0, 0.0, 2.0, (32, 32))
        with pytest.raises(GeometryError):
            make_orbit_rig(2, 0.0, -1.0, (32, 32))
        with pytest.raises(GeometryError):
            make_orbit_rig(2, 0.0, 2.0, (0, 32))


class TestConventions:
    def test_pixel_index_round_trip(self):
        size = (48, 64)
        rc = torch.tensor([[0.0, 0.0], [47.0, 63.0], [10.5, 20.25]], dtype=torch.float64)
        back = pixels_to_indices(indices_to_pixels(rc, size), size)
        assert torch.allclose(back, rc)

    def test_center_origin(self):
        size = (64, 64)
        center_pixel = torch.zeros(2, dtype=torch.float64)
        rc = pixels_to_indices(center_pixel, size)
        assert torch.allclose(rc, torch.tensor([31.5, 31.5], dtype=torch.float64))


class TestRigSerialization:
    def test_json_round_trip_exact(self):
        rig = make_orbit_rig(4, 17.0, 2.31, (64, 48))
        clone = rig_from_json(rig_to_json(rig))
        assert clone.image_size == rig.image_size
        for a, b in zip(rig.cameras, clone.cameras):
            assert torch.equal(a.intrinsics, b.intrinsics)
            assert torch.equal(a.rotation, b.rotation)
            assert torch.equal(a.translation, b.translation)
            assert torch.equal(a.projection, b.projection)

    def test_unknown_version(self):
        rig = make_orbit_rig(1, 0.0, 2.0, (32, 32))
        doc = rig_to_json(rig).replace('"format_version": 1', '"format_version": 99')
        with pytest.raises(GeometryError, match="version"):
            rig_from_json(doc)
