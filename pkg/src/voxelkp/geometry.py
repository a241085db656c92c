"""Pinhole camera algebra: projection composition, point projection, orbit rigs.

Conventions used throughout the package:

* World frame is the canonical cube ``[-1, 1]^3`` centered at the origin.
* A camera maps world points via ``p_cam = R @ p_world + t`` and projects with
  intrinsics ``K``; the full 3x4 projection is ``P = K @ [R | t]``.
* Pixel coordinates are continuous ``(x, y)`` with the origin at the image
  center when the principal point is zero. ``pixels_to_indices`` converts to
  continuous array ``(row, col)`` positions where integer values are pixel
  centers; top-left pixel center is ``(row, col) = (0, 0)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

EPS_DEPTH = 1e-6

RIG_FORMAT_VERSION = 1


class GeometryError(ValueError):
    """Raised on invalid camera parameters."""


def _as_f64(x) -> Tensor:
    t = torch.as_tensor(x, dtype=torch.float64)
    return t.clone()


def check_rotation(rotation: Tensor, tol: float = 1e-5) -> None:
    """Validate that ``rotation`` is orthonormal with determinant +1."""
    r = _as_f64(rotation)
    if r.shape != (3, 3):
        raise GeometryError(f"rotation must be 3x3, got {tuple(r.shape)}")
    ortho_err = torch.linalg.norm(r.T @ r - torch.eye(3, dtype=torch.float64)).item()
    if ortho_err > tol:
        raise GeometryError(
            f"rotation is not orthonormal: ||R^T R - I||_F = {ortho_err:.3e} > {tol:.1e}"
        )
    det = torch.linalg.det(r).item()
    if abs(det - 1.0) > tol:
        raise GeometryError(f"rotation must have det +1, got det = {det:.6f}")


@dataclass(frozen=True)
class CameraProjection:
    """A pinhole camera: intrinsics, extrinsics, and the cached 3x4 projection."""

    intrinsics: Tensor  # 3x3, float64
    rotation: Tensor  # 3x3, float64, orthonormal
    translation: Tensor  # (3,), float64
    projection: Tensor = field(init=False)  # 3x4, cached K @ [R | t]

    def __post_init__(self):
        object.__setattr__(
            self,
            "projection",
            self.intrinsics @ torch.cat([self.rotation, self.translation[:, None]], dim=1),
        )

    @property
    def center(self) -> Tensor:
        """Camera center in world coordinates, ``-R^T t``."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class CameraRig:
    """Ordered list of cameras; view 0 is the designated input view."""

    cameras: tuple[CameraProjection, ...]
    image_size: tuple[int, int]  # (H, W)

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise GeometryError("a rig needs at least one camera")
        h, w = self.image_size
        if h < 1 or w < 1:
            raise GeometryError(f"invalid image size {self.image_size}")

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, k: int) -> CameraProjection:
        return self.cameras[k]


def compose_projection(intrinsics, rotation, translation) -> CameraProjection:
    """Build a :class:`CameraProjection` from ``K``, ``R``, ``t``.

    Raises :class:`GeometryError` if ``rotation`` is not orthonormal
    (tolerance 1e-5 on the Frobenius norm of ``R^T R - I``).
    """
    k = _as_f64(intrinsics)
    r = _as_f64(rotation)
    t = _as_f64(translation).reshape(3)
    if k.shape != (3, 3):
        raise GeometryError(f"intrinsics must be 3x3, got {tuple(k.shape)}")
    check_rotation(r)
    return CameraProjection(intrinsics=k, rotation=r, translation=t)


def project_points(
    points: Tensor, camera: CameraProjection, eps_depth: float = EPS_DEPTH
) -> tuple[Tensor, Tensor, Tensor]:
    """Project world points through a camera.

    Parameters
    ----------
    points : (..., 3) tensor. Differentiable; the camera is treated as constant.

    Returns
    -------
    pixels : (..., 2) tensor, homogeneously normalized pixel coordinates.
    depths : (...,) tensor, the pre-division third homogeneous coordinate.
    valid : (...,) bool tensor, False where ``|depth| < eps_depth`` (the pixel
        value is then a safe placeholder, never a division by ~0).
    """
    proj = camera.projection.to(dtype=points.dtype, device=points.device)
    hom = points @ proj[:, :3].T + proj[:, 3]
    depths = hom[..., 2]
    valid = depths.abs() >= eps_depth
    safe = torch.where(
        valid, depths, torch.where(depths < 0, -eps_depth, eps_depth).to(depths.dtype)
    )
    pixels = hom[..., :2] / safe[..., None]
    return pixels, depths, valid


def pixels_to_indices(pixels: Tensor, image_size: tuple[int, int]) -> Tensor:
    """Convert center-origin pixel coords ``(x, y)`` to array coords ``(row, col)``."""
    h, w = image_size
    x = pixels[..., 0]
    y = pixels[..., 1]
    col = x + (w - 1) / 2.0
    row = y + (h - 1) / 2.0
    return torch.stack([row, col], dim=-1)


def indices_to_pixels(indices: Tensor, image_size: tuple[int, int]) -> Tensor:
    """Inverse of :func:`pixels_to_indices`."""
    h, w = image_size
    row = indices[..., 0]
    col = indices[..., 1]
    return torch.stack([col - (w - 1) / 2.0, row - (h - 1) / 2.0], dim=-1)


def backproject_ray(
    pixel: Tensor, camera: CameraProjection
) -> tuple[Tensor, Tensor]:
    """Ray through a pixel: returns (origin, unit direction) in world coordinates."""
    k = camera.intrinsics
    r = camera.rotation
    px = _as_f64(pixel)
    hom = torch.cat([px, torch.ones(1, dtype=torch.float64)])
    d_cam = torch.linalg.solve(k, hom)
    d_world = r.T @ d_cam
    d_world = d_world / torch.linalg.norm(d_world)
    return camera.center, d_world


def look_at_rotation(center: Tensor, target: Tensor, up: Tensor) -> Tensor:
    """World-to-camera rotation for a camera at ``center`` looking at ``target``.

    Camera z points toward the target, x = forward x up, y completes the
    right-handed frame (pointing image-down for an upright camera).
    """
    fwd = target - center
    fwd = fwd / torch.linalg.norm(fwd)
    u = up / torch.linalg.norm(up)
    x = torch.linalg.cross(fwd, u)
    if torch.linalg.norm(x) < 1e-8:
        # looking along the up axis; pick an arbitrary consistent frame
        u = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
        x = torch.linalg.cross(fwd, u)
    x = x / torch.linalg.norm(x)
    y = torch.linalg.cross(fwd, x)
    return torch.stack([x, y, fwd], dim=0)


def default_focal_px(image_size: tuple[int, int], radius: float) -> float:
    """Focal length framing a subject of radius ~0.75 centered in the cube.

    Sized so that sphere stays inside the image from the orbit distance, with
    a small margin; the far cube corners may project outside the frame.
    """
    h, w = image_size
    subject = 0.75
    return 0.6 * min(h, w) * max(radius - subject, 0.3)


def make_orbit_rig(
    num_views: int,
    elevation_deg: float = 20.0,
    radius: float = 2.5,
    image_size: tuple[int, int] = (64, 64),
    focal_px: float | None = None,
) -> CameraRig:
    """Cameras at equal azimuth steps on an orbit, all looking at the origin.

    View 0 sits at azimuth 0 (on the +z side for zero elevation). All cameras
    share one intrinsics matrix with zero principal point (center-origin
    pixel convention).
    """
    if num_views < 1:
        raise GeometryError(f"num_views must be >= 1, got {num_views}")
    if radius <= 0:
        raise GeometryError(f"radius must be positive, got {radius}")
    h, w = image_size
    if h < 1 or w < 1:
        raise GeometryError(f"invalid image size {image_size}")
    f = default_focal_px(image_size, radius) if focal_px is None else float(focal_px)
    if f <= 0:
        raise GeometryError(f"focal length must be positive, got {f}")
    intr = torch.tensor(
        [[f, 0.0, 0.0], [0.0, f, 0.0], [0.0, 0.0, 1.0]], dtype=torch.float64
    )
    elev = math.radians(elevation_deg)
    target = torch.zeros(3, dtype=torch.float64)
    up = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    cams = []
    for i in range(num_views):
        azim = 2.0 * math.pi * i / num_views
        center = radius * torch.tensor(
            [
                math.sin(azim) * math.cos(elev),
                math.sin(elev),
                math.cos(azim) * math.cos(elev),
            ],
            dtype=torch.float64,
        )
        r = look_at_rotation(center, target, up)
        t = -r @ center
        cams.append(CameraProjection(intrinsics=intr, rotation=r, translation=t))
    return CameraRig(cameras=tuple(cams), image_size=(h, w))


def _mat_to_strings(m: Tensor) -> list[str]:
    return [repr(float(v)) for v in m.reshape(-1).tolist()]


def _strings_to_mat(vals: list[str], shape: tuple[int, ...]) -> Tensor:
    return torch.tensor([float(v) for v in vals], dtype=torch.float64).reshape(shape)


def rig_to_json(rig: CameraRig) -> str:
    """Serialize a rig. Floats are written as decimal strings so the round
    trip is exact at float64."""
    doc = {
        "format_version": RIG_FORMAT_VERSION,
        "image_size": list(rig.image_size),
        "cameras": [
            {
                "intrinsics": _mat_to_strings(c.intrinsics),
                "rotation": _mat_to_strings(c.rotation),
                "translation": _mat_to_strings(c.translation),
            }
            for c in rig.cameras
        ],
    }
    return json.dumps(doc, indent=1)


def rig_from_json(text: str) -> CameraRig:
    doc = json.loads(text)
    version = doc.get("format_version")
    if version != RIG_FORMAT_VERSION:
        raise GeometryError(f"unknown rig format version: {version!r}")
    cams = tuple(
        CameraProjection(
            intrinsics=_strings_to_mat(c["intrinsics"], (3, 3)),
            rotation=_strings_to_mat(c["rotation"], (3, 3)),
            translation=_strings_to_mat(c["translation"], (3,)),
        )
        for c in doc["cameras"]
    )
    return CameraRig(cameras=cams, image_size=tuple(doc["image_size"]))
