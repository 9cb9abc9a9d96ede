"""Coordinate systems, rotated sphere frames, fusion weights, and the camera model.

Conventions used throughout the package:

* World Cartesian axes: the head sits at the origin with +z pointing out of
  the face, +y up, and +x to the head's left.
* World spherical coordinates ``(r, theta, phi)``: ``theta`` in ``[0, pi]``
  measured from the +z polar axis, ``phi = atan2(y, x)`` in ``[-pi, pi]``.
* Points are arrays with a trailing axis of size 3; every function here is
  vectorised over leading axes and accepts either numpy arrays or torch
  tensors (torch inputs stay in torch, so plane/decoder gradients can flow
  through the frame transforms when a field is queried).

Singularities are made total by convention: ``phi = 0`` on the polar axis
and at the origin, ``theta = 0`` at the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_CAMERA_RADIUS = 2.7
DEFAULT_SCENE_RADIUS = 0.5
DEFAULT_FOCAL = 4.2647


def _ns(x):
    """Pick the array namespace (numpy or torch) matching the input."""
    return torch if isinstance(x, torch.Tensor) else np


def cart_to_sph(p):
    """Cartesian ``(..., 3)`` -> spherical ``(..., 3)`` as ``(r, theta, phi)``.

    Total function: the origin maps to ``(0, 0, 0)`` and points on the polar
    axis get ``phi = 0`` (``atan2(0, 0) == 0``).
    """
    xp = _ns(p)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r = xp.sqrt(x * x + y * y + z * z)
    one = xp.ones_like(r)
    r_safe = xp.where(r > 0, r, one)
    cos_theta = xp.clip(z / r_safe, -1.0, 1.0)
    theta = xp.where(r > 0, xp.arccos(cos_theta), xp.zeros_like(r))
    phi = xp.arctan2(y, x)
    return xp.stack([r, theta, phi], -1)


def sph_to_cart(s):
    """Spherical ``(r, theta, phi)`` -> Cartesian ``(..., 3)``."""
    xp = _ns(s)
    r, theta, phi = s[..., 0], s[..., 1], s[..., 2]
    st = xp.sin(theta)
    return xp.stack([r * st * xp.cos(phi), r * st * xp.sin(phi), r * xp.cos(theta)], -1)


@dataclass(frozen=True)
class SphereFrame:
    """A rotated spherical frame; ``rotation`` maps world coords into the frame.

    The frame's polar axis is the world direction that the rotation sends to
    frame-local +z (spherical coordinates inside the frame follow the world
    conventions above).
    """

    id: str
    rotation: np.ndarray  # (3, 3) orthonormal, det +1

    def __post_init__(self):
        rt_r = self.rotation.T @ self.rotation
        if not np.allclose(rt_r, np.eye(3), atol=1e-6):
            raise ValueError(f"frame {self.id}: rotation is not orthonormal")
        if not math.isclose(float(np.linalg.det(self.rotation)), 1.0, abs_tol=1e-6):
            raise ValueError(f"frame {self.id}: rotation must be proper (det +1)")

    @property
    def polar_axis(self) -> np.ndarray:
        return self.rotation[2]


# Frame A: polar axis +y, seam (phi_A = +-pi) on the back half-meridian
# {x = 0, z < 0}.  Frame B: polar axis -x, seam on the front half-meridian
# {y = 0, z > 0}.  The polar angles reproduce the closed forms
# theta_A = arccos(y/r) and theta_B = arccos(-x/r); the azimuth sign for B is
# the unique choice that points the two seams in opposite directions so the
# combined fusion weight never vanishes (see eval.weight_cover_min).
FRAME_A = SphereFrame("A", np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
FRAME_B = SphereFrame("B", np.array([[0.0, 0.0, -1.0], [0.0, -1.0, 0.0], [-1.0, 0.0, 0.0]]))
# Identity frame: world spherical coordinates (the single-sphere baseline).
FRAME_WORLD = SphereFrame("world", np.eye(3))


def frame_coords(frame: SphereFrame, p):
    """Spherical coordinates of world points ``p`` inside ``frame``."""
    xp = _ns(p)
    if xp is torch:
        rot = torch.as_tensor(frame.rotation, dtype=p.dtype)
        return cart_to_sph(p @ rot.T)
    return cart_to_sph(p @ frame.rotation.T)


def fusion_weight(theta, phi):
    """Fusion weight map ``w(theta, phi)`` on one sphere's unfolded rectangle.

    ``w = (1 + cos(2*theta - pi))/2 * (1 + cos(phi))/2``; equals 1 at the
    rectangle centre ``(pi/2, 0)`` and falls to 0 on all four edges, i.e. at
    the poles and along the seam.
    """
    xp = _ns(theta)
    return 0.25 * (1.0 + xp.cos(2.0 * theta - math.pi)) * (1.0 + xp.cos(phi))


def default_intrinsics() -> np.ndarray:
    """The shared normalized-coordinates intrinsic matrix (focal 4.2647, pp 0.5)."""
    return np.array(
        [[DEFAULT_FOCAL, 0.0, 0.5], [0.0, DEFAULT_FOCAL, 0.5], [0.0, 0.0, 1.0]]
    )


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera extrinsic for a camera on the viewing sphere.

    The camera looks at the origin along its local -z axis; the extrinsic
    factors as ``[[I, t], [0, 1]] @ [[R, 0], [0, 1]]`` with
    ``t = (0, 0, -radius)``.
    """

    extrinsic: np.ndarray  # (4, 4)
    radius: float

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsic[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def validate(self, tol: float = 1e-6) -> None:
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=tol):
            raise ValueError("camera rotation block is not orthonormal")
        if abs(float(np.linalg.norm(self.center)) - self.radius) > tol:
            raise ValueError("camera center is not at the stated radius")


def camera_from_view(theta: float, phi: float, radius: float = DEFAULT_CAMERA_RADIUS) -> CameraPose:
    """Camera at world direction ``(theta, phi)`` on the ``radius`` sphere, facing the origin.

    Up is world +y projected into the image plane; when the view direction is
    within ~1e-6 of +-y the fallback up is world +z, so top/bottom cameras
    stay well defined.
    """
    if radius <= 0:
        raise ValueError("camera radius must be positive")
    center = sph_to_cart(np.array([radius, theta, phi]))
    backward = center / radius
    up = np.array([0.0, 1.0, 0.0])
    if abs(float(np.dot(backward, up))) > 1.0 - 1e-6:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(up, backward)
    right /= np.linalg.norm(right)
    true_up = np.cross(backward, right)
    extrinsic = np.eye(4)
    extrinsic[:3, :3] = np.stack([right, true_up, backward])
    extrinsic[:3, 3] = np.array([0.0, 0.0, -radius])
    return CameraPose(extrinsic=extrinsic, radius=float(radius))


def view_dir_from_yaw_pitch(yaw, pitch):
    """Unit view direction for yaw (0 = front, +z; positive toward +x) and pitch (positive up)."""
    xp = _ns(yaw)
    cp = xp.cos(pitch)
    return xp.stack([xp.sin(yaw) * cp, xp.sin(pitch), xp.cos(yaw) * cp], -1)


def yaw_of_direction(d):
    """Horizontal orbit angle of a view direction: ``atan2(x, z)``, 0 at the front."""
    xp = _ns(d)
    return xp.arctan2(d[..., 0], d[..., 2])
