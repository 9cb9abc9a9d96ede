"""Feature-plane storage and bilinear sampling for spherical and Cartesian sets.

Texel addressing is half-texel-centred: a normalized coordinate ``u`` in
``[0, 1]`` maps to the continuous texel coordinate ``x = u * n - 0.5``, so
``u = (i + 0.5) / n`` lands exactly on texel ``i``.  With the ``CLAMP``
policy ``x`` is clamped to ``[0, n - 1]``; with ``WRAP`` it wraps modulo
``n``, which blends the two edge texels and makes the sampled signal
continuous across ``u = 0/1``.

Plane data lives in torch tensors shaped ``(H, W, C)``; ``v`` indexes rows
(height) and ``u`` columns (width).  Sampling is differentiable with respect
to the plane data.

Sphere plane sets default to CLAMP on every axis, including phi.  The
unfolded square maps have independent left/right edges there, which is
exactly the seam discontinuity the dual-sphere fusion exists to hide; pass
``phi_wrap=True`` to get seam-free wrap-blended sampling instead.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import torch


class WrapMode(enum.Enum):
    CLAMP = "clamp"
    WRAP = "wrap"


@dataclass
class FeaturePlane:
    """A 2D feature grid with per-axis wrap policy."""

    data: torch.Tensor  # (H, W, C)
    wrap_u: WrapMode = WrapMode.CLAMP
    wrap_v: WrapMode = WrapMode.CLAMP

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("plane data must be (H, W, C)")
        if self.data.shape[0] < 2 or self.data.shape[1] < 2:
            raise ValueError("plane resolution must be at least 2x2")

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _axis_index(coord: torch.Tensor, n: int, wrap: WrapMode):
    """Map normalized coords to (i0, i1, frac) under the axis wrap policy."""
    x = coord * n - 0.5
    if wrap is WrapMode.WRAP:
        x = torch.remainder(x, n)
        x0 = torch.floor(x)
        frac = x - x0
        i0 = x0.long() % n
        i1 = (i0 + 1) % n
    else:
        x = torch.clamp(x, 0.0, n - 1.0)
        x0 = torch.floor(x)
        frac = x - x0
        i0 = x0.long()
        i1 = torch.clamp(i0 + 1, max=n - 1)
    return i0, i1, frac


def sample_bilinear(plane: FeaturePlane, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of ``(u, v)`` batches; returns ``(N, C)`` features."""
    h, w, c = plane.data.shape
    iu0, iu1, fu = _axis_index(u, w, plane.wrap_u)
    iv0, iv1, fv = _axis_index(v, h, plane.wrap_v)
    flat = plane.data.reshape(h * w, c)
    t00 = flat[iv0 * w + iu0]
    t10 = flat[iv0 * w + iu1]
    t01 = flat[iv1 * w + iu0]
    t11 = flat[iv1 * w + iu1]
    fu = fu.unsqueeze(-1)
    fv = fv.unsqueeze(-1)
    top = t00 * (1.0 - fu) + t10 * fu
    bot = t01 * (1.0 - fu) + t11 * fu
    return top * (1.0 - fv) + bot * fv


def _init_plane(rng: np.random.Generator, h: int, w: int, c: int, std: float,
                dtype: torch.dtype) -> torch.Tensor:
    arr = rng.normal(0.0, std, size=(h, w, c))
    return torch.tensor(arr, dtype=dtype)


@dataclass
class SpherePlaneSet:
    """The three spherical planes P_theta_r, P_phi_r, P_theta_phi (shared C)."""

    p_theta_r: FeaturePlane
    p_phi_r: FeaturePlane
    p_theta_phi: FeaturePlane

    def __post_init__(self):
        cs = {self.p_theta_r.channels, self.p_phi_r.channels, self.p_theta_phi.channels}
        if len(cs) != 1:
            raise ValueError("sphere planes must share a channel count")

    @property
    def channels(self) -> int:
        return self.p_theta_r.channels

    @classmethod
    def build(cls, rng: np.random.Generator, resolution: int = 256, channels: int = 32,
              std: float = 0.05, dtype: torch.dtype = torch.float32,
              phi_wrap: bool = False) -> "SpherePlaneSet":
        phi_mode = WrapMode.WRAP if phi_wrap else WrapMode.CLAMP
        r = resolution
        return cls(
            p_theta_r=FeaturePlane(_init_plane(rng, r, r, channels, std, dtype)),
            p_phi_r=FeaturePlane(_init_plane(rng, r, r, channels, std, dtype), wrap_u=phi_mode),
            p_theta_phi=FeaturePlane(_init_plane(rng, r, r, channels, std, dtype), wrap_u=phi_mode),
        )

    def tensors(self) -> dict[str, torch.Tensor]:
        return {
            "p_theta_r": self.p_theta_r.data,
            "p_phi_r": self.p_phi_r.data,
            "p_theta_phi": self.p_theta_phi.data,
        }


def sample_sphere_set(planes: SpherePlaneSet, s: torch.Tensor, r_max: float) -> torch.Tensor:
    """Sum of the three plane lookups for spherical coords ``s = (r, theta, phi)``.

    The uv maps are ``(theta/pi, r/r_max)``, ``((phi+pi)/2pi, r/r_max)`` and
    ``((phi+pi)/2pi, theta/pi)``; out-of-range ``r`` clamps.
    """
    r = s[..., 0] / r_max
    theta = s[..., 1] / math.pi
    phi = (s[..., 2] + math.pi) / (2.0 * math.pi)
    f = sample_bilinear(planes.p_theta_r, theta, r)
    f = f + sample_bilinear(planes.p_phi_r, phi, r)
    f = f + sample_bilinear(planes.p_theta_phi, phi, theta)
    return f


@dataclass
class CartesianPlaneSet:
    """The EG3D-style axis-aligned planes P_XY, P_XZ, P_YZ (all CLAMP)."""

    p_xy: FeaturePlane
    p_xz: FeaturePlane
    p_yz: FeaturePlane

    def __post_init__(self):
        cs = {self.p_xy.channels, self.p_xz.channels, self.p_yz.channels}
        if len(cs) != 1:
            raise ValueError("cartesian planes must share a channel count")

    @property
    def channels(self) -> int:
        return self.p_xy.channels

    @classmethod
    def build(cls, rng: np.random.Generator, resolution: int = 256, channels: int = 32,
              std: float = 0.05, dtype: torch.dtype = torch.float32) -> "CartesianPlaneSet":
        r = resolution
        return cls(
            p_xy=FeaturePlane(_init_plane(rng, r, r, channels, std, dtype)),
            p_xz=FeaturePlane(_init_plane(rng, r, r, channels, std, dtype)),
            p_yz=FeaturePlane(_init_plane(rng, r, r, channels, std, dtype)),
        )

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"p_xy": self.p_xy.data, "p_xz": self.p_xz.data, "p_yz": self.p_yz.data}


def _norm01(x: torch.Tensor, half_extent: float) -> torch.Tensor:
    return (x + half_extent) / (2.0 * half_extent)


def sample_cartesian_set(planes: CartesianPlaneSet, p: torch.Tensor,
                         half_extent: float) -> torch.Tensor:
    """Sum of the three axis-aligned projections' bilinear lookups.

    Each projection discards one coordinate, so a point and its z-mirror hit
    the identical P_XY cell: that shared lookup is the entanglement mechanism
    the spherical sets avoid on their surface plane.
    """
    x = _norm01(p[..., 0], half_extent)
    y = _norm01(p[..., 1], half_extent)
    z = _norm01(p[..., 2], half_extent)
    f = sample_bilinear(planes.p_xy, x, y)
    f = f + sample_bilinear(planes.p_xz, x, z)
    f = f + sample_bilinear(planes.p_yz, y, z)
    return f


@dataclass
class TriGridSet:
    """Cartesian tri-grid: D parallel planes per axis pair, linear across depth."""

    g_xy: torch.Tensor  # (D, H, W, C), depth along z
    g_xz: torch.Tensor  # depth along y
    g_yz: torch.Tensor  # depth along x

    def __post_init__(self):
        for g in (self.g_xy, self.g_xz, self.g_yz):
            if g.ndim != 4:
                raise ValueError("tri-grid stacks must be (D, H, W, C)")
        shapes = {g.shape for g in (self.g_xy, self.g_xz, self.g_yz)}
        if len(shapes) != 1:
            raise ValueError("tri-grid stacks must share a shape")

    @property
    def depth(self) -> int:
        return self.g_xy.shape[0]

    @property
    def channels(self) -> int:
        return self.g_xy.shape[3]

    @classmethod
    def build(cls, rng: np.random.Generator, resolution: int = 256, channels: int = 32,
              depth: int = 3, std: float = 0.05,
              dtype: torch.dtype = torch.float32) -> "TriGridSet":
        def stack() -> torch.Tensor:
            arr = rng.normal(0.0, std, size=(depth, resolution, resolution, channels))
            return torch.tensor(arr, dtype=dtype)

        return cls(g_xy=stack(), g_xz=stack(), g_yz=stack())

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"g_xy": self.g_xy, "g_xz": self.g_xz, "g_yz": self.g_yz}


def _sample_stack(grid: torch.Tensor, u: torch.Tensor, v: torch.Tensor,
                  w: torch.Tensor) -> torch.Tensor:
    """Trilinear lookup: bilinear in-plane, linear across the D planes."""
    d, h, wid, c = grid.shape
    iu0, iu1, fu = _axis_index(u, wid, WrapMode.CLAMP)
    iv0, iv1, fv = _axis_index(v, h, WrapMode.CLAMP)
    id0, id1, fd = _axis_index(w, d, WrapMode.CLAMP)
    flat = grid.reshape(d * h * wid, c)
    fu = fu.unsqueeze(-1)
    fv = fv.unsqueeze(-1)
    fd = fd.unsqueeze(-1)

    def plane_at(idx_d: torch.Tensor) -> torch.Tensor:
        base = idx_d * (h * wid)
        t00 = flat[base + iv0 * wid + iu0]
        t10 = flat[base + iv0 * wid + iu1]
        t01 = flat[base + iv1 * wid + iu0]
        t11 = flat[base + iv1 * wid + iu1]
        top = t00 * (1.0 - fu) + t10 * fu
        bot = t01 * (1.0 - fu) + t11 * fu
        return top * (1.0 - fv) + bot * fv

    return plane_at(id0) * (1.0 - fd) + plane_at(id1) * fd


def sample_trigrid(grid: TriGridSet, p: torch.Tensor, half_extent: float) -> torch.Tensor:
    """Sum of the three per-axis trilinear stack lookups; D=1 degenerates to tri-plane."""
    x = _norm01(p[..., 0], half_extent)
    y = _norm01(p[..., 1], half_extent)
    z = _norm01(p[..., 2], half_extent)
    f = _sample_stack(grid.g_xy, x, y, z)
    f = f + _sample_stack(grid.g_xz, x, z, y)
    f = f + _sample_stack(grid.g_yz, y, z, x)
    return f


# --- lookup-footprint accounting -------------------------------------------

def _footprint(coord: float, n: int) -> tuple[int, int]:
    """CLAMP-policy texel pair touched by a normalized coordinate."""
    x = min(max(coord * n - 0.5, 0.0), n - 1.0)
    i0 = int(math.floor(x))
    return i0, min(i0 + 1, n - 1)


def _sphere_uvs(p: np.ndarray, frame, r_max: float) -> dict[str, tuple[float, float]]:
    from . import geometry

    s = geometry.frame_coords(frame, p)
    r, theta, phi = float(s[0]) / r_max, float(s[1]) / math.pi, (float(s[2]) + math.pi) / (2 * math.pi)
    return {"p_theta_r": (theta, r), "p_phi_r": (phi, r), "p_theta_phi": (phi, theta)}


def _cartesian_uvs(p: np.ndarray, half_extent: float) -> dict[str, tuple[float, float]]:
    x, y, z = ((float(v) + half_extent) / (2 * half_extent) for v in p)
    return {"p_xy": (x, y), "p_xz": (x, z), "p_yz": (y, z)}


def shared_lookup_fraction(kind: str, pairs: np.ndarray, *, resolution: int = 256,
                           half_extent: float = 0.5, r_max: float = 0.5) -> dict:
    """Fraction of plane lookups with identical texel footprints across mirrored pairs.

    ``pairs`` is ``(N, 2, 3)`` with the second point the z-mirror of the
    first (validated).  Returns per-plane fractions plus the overall
    fraction; a footprint is the 2x2 texel block a bilinear lookup touches,
    so this is pure index arithmetic and needs no plane data.

    Kinds: ``tri-plane``, ``sphere`` (world-frame single sphere) and
    ``dual-sphere`` (both rotated frames, six lookups per point).
    """
    from . import geometry

    pairs = np.asarray(pairs, dtype=np.float64)
    if pairs.ndim != 3 or pairs.shape[1:] != (2, 3):
        raise ValueError("pairs must be (N, 2, 3)")
    mirrored = pairs[:, 0] * np.array([1.0, 1.0, -1.0])
    if not np.allclose(mirrored, pairs[:, 1], atol=1e-9):
        raise ValueError("pairs must be mirrored about z=0")

    def uvs_of(p: np.ndarray) -> dict[str, tuple[float, float]]:
        if kind == "tri-plane":
            return _cartesian_uvs(p, half_extent)
        if kind == "sphere":
            return _sphere_uvs(p, geometry.FRAME_WORLD, r_max)
        if kind == "dual-sphere":
            out = {f"a.{k}": v for k, v in _sphere_uvs(p, geometry.FRAME_A, r_max).items()}
            out.update({f"b.{k}": v for k, v in _sphere_uvs(p, geometry.FRAME_B, r_max).items()})
            return out
        raise ValueError(f"unknown representation kind: {kind!r}")

    names = list(uvs_of(pairs[0, 0]).keys())
    shared = {name: 0 for name in names}
    for a, b in pairs:
        ua, ub = uvs_of(a), uvs_of(b)
        for name in names:
            fa = (_footprint(ua[name][0], resolution), _footprint(ua[name][1], resolution))
            fb = (_footprint(ub[name][0], resolution), _footprint(ub[name][1], resolution))
            if fa == fb:
                shared[name] += 1
    n = len(pairs)
    per_plane = {name: shared[name] / n for name in names}
    overall = sum(shared.values()) / (n * len(names))
    return {"overall": overall, "per_plane": per_plane}
