"""Queryable radiance fields: dual-sphere (fused), single-sphere, and Cartesian baselines.

Every field exposes the same surface:

* ``query_feature(points, branch)`` -> ``(N, C)`` aggregated plane features,
* ``decoder`` / ``decode_batch`` -> density, color and parsing logits,
* ``named_parameters()`` -> the flat tensor dict the optimizer updates,
* ``meta()`` -> scalars sufficient to rebuild the field from a checkpoint.

Branches only differentiate the dual-sphere field (A and B bypass fusion);
the baselines return their single representation for any branch so the
alternating fit schedule degenerates gracefully.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch

from . import geometry
from .geometry import FRAME_A, FRAME_B, FRAME_WORLD, SphereFrame
from .planes import (
    CartesianPlaneSet,
    SpherePlaneSet,
    TriGridSet,
    sample_cartesian_set,
    sample_sphere_set,
    sample_trigrid,
)

DEFAULT_EPSILON = 1e-8
# Density pre-activation shift at init: softplus(-4) ~ 1.8e-2 keeps a fresh
# field close to transparent (near-background renders) while leaving enough
# gradient signal for Adam to wake the density up quickly.
DEFAULT_DENSITY_BIAS = -4.0


class Branch(enum.Enum):
    A = "A"
    B = "B"
    FUSED = "fused"


@dataclass
class Decoder:
    """Lightweight MLP: features -> (density, color, parsing logits).

    Two softplus hidden layers (smooth everywhere, which keeps the
    finite-difference gradient suite tight), softplus on density, sigmoid on
    color, raw parsing logits.
    """

    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor
    w3: torch.Tensor
    b3: torch.Tensor
    n_classes: int = 4

    @classmethod
    def build(cls, rng: np.random.Generator, channels: int, hidden: int = 64,
              n_classes: int = 4, dtype: torch.dtype = torch.float32,
              density_bias: float = DEFAULT_DENSITY_BIAS) -> "Decoder":
        def layer(n_in: int, n_out: int) -> tuple[torch.Tensor, torch.Tensor]:
            bound = 1.0 / math.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
            return torch.tensor(w, dtype=dtype), torch.zeros(n_out, dtype=dtype)

        n_out = 1 + 3 + n_classes
        w1, b1 = layer(channels, hidden)
        w2, b2 = layer(hidden, hidden)
        w3, b3 = layer(hidden, n_out)
        b3[0] = density_bias
        return cls(w1, b1, w2, b2, w3, b3, n_classes=n_classes)

    @classmethod
    def zeros(cls, channels: int, hidden: int = 64, n_classes: int = 4,
              dtype: torch.dtype = torch.float32) -> "Decoder":
        n_out = 1 + 3 + n_classes
        return cls(
            torch.zeros(channels, hidden, dtype=dtype), torch.zeros(hidden, dtype=dtype),
            torch.zeros(hidden, hidden, dtype=dtype), torch.zeros(hidden, dtype=dtype),
            torch.zeros(hidden, n_out, dtype=dtype), torch.zeros(n_out, dtype=dtype),
            n_classes=n_classes,
        )

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}


@dataclass
class FieldSample:
    """Decoded sample: non-negative density, [0,1] color, raw parsing logits."""

    density: float
    color: np.ndarray
    parsing_logits: np.ndarray


def decode_batch(decoder: Decoder, f: torch.Tensor):
    """Decode ``(N, C)`` features -> (density (N,), color (N,3), logits (N,K))."""
    h = torch.nn.functional.softplus(f @ decoder.w1 + decoder.b1)
    h = torch.nn.functional.softplus(h @ decoder.w2 + decoder.b2)
    out = h @ decoder.w3 + decoder.b3
    density = torch.nn.functional.softplus(out[..., 0])
    color = torch.sigmoid(out[..., 1:4])
    logits = out[..., 4:]
    return density, color, logits


def decode(decoder: Decoder, f) -> FieldSample:
    """Decode a single feature vector into a FieldSample (numpy view)."""
    t = torch.as_tensor(np.asarray(f, dtype=np.float64), dtype=decoder.w1.dtype)
    density, color, logits = decode_batch(decoder, t.reshape(1, -1))
    return FieldSample(
        density=float(density[0]),
        color=color[0].detach().numpy(),
        parsing_logits=logits[0].detach().numpy(),
    )


def _as_points(p: torch.Tensor) -> torch.Tensor:
    if p.ndim == 1:
        return p.reshape(1, 3)
    return p


@dataclass
class DualSphereField:
    """Two rotated sphere-plane sets fused by the cosine weight map, one shared decoder."""

    set_a: SpherePlaneSet
    set_b: SpherePlaneSet
    decoder: Decoder
    r_max: float = geometry.DEFAULT_SCENE_RADIUS
    epsilon: float = DEFAULT_EPSILON
    frame_a: SphereFrame = dc_field(default=FRAME_A)
    frame_b: SphereFrame = dc_field(default=FRAME_B)

    kind = "dual-sphere"
    has_branches = True

    def __post_init__(self):
        if not (0.0 < self.epsilon <= 1e-4):
            raise ValueError("epsilon must be in (0, 1e-4]")
        if self.set_a.channels != self.set_b.channels:
            raise ValueError("both sphere sets must share a channel count")

    @classmethod
    def build(cls, rng: np.random.Generator, resolution: int = 256, channels: int = 32,
              hidden: int = 64, n_classes: int = 4, r_max: float = geometry.DEFAULT_SCENE_RADIUS,
              std: float = 0.05, dtype: torch.dtype = torch.float32,
              density_bias: float = DEFAULT_DENSITY_BIAS, phi_wrap: bool = False,
              epsilon: float = DEFAULT_EPSILON) -> "DualSphereField":
        return cls(
            set_a=SpherePlaneSet.build(rng, resolution, channels, std, dtype, phi_wrap),
            set_b=SpherePlaneSet.build(rng, resolution, channels, std, dtype, phi_wrap),
            decoder=Decoder.build(rng, channels, hidden, n_classes, dtype, density_bias),
            r_max=r_max,
            epsilon=epsilon,
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.w1.dtype

    @property
    def scene_radius(self) -> float:
        return self.r_max

    def query_feature(self, p: torch.Tensor, branch: Branch = Branch.FUSED) -> torch.Tensor:
        p = _as_points(p)
        if branch is Branch.A:
            return sample_sphere_set(self.set_a, geometry.frame_coords(self.frame_a, p), self.r_max)
        if branch is Branch.B:
            return sample_sphere_set(self.set_b, geometry.frame_coords(self.frame_b, p), self.r_max)
        return self.query_fused(p)

    def query_fused(self, p: torch.Tensor) -> torch.Tensor:
        """``(w_A f_A + w_B f_B) / (w_A + w_B + eps)`` with per-frame weights."""
        p = _as_points(p)
        s_a = geometry.frame_coords(self.frame_a, p)
        s_b = geometry.frame_coords(self.frame_b, p)
        f_a = sample_sphere_set(self.set_a, s_a, self.r_max)
        f_b = sample_sphere_set(self.set_b, s_b, self.r_max)
        w_a = geometry.fusion_weight(s_a[..., 1], s_a[..., 2])
        w_b = geometry.fusion_weight(s_b[..., 1], s_b[..., 2])
        num = w_a.unsqueeze(-1) * f_a + w_b.unsqueeze(-1) * f_b
        return num / (w_a + w_b + self.epsilon).unsqueeze(-1)

    def named_parameters(self) -> dict[str, torch.Tensor]:
        out = {f"set_a.{k}": v for k, v in self.set_a.tensors().items()}
        out.update({f"set_b.{k}": v for k, v in self.set_b.tensors().items()})
        out.update({f"decoder.{k}": v for k, v in self.decoder.tensors().items()})
        return out

    def meta(self) -> dict[str, float]:
        return {
            "resolution": float(self.set_a.p_theta_r.data.shape[0]),
            "channels": float(self.set_a.channels),
            "hidden": float(self.decoder.hidden),
            "n_classes": float(self.decoder.n_classes),
            "r_max": self.r_max,
            "epsilon": self.epsilon,
        }


@dataclass
class SingleSphereField:
    """One sphere-plane set in world spherical coordinates (the ablation baseline)."""

    planes: SpherePlaneSet
    decoder: Decoder
    r_max: float = geometry.DEFAULT_SCENE_RADIUS
    frame: SphereFrame = dc_field(default=FRAME_WORLD)

    kind = "single-sphere"
    has_branches = False

    @classmethod
    def build(cls, rng: np.random.Generator, resolution: int = 256, channels: int = 32,
              hidden: int = 64, n_classes: int = 4, r_max: float = geometry.DEFAULT_SCENE_RADIUS,
              std: float = 0.05, dtype: torch.dtype = torch.float32,
              density_bias: float = DEFAULT_DENSITY_BIAS, phi_wrap: bool = False) -> "SingleSphereField":
        return cls(
            planes=SpherePlaneSet.build(rng, resolution, channels, std, dtype, phi_wrap),
            decoder=Decoder.build(rng, channels, hidden, n_classes, dtype, density_bias),
            r_max=r_max,
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.w1.dtype

    @property
    def scene_radius(self) -> float:
        return self.r_max

    def query_feature(self, p: torch.Tensor, branch: Branch = Branch.FUSED) -> torch.Tensor:
        p = _as_points(p)
        return sample_sphere_set(self.planes, geometry.frame_coords(self.frame, p), self.r_max)

    def named_parameters(self) -> dict[str, torch.Tensor]:
        out = {f"planes.{k}": v for k, v in self.planes.tensors().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.tensors().items()})
        return out

    def meta(self) -> dict[str, float]:
        return {
            "resolution": float(self.planes.p_theta_r.data.shape[0]),
            "channels": float(self.planes.channels),
            "hidden": float(self.decoder.hidden),
            "n_classes": float(self.decoder.n_classes),
            "r_max": self.r_max,
        }


@dataclass
class TriPlaneField:
    """Cartesian tri-plane baseline with the same decode/query interface."""

    planes: CartesianPlaneSet
    decoder: Decoder
    half_extent: float = geometry.DEFAULT_SCENE_RADIUS

    kind = "tri-plane"
    has_branches = False

    @classmethod
    def build(cls, rng: np.random.Generator, resolution: int = 256, channels: int = 32,
              hidden: int = 64, n_classes: int = 4,
              half_extent: float = geometry.DEFAULT_SCENE_RADIUS, std: float = 0.05,
              dtype: torch.dtype = torch.float32,
              density_bias: float = DEFAULT_DENSITY_BIAS) -> "TriPlaneField":
        return cls(
            planes=CartesianPlaneSet.build(rng, resolution, channels, std, dtype),
            decoder=Decoder.build(rng, channels, hidden, n_classes, dtype, density_bias),
            half_extent=half_extent,
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.w1.dtype

    @property
    def scene_radius(self) -> float:
        return self.half_extent

    def query_feature(self, p: torch.Tensor, branch: Branch = Branch.FUSED) -> torch.Tensor:
        return sample_cartesian_set(self.planes, _as_points(p), self.half_extent)

    def named_parameters(self) -> dict[str, torch.Tensor]:
        out = {f"planes.{k}": v for k, v in self.planes.tensors().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.tensors().items()})
        return out

    def meta(self) -> dict[str, float]:
        return {
            "resolution": float(self.planes.p_xy.data.shape[0]),
            "channels": float(self.planes.channels),
            "hidden": float(self.decoder.hidden),
            "n_classes": float(self.decoder.n_classes),
            "r_max": self.half_extent,
        }


@dataclass
class TriGridField:
    """Cartesian tri-grid baseline (D parallel planes per axis pair)."""

    grid: TriGridSet
    decoder: Decoder
    half_extent: float = geometry.DEFAULT_SCENE_RADIUS

    kind = "tri-grid"
    has_branches = False

    @classmethod
    def build(cls, rng: np.random.Generator, resolution: int = 256, channels: int = 32,
              hidden: int = 64, n_classes: int = 4, depth: int = 3,
              half_extent: float = geometry.DEFAULT_SCENE_RADIUS, std: float = 0.05,
              dtype: torch.dtype = torch.float32,
              density_bias: float = DEFAULT_DENSITY_BIAS) -> "TriGridField":
        return cls(
            grid=TriGridSet.build(rng, resolution, channels, depth, std, dtype),
            decoder=Decoder.build(rng, channels, hidden, n_classes, dtype, density_bias),
            half_extent=half_extent,
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.decoder.w1.dtype

    @property
    def scene_radius(self) -> float:
        return self.half_extent

    def query_feature(self, p: torch.Tensor, branch: Branch = Branch.FUSED) -> torch.Tensor:
        return sample_trigrid(self.grid, _as_points(p), self.half_extent)

    def named_parameters(self) -> dict[str, torch.Tensor]:
        out = {f"grid.{k}": v for k, v in self.grid.tensors().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.tensors().items()})
        return out

    def meta(self) -> dict[str, float]:
        return {
            "resolution": float(self.grid.g_xy.shape[1]),
            "channels": float(self.grid.channels),
            "hidden": float(self.decoder.hidden),
            "n_classes": float(self.decoder.n_classes),
            "r_max": self.half_extent,
            "depth": float(self.grid.depth),
        }


FIELD_KINDS = ("dual-sphere", "single-sphere", "tri-plane", "tri-grid")


def build_field(kind: str, rng: np.random.Generator, **kwargs):
    """Build any representation by kind name with a shared argument surface."""
    if kind == "dual-sphere":
        return DualSphereField.build(rng, **kwargs)
    if kind == "single-sphere":
        return SingleSphereField.build(rng, **kwargs)
    if kind == "tri-plane":
        kwargs.pop("phi_wrap", None)
        return TriPlaneField.build(rng, **kwargs)
    if kind == "tri-grid":
        kwargs.pop("phi_wrap", None)
        return TriGridField.build(rng, **kwargs)
    raise ValueError(f"unknown field kind: {kind!r}")


def build_baseline_field(kind: str, rng: np.random.Generator, **kwargs):
    """Cartesian baseline constructor mirroring the dual-sphere builder."""
    if kind not in ("tri-plane", "tri-grid"):
        raise ValueError("baseline kind must be 'tri-plane' or 'tri-grid'")
    return build_field(kind, rng, **kwargs)
