"""Metrics that operationalize the representation's artifact claims.

* ``mirror_leakage``: masked Pearson correlation between a back-view render
  and the horizontally mirrored front-view render.  High correlation after a
  front-only fit is the mirroring-face artifact.
* ``seam_discontinuity``: max feature jump across a frame's seam, normalized
  by the median interior jump at the same angular separation.  Single-sphere
  branches show a large ratio on random planes; the fused field does not,
  because the weight map zeroes each sphere out at its own seam.
* ``weight_cover_min``: minimum over directions of w_A + w_B, the quantity
  that keeps the fusion denominator away from zero.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from . import geometry
from .dataset import GRAY_WEIGHTS, SyntheticHeadScene, oracle_render
from .field import Branch
from .geometry import FRAME_A, FRAME_B, FRAME_WORLD
from .render import render_image

PSNR_INF = float("inf")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB over [0, 1] images; identical -> inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("psnr inputs must share a shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def _gray(img: np.ndarray) -> np.ndarray:
    return img @ np.asarray(GRAY_WEIGHTS)


def _erode(mask: np.ndarray, steps: int = 2) -> np.ndarray:
    out = mask.copy()
    for _ in range(steps):
        inner = out.copy()
        inner[1:, :] &= out[:-1, :]
        inner[:-1, :] &= out[1:, :]
        inner[:, 1:] &= out[:, :-1]
        inner[:, :-1] &= out[:, 1:]
        out = inner
    return out


def mirror_leakage(field, scene: SyntheticHeadScene, front_pose, back_pose,
                   intrinsics: np.ndarray, res: int = 64, *, n_samples: int = 48,
                   branch: Branch = Branch.FUSED) -> float:
    """Correlation between the back view and the mirrored front view on the foreground.

    The foreground mask comes from the analytic scene (back-view mask
    intersected with the mirrored front-view mask, eroded to the strict
    interior so silhouette shading common to any two views of the same shape
    does not count as leakage).  Raises if the mask is empty; returns 0 when
    either masked signal is constant.
    """
    front = render_image(field, branch, front_pose, intrinsics, res, res, n_samples=n_samples)
    back = render_image(field, branch, back_pose, intrinsics, res, res, n_samples=n_samples)
    o_front = oracle_render(scene, front_pose, intrinsics, res, res)
    o_back = oracle_render(scene, back_pose, intrinsics, res, res)
    mask = _erode((o_back["mask"] > 0.5) & (np.flip(o_front["mask"], axis=1) > 0.5),
                  steps=max(1, res // 32))
    if not mask.any():
        raise ValueError("empty foreground mask for leakage measurement")
    mirrored = np.flip(front.rgb, axis=1)[mask]
    target = back.rgb[mask]
    # per-channel centering before pooling, so a shared global tint (e.g. the
    # decoder's base skin tone) does not count as spatial leakage
    mirrored = mirrored - mirrored.mean(axis=0)
    target = target - target.mean(axis=0)
    denom = math.sqrt(float((mirrored**2).sum()) * float((target**2).sum()))
    if denom < 1e-12:
        return 0.0
    return float((mirrored * target).sum() / denom)


def _frames_of(field):
    kind = getattr(field, "kind", None)
    if kind == "dual-sphere":
        return [FRAME_A, FRAME_B]
    if kind == "single-sphere":
        return [FRAME_WORLD]
    raise ValueError("seam discontinuity is defined for spherical representations only")


def _frame_tangents(centers_world: np.ndarray, frame):
    """World-space theta-hat / phi-hat unit tangents of `frame` at each point."""
    loc = centers_world @ frame.rotation.T
    radial = loc / np.linalg.norm(loc, axis=-1, keepdims=True)
    pole = np.array([0.0, 0.0, 1.0])
    phihat = np.cross(np.broadcast_to(pole, radial.shape), radial)
    phihat /= np.maximum(np.linalg.norm(phihat, axis=-1, keepdims=True), 1e-12)
    thetahat = np.cross(phihat, radial)
    return thetahat @ frame.rotation, phihat @ frame.rotation


def seam_discontinuity(field, branch: Branch, probe_count: int = 128,
                       delta: float = 1e-3, seed: int = 0, n_random_dirs: int = 10) -> float:
    """Max seam jump over probe pairs / median interior jump at the same delta.

    Probes sit on each frame's seam half-circle (phi = +-pi) at radius
    0.6*r_max, straddling the seam along the local phi direction with the
    constant world separation that `delta` subtends there.  The interior
    scale is the per-location worst-direction jump of the same separation
    (both frames' coordinate tangents plus random tangent directions), taken
    away from the seams, so the numerator and denominator are statistically
    homogeneous and the ratio isolates the seam.  Constant fields return 0.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(11,)))
    frames = _frames_of(field)
    r_probe = 0.6 * field.scene_radius
    sep = 2.0 * r_probe * math.sin(delta / 2.0)

    seam_jumps, interior_jumps = [], []
    with torch.no_grad():
        for frame in frames:
            theta = rng.uniform(0.15 * math.pi, 0.85 * math.pi, probe_count)
            rr = np.full(probe_count, r_probe)

            on_seam = geometry.sph_to_cart(
                np.stack([rr, theta, np.full(probe_count, math.pi)], -1)) @ frame.rotation
            _, phihat = _frame_tangents(on_seam, frame)
            before = field.query_feature(
                torch.tensor(on_seam - 0.5 * sep * phihat, dtype=field.dtype), branch)
            after = field.query_feature(
                torch.tensor(on_seam + 0.5 * sep * phihat, dtype=field.dtype), branch)
            seam_jumps.append(torch.linalg.norm(before - after, dim=-1).numpy())

            phi0 = rng.uniform(-math.pi + 0.1, math.pi - 0.1, probe_count)
            centers = geometry.sph_to_cart(np.stack([rr, theta, phi0], -1)) @ frame.rotation
            radial = centers / np.linalg.norm(centers, axis=-1, keepdims=True)
            directions = []
            for fr in frames:
                th_hat, ph_hat = _frame_tangents(centers, fr)
                directions += [th_hat, ph_hat]
            for _ in range(n_random_dirs):
                t = rng.normal(size=(probe_count, 3))
                t -= (t * radial).sum(-1, keepdims=True) * radial
                t /= np.linalg.norm(t, axis=-1, keepdims=True)
                directions.append(t)
            worst = np.zeros(probe_count)
            for t in directions:
                q0 = field.query_feature(
                    torch.tensor(centers - 0.5 * sep * t, dtype=field.dtype), branch)
                q1 = field.query_feature(
                    torch.tensor(centers + 0.5 * sep * t, dtype=field.dtype), branch)
                worst = np.maximum(worst, torch.linalg.norm(q1 - q0, dim=-1).numpy())
            interior_jumps.append(worst)

    seam_max = float(np.max(np.concatenate(seam_jumps)))
    interior_med = float(np.median(np.concatenate(interior_jumps)))
    if seam_max < 1e-12:
        return 0.0
    if interior_med < 1e-12:
        return math.inf
    return seam_max / interior_med


def weight_cover_min(grid_res: int = 512) -> float:
    """Min over a (theta, phi) direction grid of w_A + w_B in each frame's own coords."""
    if grid_res < 64:
        raise ValueError("coverage grid must be at least 64 per axis")
    theta = np.linspace(0.0, math.pi, grid_res)
    phi = np.linspace(-math.pi, math.pi, grid_res)
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    dirs = geometry.sph_to_cart(np.stack([np.ones_like(tt), tt, pp], -1).reshape(-1, 3))
    total = np.zeros(dirs.shape[0])
    for frame in (FRAME_A, FRAME_B):
        s = geometry.frame_coords(frame, dirs)
        total += geometry.fusion_weight(s[..., 1], s[..., 2])
    return float(total.min())
