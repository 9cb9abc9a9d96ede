"""Camera ray generation and emission-absorption volume rendering.

Quadrature: each ray's hit interval is split into ``n_samples`` equal bins;
the sample point sits at the bin centre (or jittered uniformly inside the
bin when stratified) while the per-sample step ``delta`` is the full bin
width.  The bin widths sum exactly to the interval length, so a homogeneous
medium composites to the analytic ``1 - exp(-sigma * L)`` for any sample
count.

Pixel convention: rays go through pixel centres ``u = (i + 0.5)/W``,
``v = (j + 0.5)/H`` with v growing downward; the camera-space direction is
``(u - cx)/fx, -(v - cy)/fy, -1)`` (the camera looks along its local -z).

Parsing maps are composited on logits (kept linear in the decoder output);
the leftover transmittance contributes a fixed background-class logit so
empty pixels decode to the background class, mirroring the white-background
rgb compositing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .field import Branch, decode_batch
from .geometry import CameraPose

BACKGROUND_CLASS_LOGIT = 10.0
WHITE = (1.0, 1.0, 1.0)


def generate_rays(pose: CameraPose, intrinsics: np.ndarray, width: int, height: int):
    """One ray per pixel centre; returns (origins (N,3), dirs (N,3)) in row-major pixel order."""
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be at least 1x1")
    fx, fy = intrinsics[0, 0], intrinsics[1, 1]
    cx, cy = intrinsics[0, 2], intrinsics[1, 2]
    j, i = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    u = (i.reshape(-1) + 0.5) / width
    v = (j.reshape(-1) + 0.5) / height
    d_cam = np.stack([(u - cx) / fx, -(v - cy) / fy, -np.ones_like(u)], -1)
    d_world = d_cam @ pose.rotation  # == (R^T @ d_cam^T)^T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.center, d_world.shape).copy()
    return origins, d_world


def ray_sphere_bounds(origins, dirs, radius: float):
    """Entry/exit parameters of rays against the scene sphere.

    Returns ``(t_near, t_far, hit)``; misses (or spheres entirely behind the
    origin) get ``t_near = t_far = 0`` and ``hit = False``.  Ray origins are
    assumed outside the sphere and directions unit length.
    """
    xp = torch if isinstance(origins, torch.Tensor) else np
    b = (origins * dirs).sum(-1)
    c = (origins * origins).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc >= 0
    safe = xp.where(hit, disc, xp.zeros_like(disc))
    root = xp.sqrt(safe)
    t0 = -b - root
    t1 = -b + root
    hit = hit & (t1 > 0)
    zeros = xp.zeros_like(t0)
    t0 = xp.where(hit, xp.maximum(t0, zeros), zeros)
    t1 = xp.where(hit, t1, zeros)
    return t0, t1, hit


def render_rays(field, branch: Branch, origins: torch.Tensor, dirs: torch.Tensor,
                n_samples: int, jitter: torch.Tensor | None = None,
                background=WHITE) -> dict[str, torch.Tensor]:
    """Volume-render a batch of rays through ``field`` at ``branch``.

    ``jitter`` is an optional ``(N, n_samples)`` tensor of in-bin offsets in
    ``[0, 1)``; ``None`` samples bin centres (offset 0.5).  Returns a dict of
    torch tensors: ``rgb (N,3)``, ``alpha (N,)``, ``parsing_logits (N,K)``
    and ``depth (N,)``.  Missed rays return the background with alpha 0.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    dtype = origins.dtype
    n = origins.shape[0]
    t0, t1, _hit = ray_sphere_bounds(origins, dirs, field.scene_radius)
    width = (t1 - t0) / n_samples  # (N,)
    if jitter is None:
        offsets = torch.full((1, n_samples), 0.5, dtype=dtype)
    else:
        offsets = jitter.to(dtype)
    idx = torch.arange(n_samples, dtype=dtype)
    t = t0.unsqueeze(-1) + width.unsqueeze(-1) * (idx.unsqueeze(0) + offsets)  # (N,S)
    pts = origins.unsqueeze(1) + dirs.unsqueeze(1) * t.unsqueeze(-1)  # (N,S,3)

    feats = field.query_feature(pts.reshape(-1, 3), branch)
    sigma, color, logits = decode_batch(field.decoder, feats)
    k = logits.shape[-1]
    sigma = sigma.reshape(n, n_samples)
    color = color.reshape(n, n_samples, 3)
    logits = logits.reshape(n, n_samples, k)

    alpha_i = 1.0 - torch.exp(-sigma * width.unsqueeze(-1))
    trans = torch.cumprod(
        torch.cat([torch.ones(n, 1, dtype=dtype), 1.0 - alpha_i + 1e-10], dim=1), dim=1
    )[:, :-1]
    weights = trans * alpha_i  # (N,S)
    acc = weights.sum(-1)

    bg = torch.as_tensor(background, dtype=dtype)
    rgb = (weights.unsqueeze(-1) * color).sum(1) + (1.0 - acc).unsqueeze(-1) * bg

    bg_logits = torch.zeros(k, dtype=dtype)
    bg_logits[0] = BACKGROUND_CLASS_LOGIT
    parsing = (weights.unsqueeze(-1) * logits).sum(1) + (1.0 - acc).unsqueeze(-1) * bg_logits

    depth = (weights * t).sum(-1) + (1.0 - acc) * t1
    return {"rgb": rgb, "alpha": acc, "parsing_logits": parsing, "depth": depth}


@dataclass
class RenderOutput:
    """Full-image render: rgb/alpha/parsing probability/depth maps (numpy)."""

    rgb: np.ndarray      # (H, W, 3) in [0, 1]
    alpha: np.ndarray    # (H, W) in [0, 1]
    parsing: np.ndarray  # (H, W, K) softmax probabilities
    depth: np.ndarray    # (H, W) expected ray parameter

    @property
    def parsing_classes(self) -> np.ndarray:
        return np.argmax(self.parsing, axis=-1).astype(np.uint8)


def render_image(field, branch: Branch, pose: CameraPose, intrinsics: np.ndarray,
                 width: int, height: int, n_samples: int = 48, seed: int | None = None,
                 stratified: bool = False, background=WHITE,
                 chunk: int = 8192) -> RenderOutput:
    """Render a full image deterministically (fixed seed => bit-identical output)."""
    origins_np, dirs_np = generate_rays(pose, intrinsics, width, height)
    dtype = field.dtype
    origins = torch.tensor(origins_np, dtype=dtype)
    dirs = torch.tensor(dirs_np, dtype=dtype)
    n = origins.shape[0]
    if stratified:
        rng = np.random.default_rng(seed if seed is not None else 0)
        jitter_all = torch.tensor(rng.random((n, n_samples)), dtype=dtype)
    else:
        jitter_all = None

    outs: dict[str, list[torch.Tensor]] = {"rgb": [], "alpha": [], "parsing_logits": [], "depth": []}
    with torch.no_grad():
        for start in range(0, n, chunk):
            sl = slice(start, min(start + chunk, n))
            jit = jitter_all[sl] if jitter_all is not None else None
            part = render_rays(field, branch, origins[sl], dirs[sl], n_samples,
                               jitter=jit, background=background)
            for key, val in part.items():
                outs[key].append(val)

    rgb = torch.cat(outs["rgb"]).reshape(height, width, 3)
    alpha = torch.cat(outs["alpha"]).reshape(height, width)
    logits = torch.cat(outs["parsing_logits"])
    parsing = torch.softmax(logits, dim=-1).reshape(height, width, -1)
    depth = torch.cat(outs["depth"]).reshape(height, width)
    return RenderOutput(
        rgb=np.clip(rgb.numpy().astype(np.float64), 0.0, 1.0),
        alpha=np.clip(alpha.numpy().astype(np.float64), 0.0, 1.0),
        parsing=parsing.numpy().astype(np.float64),
        depth=depth.numpy().astype(np.float64),
    )
