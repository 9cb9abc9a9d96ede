"""Losses, reverse-mode gradients, Adam, and the alternating-branch fit loop.

Gradients come from reverse-mode differentiation through the samplers,
fusion, decoder and compositing ops (all built from differentiable tensor
ops); ``finite_difference_check`` validates every registered op against
central differences, in f32 and in a stricter f64 mode.

Randomness contract: the fit derives one RNG stream per step from
``(seed, step)``, so resuming from a checkpoint at step k replays exactly
the steps a straight run would have taken.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .field import Branch, decode_batch
from .render import render_rays


class NumericalError(RuntimeError):
    """Raised when a fit or metric produces a non-finite value."""


class GradientError(RuntimeError):
    """Raised when a loss has no differentiable path to the parameters."""


ParamSet = dict[str, torch.Tensor]


@dataclass
class LossWeights:
    rgb: float = 1.0
    mask: float = 0.5
    parsing: float = 0.25


def loss_l2(rendered: dict[str, torch.Tensor], target: dict[str, torch.Tensor],
            weights: LossWeights = LossWeights()):
    """Weighted pixel loss: rgb MSE + alpha-vs-mask MSE + parsing cross-entropy.

    ``rendered`` is a ``render_rays`` result; ``target`` holds ``rgb (N,3)``,
    ``mask (N,)`` and integer ``parsing (N,)`` classes.  Returns
    ``(total, parts)`` with per-term scalars.
    """
    if rendered["rgb"].shape != target["rgb"].shape:
        raise ValueError("rgb resolution mismatch between rendered and target")
    if rendered["alpha"].shape != target["mask"].shape:
        raise ValueError("mask resolution mismatch between rendered and target")
    if rendered["parsing_logits"].shape[:-1] != target["parsing"].shape:
        raise ValueError("parsing resolution mismatch between rendered and target")
    l_rgb = ((rendered["rgb"] - target["rgb"]) ** 2).mean()
    l_mask = ((rendered["alpha"] - target["mask"]) ** 2).mean()
    logp = torch.log_softmax(rendered["parsing_logits"], dim=-1)
    l_par = -logp.gather(-1, target["parsing"].unsqueeze(-1)).mean()
    total = weights.rgb * l_rgb + weights.mask * l_mask + weights.parsing * l_par
    return total, {"rgb": l_rgb, "mask": l_mask, "parsing": l_par}


def backward(loss: torch.Tensor, params: ParamSet) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every named parameter.

    Parameters never touched by the loss get exact zero gradients.
    """
    if not loss.requires_grad:
        raise GradientError("loss has no differentiable path to any parameter")
    names = list(params.keys())
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(params[n]))
            for n, g in zip(names, grads)}


@dataclass
class AdamState:
    """Per-tensor first/second moments plus hyperparameters for bias-corrected Adam."""

    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: ParamSet, lr: float = 5e-3, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m={k: torch.zeros_like(p) for k, p in params.items()},
            v={k: torch.zeros_like(p) for k, p in params.items()},
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params: ParamSet, grads: dict[str, torch.Tensor], state: AdamState) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            state.m[name].mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            state.v[name].mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            m_hat = state.m[name] / bc1
            v_hat = state.v[name] / bc2
            p.add_(-state.lr * m_hat / (torch.sqrt(v_hat) + state.eps))


@dataclass
class Phase:
    """One schedule phase: a step budget and branch probabilities p_A/p_B/p_F."""

    steps: int
    p_a: float
    p_b: float
    p_fused: float
    weights: LossWeights | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("phase step budget must be positive")
        if abs(self.p_a + self.p_b + self.p_fused - 1.0) > 1e-6:
            raise ValueError("phase branch probabilities must sum to 1")


@dataclass
class FitSchedule:
    phases: list[Phase]

    @property
    def total_steps(self) -> int:
        return sum(p.steps for p in self.phases)

    def phase_at(self, step: int) -> tuple[int, Phase]:
        acc = 0
        for i, phase in enumerate(self.phases):
            acc += phase.steps
            if step < acc:
                return i, phase
        return len(self.phases) - 1, self.phases[-1]

    @classmethod
    def parse(cls, text: str) -> "FitSchedule":
        """Parse e.g. ``"33/33/34:2000,10/10/80:8000"`` (percent probabilities)."""
        phases = []
        for part in text.split(","):
            try:
                probs, steps = part.strip().split(":")
                pa, pb, pf = (float(x) / 100.0 for x in probs.split("/"))
                phases.append(Phase(steps=int(steps), p_a=pa, p_b=pb, p_fused=pf))
            except ValueError as exc:
                raise ValueError(f"bad schedule element {part!r}: {exc}") from exc
        if not phases:
            raise ValueError("schedule has no phases")
        return cls(phases)

    @classmethod
    def fused_only(cls, steps: int) -> "FitSchedule":
        return cls([Phase(steps=steps, p_a=0.0, p_b=0.0, p_fused=1.0)])

    @classmethod
    def paper_two_phase(cls, warmup: int, main: int) -> "FitSchedule":
        """The alternating schedule: 33/33/34 warmup, then 10/10/80."""
        return cls([
            Phase(steps=warmup, p_a=0.33, p_b=0.33, p_fused=0.34),
            Phase(steps=main, p_a=0.10, p_b=0.10, p_fused=0.80),
        ])


@dataclass
class TraceRow:
    step: int
    phase: int
    branch: str
    total: float
    rgb: float
    mask: float
    parsing: float


TRACE_FIELDS = ("step", "phase", "branch", "total", "rgb", "mask", "parsing")


def write_trace_csv(rows: list[TraceRow], path: Path | str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FIELDS)
        for r in rows:
            writer.writerow([r.step, r.phase, r.branch,
                             f"{r.total:.8g}", f"{r.rgb:.8g}", f"{r.mask:.8g}", f"{r.parsing:.8g}"])


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Independent per-step RNG stream; resume-safe by construction."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(step,)))


_BRANCHES = (Branch.A, Branch.B, Branch.FUSED)


@dataclass
class FitResult:
    field: object
    trace: list[TraceRow]
    adam: AdamState


def fit(field, manifest, schedule: FitSchedule, seed: int, *, root: Path | str | None = None,
        rays_per_step: int = 4096, n_samples: int = 48, lr: float = 5e-3,
        weights: LossWeights = LossWeights(), start_step: int = 0,
        adam: AdamState | None = None, out_dir: Path | str | None = None,
        checkpoint_every: int = 0) -> FitResult:
    """Fit a field to a dataset with the alternating-branch schedule.

    Per step: draw an image (weighted by its duplication count), a branch
    from the active phase's probabilities, and a ray minibatch; render at
    that branch and take one Adam step.  Aborts with NumericalError on a
    non-finite loss.
    """
    from . import checkpoint as ckpt
    from .dataset import load_view

    if not manifest.records:
        raise ValueError("dataset manifest is empty")
    root = Path(root) if root is not None else manifest.root
    params = field.named_parameters()
    for p in params.values():
        p.requires_grad_(True)
    if adam is None:
        adam = AdamState.init(params, lr=lr)

    dup = np.array([max(1, r.dup) for r in manifest.records], dtype=np.float64)
    record_probs = dup / dup.sum()
    dtype = field.dtype
    cache: dict[int, dict] = {}

    def record_data(idx: int) -> dict:
        if idx not in cache:
            view = load_view(manifest.records[idx], root)
            from .render import generate_rays

            origins, dirs = generate_rays(view["pose"], view["intrinsics"],
                                          view["width"], view["height"])
            cache[idx] = {
                "origins": torch.tensor(origins, dtype=dtype),
                "dirs": torch.tensor(dirs, dtype=dtype),
                "rgb": torch.tensor(view["rgb"].reshape(-1, 3), dtype=dtype),
                "mask": torch.tensor(view["mask"].reshape(-1), dtype=dtype),
                "parsing": torch.tensor(view["parsing"].reshape(-1).astype(np.int64)),
            }
        return cache[idx]

    trace: list[TraceRow] = []
    total_steps = schedule.total_steps
    for step in range(start_step, total_steps):
        rng = step_rng(seed, step)
        phase_idx, phase = schedule.phase_at(step)
        rec_idx = int(rng.choice(len(manifest.records), p=record_probs))
        if field.has_branches:
            branch = _BRANCHES[int(rng.choice(3, p=[phase.p_a, phase.p_b, phase.p_fused]))]
        else:
            branch = Branch.FUSED
        data = record_data(rec_idx)
        n_pix = data["origins"].shape[0]
        take = min(rays_per_step, n_pix)
        sel = torch.tensor(rng.choice(n_pix, size=take, replace=False))
        jitter = torch.tensor(rng.random((take, n_samples)), dtype=dtype)

        rendered = render_rays(field, branch, data["origins"][sel], data["dirs"][sel],
                               n_samples, jitter=jitter)
        target = {"rgb": data["rgb"][sel], "mask": data["mask"][sel],
                  "parsing": data["parsing"][sel]}
        w = phase.weights or weights
        total, parts = loss_l2(rendered, target, w)
        if not torch.isfinite(total):
            raise NumericalError(
                f"non-finite loss at step {step} (branch {branch.value}, record {rec_idx})")
        grads = backward(total, params)
        adam_step(params, grads, adam)
        trace.append(TraceRow(step, phase_idx, branch.value, float(total.detach()),
                              float(parts["rgb"].detach()), float(parts["mask"].detach()),
                              float(parts["parsing"].detach())))
        if out_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            ckpt.save_fit_state(Path(out_dir) / f"ckpt_{step + 1:06d}.sphf", field, adam)

    return FitResult(field=field, trace=trace, adam=adam)


# --- finite-difference gradient suite ---------------------------------------

def _weighted_sum(x: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    w = torch.tensor(rng.normal(size=x.shape), dtype=x.dtype)
    return (x * w).sum()


def _op_linear(rng, dtype):
    x = torch.tensor(rng.normal(size=(5, 4)), dtype=dtype)
    w = torch.tensor(rng.normal(size=(4, 3)), dtype=dtype, requires_grad=True)
    proj = torch.tensor(rng.normal(size=(5, 3)), dtype=dtype)
    return {"w": w}, lambda: ((x @ w) * proj).sum()


def _op_bilinear(rng, dtype):
    from .planes import FeaturePlane, WrapMode, sample_bilinear

    data = torch.tensor(rng.normal(size=(5, 7, 3)), dtype=dtype, requires_grad=True)
    plane = FeaturePlane(data, wrap_u=WrapMode.WRAP, wrap_v=WrapMode.CLAMP)
    u = torch.tensor(rng.uniform(-0.2, 1.2, size=9), dtype=dtype)
    v = torch.tensor(rng.uniform(0, 1, size=9), dtype=dtype)
    wsum = torch.tensor(rng.normal(size=(9, 3)), dtype=dtype)
    return {"plane": data}, lambda: (sample_bilinear(plane, u, v) * wsum).sum()


def _op_sphere_set(rng, dtype):
    from .planes import SpherePlaneSet, sample_sphere_set

    planes = SpherePlaneSet.build(rng, resolution=6, channels=3, dtype=dtype)
    params = {k: t.requires_grad_(True) for k, t in planes.tensors().items()}
    s = torch.tensor(np.stack([rng.uniform(0, 0.5, 8), rng.uniform(0, math.pi, 8),
                               rng.uniform(-math.pi, math.pi, 8)], -1), dtype=dtype)
    wsum = torch.tensor(rng.normal(size=(8, 3)), dtype=dtype)
    return params, lambda: (sample_sphere_set(planes, s, 0.5) * wsum).sum()


def _op_cartesian_set(rng, dtype):
    from .planes import CartesianPlaneSet, sample_cartesian_set

    planes = CartesianPlaneSet.build(rng, resolution=6, channels=3, dtype=dtype)
    params = {k: t.requires_grad_(True) for k, t in planes.tensors().items()}
    p = torch.tensor(rng.uniform(-0.5, 0.5, size=(8, 3)), dtype=dtype)
    wsum = torch.tensor(rng.normal(size=(8, 3)), dtype=dtype)
    return params, lambda: (sample_cartesian_set(planes, p, 0.5) * wsum).sum()


def _op_trigrid(rng, dtype):
    from .planes import TriGridSet, sample_trigrid

    grid = TriGridSet.build(rng, resolution=5, channels=3, depth=3, dtype=dtype)
    params = {k: t.requires_grad_(True) for k, t in grid.tensors().items()}
    p = torch.tensor(rng.uniform(-0.5, 0.5, size=(8, 3)), dtype=dtype)
    wsum = torch.tensor(rng.normal(size=(8, 3)), dtype=dtype)
    return params, lambda: (sample_trigrid(grid, p, 0.5) * wsum).sum()


def _op_decode(rng, dtype):
    from .field import Decoder

    dec = Decoder.build(rng, channels=4, hidden=8, dtype=dtype)
    params = {k: t.requires_grad_(True) for k, t in dec.tensors().items()}
    f = torch.tensor(rng.normal(size=(6, 4)), dtype=dtype)

    def loss():
        density, color, logits = decode_batch(dec, f)
        return density.sum() + color.sum() + 0.3 * (logits ** 2).sum()

    return params, loss


def _op_fused_query(rng, dtype):
    from .field import DualSphereField

    fld = DualSphereField.build(rng, resolution=6, channels=3, hidden=8, dtype=dtype)
    params = {k: v for k, v in fld.named_parameters().items() if k.startswith("set_")}
    for p in params.values():
        p.requires_grad_(True)
    p_pts = torch.tensor(rng.uniform(-0.4, 0.4, size=(7, 3)), dtype=dtype)
    wsum = torch.tensor(rng.normal(size=(7, 3)), dtype=dtype)
    return params, lambda: (fld.query_fused(p_pts) * wsum).sum()


def _op_render_rays(rng, dtype):
    from .field import DualSphereField

    fld = DualSphereField.build(rng, resolution=6, channels=3, hidden=8, dtype=dtype,
                                density_bias=0.5)
    params = fld.named_parameters()
    for p in params.values():
        p.requires_grad_(True)
    from .geometry import camera_from_view, default_intrinsics
    from .render import generate_rays

    origins, dirs = generate_rays(camera_from_view(1.1, 0.4), default_intrinsics(), 2, 2)
    o = torch.tensor(origins, dtype=dtype)
    d = torch.tensor(dirs, dtype=dtype)

    def loss():
        out = render_rays(fld, Branch.FUSED, o, d, 5)
        return out["rgb"].sum() + out["alpha"].sum() + 0.1 * out["parsing_logits"].sum()

    return params, loss


def _op_end_to_end(rng, dtype):
    from .field import DualSphereField
    from .geometry import camera_from_view, default_intrinsics
    from .render import generate_rays

    fld = DualSphereField.build(rng, resolution=8, channels=4, hidden=64, dtype=dtype,
                                density_bias=0.0)
    params = fld.named_parameters()
    for p in params.values():
        p.requires_grad_(True)
    origins, dirs = generate_rays(camera_from_view(1.3, 0.3), default_intrinsics(), 8, 8)
    o = torch.tensor(origins, dtype=dtype)
    d = torch.tensor(dirs, dtype=dtype)
    target = {
        "rgb": torch.tensor(rng.uniform(0, 1, size=(64, 3)), dtype=dtype),
        "mask": torch.tensor(rng.uniform(0, 1, size=64), dtype=dtype),
        "parsing": torch.tensor(rng.integers(0, 4, size=64)),
    }

    def loss():
        out = render_rays(fld, Branch.FUSED, o, d, 8)
        total, _ = loss_l2(out, target)
        return total

    return params, loss


GRADCHECK_OPS = {
    "linear": _op_linear,
    "bilinear": _op_bilinear,
    "sphere_set": _op_sphere_set,
    "cartesian_set": _op_cartesian_set,
    "trigrid": _op_trigrid,
    "decode": _op_decode,
    "fused_query": _op_fused_query,
    "render_rays": _op_render_rays,
    "end_to_end": _op_end_to_end,
}


@dataclass
class GradCheckReport:
    dtype: str
    tolerance: float
    max_errors: dict[str, float] = dc_field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_errors.values())


def finite_difference_check(ops: list[str] | None = None, *, dtype: torch.dtype = torch.float32,
                            tolerance: float | None = None, seed: int = 0,
                            max_components: int = 100) -> GradCheckReport:
    """Compare analytic gradients with central differences on small random configs.

    Errors are scaled by the gradient tensor's max magnitude (a component
    check against ``|a_i - fd_i| / max(|a|_inf, |fd|_inf)``); each tensor is
    probed on a seeded random subset of at most ``max_components`` entries.
    Default tolerances: 1e-3 in f32 mode, 1e-6 in f64 mode.
    """
    if ops is None:
        ops = list(GRADCHECK_OPS.keys())
    if tolerance is None:
        tolerance = 1e-3 if dtype == torch.float32 else 1e-6
    h_base = 1e-2 if dtype == torch.float32 else 1e-5
    report = GradCheckReport(dtype=str(dtype).replace("torch.", ""), tolerance=tolerance)

    for op in ops:
        if op not in GRADCHECK_OPS:
            raise ValueError(f"unknown gradcheck op {op!r}")
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(zlib.crc32(op.encode()),)))
        params, loss_fn = GRADCHECK_OPS[op](rng, dtype)
        analytic = backward(loss_fn(), params)
        scale = max(max(float(g.abs().max()) for g in analytic.values()), 1e-12)
        worst = 0.0
        with torch.no_grad():
            for name, p in params.items():
                flat = p.reshape(-1)
                n = flat.numel()
                idxs = (np.arange(n) if n <= max_components
                        else rng.choice(n, size=max_components, replace=False))
                a_flat = analytic[name].reshape(-1)
                for i in idxs:
                    orig = float(flat[i])
                    h = h_base * max(1.0, abs(orig))
                    flat[i] = orig + h
                    lp = float(loss_fn())
                    flat[i] = orig - h
                    lm = float(loss_fn())
                    flat[i] = orig
                    fd = (lp - lm) / (2.0 * h)
                    worst = max(worst, abs(float(a_flat[i]) - fd) / scale)
        report.max_errors[op] = worst
    return report
