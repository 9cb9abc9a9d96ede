"""Command-line entry point: datasets, fitting, rendering, probes, and the
view-consistency experiment.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
Every command validates its flags before touching the filesystem and writes a
``provenance.json`` (config + seed + version + config digest) next to its
outputs, sufficient to reproduce them bit-exactly in deterministic mode.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, checkpoint, plots
from .config import RunConfig
from .dataset import (
    DatasetManifest,
    SyntheticHeadScene,
    ViewSpec,
    balance_views,
    make_dataset,
    save_parsing_png,
    to_uint8,
    yaw_pitch_to_theta_phi,
)
from .eval import mirror_leakage, seam_discontinuity, weight_cover_min
from .field import Branch, build_field
from .geometry import camera_from_view, default_intrinsics
from .optim import FitSchedule, NumericalError, finite_difference_check, fit, write_trace_csv
from .render import render_image
from .vico import CorruptionSpec, train_discriminator

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

_BRANCH_FLAGS = {"A": Branch.A, "B": Branch.B, "fused": Branch.FUSED}


def _field_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))


def _apply_run_mode(cfg: RunConfig) -> None:
    if cfg.threads > 0:
        torch.set_num_threads(cfg.threads)
    elif cfg.deterministic:
        # pin whatever the current pool is so reductions keep a fixed shape
        torch.set_num_threads(torch.get_num_threads())


def _write_provenance(out_dir: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    payload = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
    }
    if extra:
        payload.update(extra)
    with open(out_dir / "provenance.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {k: getattr(args, k) for k in cfg.to_dict() if hasattr(args, k)}
    cfg.apply_overrides(overrides)
    cfg.validate()
    return cfg


def _build_field_from_cfg(cfg: RunConfig):
    kwargs = dict(resolution=cfg.resolution, channels=cfg.channels, hidden=cfg.hidden,
                  n_classes=cfg.n_classes, std=cfg.plane_std, density_bias=cfg.density_bias)
    if cfg.repr in ("dual-sphere", "single-sphere"):
        kwargs.update(r_max=cfg.r_max, phi_wrap=cfg.phi_wrap)
        if cfg.repr == "dual-sphere":
            kwargs.update(epsilon=cfg.epsilon)
    else:
        kwargs.update(half_extent=cfg.r_max)
        if cfg.repr == "tri-grid":
            kwargs.update(depth=cfg.depth)
    return build_field(cfg.repr, _field_rng(cfg.seed), **kwargs)


# --- subcommands -------------------------------------------------------------

def cmd_make_dataset(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    if args.count < 1:
        raise ValueError("--count must be at least 1")
    spec = ViewSpec(kind=args.views, front_frac=args.front_frac)
    out_dir = Path(args.out)
    parent = out_dir.parent
    if not parent.exists():
        raise OSError(f"parent directory does not exist: {parent}")
    out_dir.mkdir(parents=True, exist_ok=True)

    scene = SyntheticHeadScene(seed=cfg.scene_seed)
    manifest = make_dataset(scene, spec, args.count, out_dir, cfg.seed,
                            width=cfg.width, height=cfg.height)
    if args.balance:
        manifest = balance_views(manifest, args.balance_thresh)
        manifest.save(out_dir / "manifest.jsonl")
    plots.save_view_histogram(manifest, out_dir / "view_distribution.png")
    _write_provenance(out_dir, "make-dataset",
                      cfg, {"count": args.count, "views": args.views, "balance": args.balance})
    print(f"wrote {len(manifest.records)} views to {out_dir}")
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    _apply_run_mode(cfg)
    schedule = FitSchedule.parse(cfg.phases)
    manifest_path = Path(args.dataset) / "manifest.jsonl"
    if not manifest_path.exists():
        raise OSError(f"no manifest at {manifest_path}")
    manifest = DatasetManifest.load(manifest_path)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.resume:
        field, adam = checkpoint.load_fit_state(args.resume, lr=cfg.lr)
        start_step = adam.step
    else:
        field, adam, start_step = _build_field_from_cfg(cfg), None, 0

    from .optim import LossWeights

    result = fit(field, manifest, schedule, cfg.seed, rays_per_step=cfg.rays,
                 n_samples=cfg.n_samples, lr=cfg.lr,
                 weights=LossWeights(cfg.w_rgb, cfg.w_mask, cfg.w_parsing),
                 start_step=start_step, adam=adam, out_dir=out_dir,
                 checkpoint_every=cfg.checkpoint_every)
    checkpoint.save_fit_state(out_dir / "checkpoint.sphf", result.field, result.adam)
    write_trace_csv(result.trace, out_dir / "loss_trace.csv")
    if result.trace:
        plots.save_loss_curve(result.trace, out_dir / "loss_curve.png")
    _write_provenance(out_dir, "fit", cfg, {"dataset": str(args.dataset),
                                            "resumed_from": args.resume or "",
                                            "steps": schedule.total_steps})
    final = result.trace[-1].total if result.trace else float("nan")
    print(f"fit {cfg.repr} for {schedule.total_steps} steps; final loss {final:.5f}")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    _apply_run_mode(cfg)
    if args.views < 1:
        raise ValueError("--views must be at least 1")
    branch = _BRANCH_FLAGS[args.branch]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    field = checkpoint.load_field(args.checkpoint) if args.checkpoint else _build_field_from_cfg(cfg)
    intrinsics = default_intrinsics()
    yaws = np.linspace(-math.pi, math.pi, args.views, endpoint=False)
    sheet = []
    for i, yaw in enumerate(yaws):
        theta, phi = yaw_pitch_to_theta_phi(float(yaw), cfg.pitch)
        pose = camera_from_view(theta, phi)
        out = render_image(field, branch, pose, intrinsics, cfg.width, cfg.height,
                           n_samples=cfg.n_samples, seed=cfg.seed, stratified=False)
        name = f"view{i:03d}_yaw{math.degrees(yaw):+08.2f}_{args.branch}"
        to_png = to_uint8(out.rgb)
        from PIL import Image

        Image.fromarray(to_png).save(out_dir / f"{name}.png")
        if args.maps:
            Image.fromarray(to_uint8(out.alpha)).save(out_dir / f"{name}_alpha.png")
            save_parsing_png(out_dir / f"{name}_parsing.png", out.parsing_classes)
        sheet.append(out.rgb)
    plots.save_contact_sheet(sheet, out_dir / "contact_sheet.png")
    _write_provenance(out_dir, "render", cfg,
                      {"views": args.views, "branch": args.branch,
                       "checkpoint": args.checkpoint or ""})
    print(f"rendered {args.views} views to {out_dir}")
    return EXIT_OK


def cmd_probe(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    _apply_run_mode(cfg)
    metrics = ["coverage", "seam", "gradcheck"] if args.metric == "all" else [args.metric]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report: dict = {"config_digest": cfg.digest(), "seed": cfg.seed, "version": __version__}
    failed = False

    if "coverage" in metrics:
        report["weight_cover_min"] = weight_cover_min(args.grid)
        plots.save_coverage_heatmap(out_dir / "coverage_heatmap.png")
    if "seam" in metrics:
        field = checkpoint.load_field(args.checkpoint) if args.checkpoint else _build_field_from_cfg(cfg)
        values = {}
        branches = [Branch.A, Branch.B, Branch.FUSED] if field.has_branches else [Branch.FUSED]
        for branch in branches:
            values[branch.value] = seam_discontinuity(field, branch, probe_count=args.probes,
                                                      delta=args.delta, seed=cfg.seed)
        report["seam_discontinuity"] = values
        plots.save_seam_bars(values, out_dir / "seam_bars.png")
    if "leakage" in metrics:
        if not args.checkpoint:
            raise ValueError("--metric leakage requires --checkpoint")
        field = checkpoint.load_field(args.checkpoint)
        scene = SyntheticHeadScene(seed=cfg.scene_seed)
        theta_f, phi_f = yaw_pitch_to_theta_phi(0.0, cfg.pitch)
        theta_b, phi_b = yaw_pitch_to_theta_phi(math.pi, cfg.pitch)
        report["mirror_leakage"] = mirror_leakage(
            field, scene, camera_from_view(theta_f, phi_f), camera_from_view(theta_b, phi_b),
            default_intrinsics(), res=args.res, n_samples=cfg.n_samples)
    if "gradcheck" in metrics:
        dtypes = {"f32": torch.float32, "f64": torch.float64}
        chosen = ["f32", "f64"] if args.dtype == "both" else [args.dtype]
        gc = {}
        for key in chosen:
            rep = finite_difference_check(dtype=dtypes[key], seed=cfg.seed,
                                          tolerance=args.tolerance)
            gc[key] = {"tolerance": rep.tolerance, "max_errors": rep.max_errors,
                       "passed": rep.passed}
            failed = failed or not rep.passed
        report["gradcheck"] = gc

    with open(out_dir / "probe_report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    with open(out_dir / "probe_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key, value in report.items():
            if isinstance(value, (int, float)):
                writer.writerow([key, value])
    print(json.dumps(report, indent=2, sort_keys=True))
    if failed:
        raise NumericalError("gradient check exceeded tolerance")
    return EXIT_OK


def cmd_vico(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    _apply_run_mode(cfg)
    manifest_path = Path(args.dataset) / "manifest.jsonl"
    if not manifest_path.exists():
        raise OSError(f"no manifest at {manifest_path}")
    if args.seeds < 1:
        raise ValueError("--seeds must be at least 1")
    manifest = DatasetManifest.load(manifest_path)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    corruption = CorruptionSpec(noise_std=args.noise, blur_passes=args.blur_passes)
    rows = []
    for seed in range(args.seeds):
        for vico_mode in (False, True):
            run = train_discriminator(manifest, vico_mode, corruption, args.steps, seed,
                                      batch=args.batch, lr=args.lr)
            rows.append({"seed": seed, "vico": vico_mode,
                         "real_fake_acc": run.real_fake_accuracy,
                         "mismatch_auc": run.mismatch_auc})
    with open(out_dir / "vico_results.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "mode", "real_fake_acc", "mismatch_auc"])
        for r in rows:
            writer.writerow([r["seed"], "with_vico" if r["vico"] else "baseline",
                             f"{r['real_fake_acc']:.6f}", f"{r['mismatch_auc']:.6f}"])
    deltas = []
    for seed in range(args.seeds):
        a = next(r["mismatch_auc"] for r in rows if r["seed"] == seed and r["vico"])
        b = next(r["mismatch_auc"] for r in rows if r["seed"] == seed and not r["vico"])
        deltas.append(a - b)
    summary = {
        "seeds": args.seeds,
        "auc_delta_per_seed": deltas,
        "auc_delta_mean": float(np.mean(deltas)),
        "auc_delta_min": float(np.min(deltas)),
        "min_real_fake_acc": float(min(r["real_fake_acc"] for r in rows)),
        "config_digest": cfg.digest(),
    }
    with open(out_dir / "vico_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    plots.save_auc_plot(rows, out_dir / "vico_auc.png")
    _write_provenance(out_dir, "vico", cfg, {"dataset": str(args.dataset), "rows": len(rows)})
    print(json.dumps(summary, indent=2))
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spherefield",
                                     description="dual-sphere tri-plane fields at desk scale")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, fit_flags=False, render_flags=False):
        p.add_argument("--config", help="INI config file; flags override it")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--scene-seed", dest="scene_seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--deterministic", action="store_true", default=None)
        if fit_flags:
            p.add_argument("--repr", choices=["dual-sphere", "single-sphere", "tri-plane", "tri-grid"],
                           default=None)
            p.add_argument("--resolution", type=int, default=None)
            p.add_argument("--channels", type=int, default=None)
        if render_flags:
            p.add_argument("--width", type=int, default=None)
            p.add_argument("--height", type=int, default=None)
            p.add_argument("--samples", dest="n_samples", type=int, default=None)

    p = sub.add_parser("make-dataset", help="render an oracle dataset + manifest")
    common(p, render_flags=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--views", choices=["uniform", "front", "imbalanced"], default="uniform")
    p.add_argument("--front-frac", type=float, default=0.85)
    p.add_argument("--balance", action="store_true")
    p.add_argument("--balance-thresh", type=int, default=2000)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("fit", help="fit a representation to a dataset")
    common(p, fit_flags=True, render_flags=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--phases", default=None,
                   help='e.g. "33/33/34:2000,10/10/80:8000" (percent probs : steps)')
    p.add_argument("--rays", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="turntable renders from a checkpoint")
    common(p, fit_flags=True, render_flags=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--branch", choices=list(_BRANCH_FLAGS), default="fused")
    p.add_argument("--pitch", type=float, default=None)
    p.add_argument("--maps", action="store_true", help="also write alpha/parsing maps")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("probe", help="artifact metrics and the gradient check")
    common(p, fit_flags=True, render_flags=True)
    p.add_argument("--metric", choices=["coverage", "seam", "leakage", "gradcheck", "all"],
                   default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--grid", type=int, default=512)
    p.add_argument("--probes", type=int, default=256)
    p.add_argument("--delta", type=float, default=1e-3)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--dtype", choices=["f32", "f64", "both"], default="both")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("vico", help="paired with/without view-consistency runs")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--noise", type=float, default=0.30)
    p.add_argument("--blur-passes", dest="blur_passes", type=int, default=2)
    p.set_defaults(func=cmd_vico)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"invalid arguments: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
