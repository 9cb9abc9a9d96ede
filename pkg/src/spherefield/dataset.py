"""Procedural head-proxy scene, analytic oracle renders, and dataset plumbing.

The scene is a textured ellipsoid standing in for a head: an asymmetric
"face" pattern (two differently sized and colored eye marks, an off-centre
mouth, a single cheek mark) on the +z hemisphere and a striped "hair"
pattern over the back and crown.  The left-right asymmetry is deliberate so
that mirroring leakage is detectable by image correlation; parsing classes
are 0 background, 1 skin, 2 face-feature, 3 hair.

Oracle renders are exact ray/ellipsoid intersections with hard masks and
exact parsing labels: no neural field is involved, so they serve as the
independent ground truth for fitting and for the artifact experiments.

Manifest format (``manifest.jsonl``): one JSON object per line with fields
``{path, label: [25], theta, phi, bin, blur, dup}``.  ``label`` is the
flattened 4x4 world-to-camera extrinsic (row-major) followed by the
flattened 3x3 intrinsic.  Azimuth bins discretise the horizontal orbit angle
(yaw, 0 at the front) into 36 bins of 10 degrees.  Mask and parsing images
live next to each image: ``img_*.png`` -> ``mask_*.png`` / ``par_*.png``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry
from .geometry import CameraPose, camera_from_view, default_intrinsics
from .render import generate_rays

N_AZIMUTH_BINS = 36
DEFAULT_N_THRESH = 2000
PARSING_PALETTE = [255, 255, 255, 224, 172, 138, 40, 40, 160, 60, 40, 30]  # bg/skin/feature/hair


@dataclass
class SyntheticHeadScene:
    """Deterministic asymmetric ellipsoid scene (all texture derived from `seed`)."""

    seed: int = 0
    radii: tuple[float, float, float] = (0.20, 0.26, 0.23)
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed, spawn_key=(17,)))
        jit = lambda a, b: float(rng.uniform(a, b))
        self.skin_color = np.array([0.86, 0.67, 0.55]) + rng.uniform(-0.04, 0.04, 3)
        self.hair_color = np.array([0.16, 0.10, 0.07]) + rng.uniform(-0.03, 0.03, 3)
        self.hair_stripe_color = np.array([0.42, 0.28, 0.16]) + rng.uniform(-0.05, 0.05, 3)
        self.hair_freq = int(rng.integers(5, 9))
        self.hair_phase = jit(0.0, 2.0 * math.pi)
        # hairline: hair where z < h0 + h1 * y (pushed forward over the crown)
        self.hair_h0 = jit(-0.06, 0.02)
        self.hair_h1 = jit(0.30, 0.42)
        # face marks as angular discs around unit directions (yaw, pitch, radius, color)
        self.eye_left = (jit(0.30, 0.40), jit(0.10, 0.18), jit(0.13, 0.16),
                         np.array([0.10, 0.12, 0.45]))
        self.eye_right = (-jit(0.36, 0.46), jit(0.14, 0.22), jit(0.09, 0.12),
                          np.array([0.08, 0.35, 0.12]))
        self.mouth = (jit(0.02, 0.10), -jit(0.30, 0.40), jit(0.30, 0.38), jit(0.10, 0.14),
                      np.array([0.55, 0.13, 0.13]))
        self.cheek = (-jit(0.55, 0.65), -jit(0.00, 0.10), jit(0.10, 0.13),
                      np.array([0.92, 0.78, 0.15]))

    def surface(self, dirs: np.ndarray):
        """Surface color and parsing class for unit directions ``(N, 3)``."""
        d = np.asarray(dirs, dtype=np.float64)
        x, y, z = d[..., 0], d[..., 1], d[..., 2]
        n = d.shape[0]
        rgb = np.empty((n, 3))
        cls = np.empty(n, dtype=np.uint8)

        # skin base with a vertical shading gradient
        rgb[:] = self.skin_color + 0.10 * y[:, None] * np.array([1.0, 0.9, 0.8])
        cls[:] = 1

        def mark(yaw, pitch, radius, color, out_cls=2):
            center = geometry.view_dir_from_yaw_pitch(np.float64(yaw), np.float64(pitch))
            hit = (d @ center) > math.cos(radius)
            rgb[hit] = color
            cls[hit] = out_cls

        mark(*self.eye_left)
        mark(*self.eye_right)
        yaw_m, pitch_m, a_m, b_m, col_m = self.mouth
        yaw = np.arctan2(x, z)
        pitch = np.arcsin(np.clip(y, -1.0, 1.0))
        mouth_hit = (((yaw - yaw_m) / a_m) ** 2 + ((pitch - pitch_m) / b_m) ** 2) < 1.0
        mouth_hit &= z > 0
        rgb[mouth_hit] = col_m
        cls[mouth_hit] = 2
        mark(*self.cheek)

        hair = z < (self.hair_h0 + self.hair_h1 * y)
        phi_back = np.arctan2(x, -z)
        stripes = 0.5 * (1.0 + np.sin(self.hair_freq * phi_back + self.hair_phase + 2.0 * y))
        hair_rgb = self.hair_color[None, :] * (1 - stripes[:, None]) \
            + self.hair_stripe_color[None, :] * stripes[:, None]
        rgb[hair] = hair_rgb[hair]
        cls[hair] = 3
        return np.clip(rgb, 0.0, 1.0), cls


def oracle_render(scene: SyntheticHeadScene, pose: CameraPose, intrinsics: np.ndarray,
                  width: int, height: int) -> dict[str, np.ndarray]:
    """Analytic ray-ellipsoid render: exact rgb, hard mask, exact parsing classes."""
    radii = np.asarray(scene.radii, dtype=np.float64)
    if np.linalg.norm(pose.center / radii) <= 1.0:
        raise ValueError("camera must be outside the ellipsoid")
    origins, dirs = generate_rays(pose, intrinsics, width, height)
    inv2 = 1.0 / radii**2
    a = (dirs * dirs * inv2).sum(-1)
    b = 2.0 * (origins * dirs * inv2).sum(-1)
    c = (origins * origins * inv2).sum(-1) - 1.0
    disc = b * b - 4.0 * a * c
    hit = disc >= 0
    t = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0.0))) / (2.0 * a), 0.0)
    hit &= t > 0

    rgb = np.tile(np.asarray(scene.background), (origins.shape[0], 1))
    cls = np.zeros(origins.shape[0], dtype=np.uint8)
    if hit.any():
        p = origins[hit] + t[hit, None] * dirs[hit]
        u = p / radii
        u /= np.linalg.norm(u, axis=-1, keepdims=True)
        s_rgb, s_cls = scene.surface(u)
        rgb[hit] = s_rgb
        cls[hit] = s_cls
    return {
        "rgb": rgb.reshape(height, width, 3),
        "mask": hit.reshape(height, width).astype(np.float64),
        "parsing": cls.reshape(height, width),
    }


# --- view sampling -----------------------------------------------------------

@dataclass
class ViewSpec:
    """View sampler: uniform 360, front-only cone, or an imbalanced mixture."""

    kind: str = "uniform"  # uniform | front | imbalanced
    front_yaw: float = math.pi / 4.0
    front_frac: float = 0.85
    pitch_range: tuple[float, float] = (-0.30, 0.40)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Return ``(count, 2)`` of (yaw, pitch)."""
        pitch = rng.uniform(self.pitch_range[0], self.pitch_range[1], count)
        if self.kind == "uniform":
            yaw = rng.uniform(-math.pi, math.pi, count)
        elif self.kind == "front":
            yaw = rng.uniform(-self.front_yaw, self.front_yaw, count)
        elif self.kind == "imbalanced":
            front = rng.random(count) < self.front_frac
            yaw = np.where(front, rng.uniform(-self.front_yaw, self.front_yaw, count),
                           rng.uniform(-math.pi, math.pi, count))
        else:
            raise ValueError(f"unknown view spec kind {self.kind!r}")
        return np.stack([yaw, pitch], -1)


def yaw_pitch_to_theta_phi(yaw: float, pitch: float) -> tuple[float, float]:
    d = geometry.view_dir_from_yaw_pitch(np.float64(yaw), np.float64(pitch))
    s = geometry.cart_to_sph(d)
    return float(s[1]), float(s[2])


def yaw_of_view(theta: float, phi: float) -> float:
    d = geometry.sph_to_cart(np.array([1.0, theta, phi]))
    return float(geometry.yaw_of_direction(d))


def azimuth_bin(yaw: float) -> int:
    width = 2.0 * math.pi / N_AZIMUTH_BINS
    return min(int((yaw + math.pi) / width), N_AZIMUTH_BINS - 1)


# --- camera labels -----------------------------------------------------------

def camera_label(theta: float, phi: float,
                 radius: float = geometry.DEFAULT_CAMERA_RADIUS) -> np.ndarray:
    """25-float label: flattened 4x4 extrinsic (row-major) + flattened 3x3 intrinsic."""
    pose = camera_from_view(theta, phi, radius)
    return np.concatenate([pose.extrinsic.reshape(-1), default_intrinsics().reshape(-1)])


def label_to_camera(label: np.ndarray) -> tuple[CameraPose, np.ndarray]:
    label = np.asarray(label, dtype=np.float64)
    if label.shape != (25,):
        raise ValueError("camera label must have exactly 25 entries")
    extrinsic = label[:16].reshape(4, 4)
    intrinsics = label[16:].reshape(3, 3)
    pose = CameraPose(extrinsic=extrinsic, radius=float(np.linalg.norm(
        -extrinsic[:3, :3].T @ extrinsic[:3, 3])))
    pose.validate(tol=1e-5)
    return pose, intrinsics


# --- manifest ----------------------------------------------------------------

@dataclass
class ViewRecord:
    path: str
    label: list[float]
    theta: float
    phi: float
    bin: int
    blur: float
    dup: int = 1


@dataclass
class DatasetManifest:
    records: list[ViewRecord] = dc_field(default_factory=list)
    root: Path | None = None

    def save(self, path: Path | str) -> None:
        path = Path(path)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps({
                    "path": r.path, "label": list(r.label), "theta": r.theta,
                    "phi": r.phi, "bin": r.bin, "blur": r.blur, "dup": r.dup,
                }) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "DatasetManifest":
        path = Path(path)
        records = []
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                d = json.loads(line)
                records.append(ViewRecord(path=d["path"], label=d["label"], theta=d["theta"],
                                          phi=d["phi"], bin=d["bin"], blur=d["blur"],
                                          dup=d["dup"]))
        return cls(records=records, root=path.parent)


def _save_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Linear [0,1] -> 8-bit, rounded to nearest (ties to even via np.rint)."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_parsing_png(path: Path, classes: np.ndarray) -> None:
    img = Image.fromarray(classes.astype(np.uint8), mode="P")
    img.putpalette(PARSING_PALETTE)
    img.save(path)


def make_dataset(scene: SyntheticHeadScene, spec: ViewSpec, count: int,
                 out_dir: Path | str, seed: int, width: int = 64,
                 height: int = 64) -> DatasetManifest:
    """Render `count` oracle views into ``out_dir/images`` and write the manifest."""
    if count < 1:
        raise ValueError("dataset count must be at least 1")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3,)))
    views = spec.sample(count, rng)
    intrinsics = default_intrinsics()

    manifest = DatasetManifest(records=[], root=out_dir)
    for i, (yaw, pitch) in enumerate(views):
        theta, phi = yaw_pitch_to_theta_phi(yaw, pitch)
        pose = camera_from_view(theta, phi)
        rendered = oracle_render(scene, pose, intrinsics, width, height)
        rel = f"images/img_{i:05d}.png"
        _save_png(out_dir / rel, to_uint8(rendered["rgb"]))
        _save_png(img_dir / f"mask_{i:05d}.png", to_uint8(rendered["mask"]))
        save_parsing_png(img_dir / f"par_{i:05d}.png", rendered["parsing"])
        manifest.records.append(ViewRecord(
            path=rel,
            label=[float(v) for v in camera_label(theta, phi)],
            theta=theta, phi=phi,
            bin=azimuth_bin(float(yaw)),
            blur=float(laplacian_blur_score(rendered["rgb"])),
            dup=1,
        ))
    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def load_view(record: ViewRecord, root: Path | str) -> dict:
    """Load one record's image/mask/parsing plus the reconstructed camera."""
    root = Path(root)
    img_path = root / record.path
    rgb = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
    stem = img_path.name.replace("img_", "")
    mask = np.asarray(Image.open(img_path.parent / f"mask_{stem}"), dtype=np.float64) / 255.0
    parsing = np.asarray(Image.open(img_path.parent / f"par_{stem}"), dtype=np.uint8)
    pose, intrinsics = label_to_camera(np.asarray(record.label))
    return {
        "rgb": rgb, "mask": mask, "parsing": parsing,
        "pose": pose, "intrinsics": intrinsics,
        "width": rgb.shape[1], "height": rgb.shape[0],
    }


def balance_views(manifest: DatasetManifest, n_thresh: int = DEFAULT_N_THRESH) -> DatasetManifest:
    """Assign per-azimuth-bin duplication counts.

    ``N_dup = 1`` when the bin holds at least ``n_thresh`` records, else
    ``ceil(n_thresh / N_bin)``.
    """
    if not manifest.records:
        raise ValueError("cannot balance an empty manifest")
    counts: dict[int, int] = {}
    for r in manifest.records:
        counts[r.bin] = counts.get(r.bin, 0) + 1
    out = []
    for r in manifest.records:
        n = counts[r.bin]
        dup = 1 if n >= n_thresh else math.ceil(n_thresh / n)
        out.append(ViewRecord(path=r.path, label=r.label, theta=r.theta, phi=r.phi,
                              bin=r.bin, blur=r.blur, dup=dup))
    return DatasetManifest(records=out, root=manifest.root)


GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R BT.601
LAPLACIAN_KERNEL = ((0, 1, 0), (1, -4, 1), (0, 1, 0))


def laplacian_blur_score(image: np.ndarray) -> float:
    """Variance of the 3x3 Laplacian response on the 0..255 grayscale image.

    Float inputs are treated as [0, 1] and scaled by 255 so the sharpness
    threshold of 50 applies on the conventional 8-bit scale; the filter is
    applied in 'valid' mode (no padding), so images must be at least 3x3.
    Higher scores mean sharper images.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img @ np.asarray(GRAY_WEIGHTS)
    if np.issubdtype(np.asarray(image).dtype, np.floating):
        img = img * 255.0
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError("blur score needs a grayscale-convertible image of at least 3x3")
    lap = (img[:-2, 1:-1] + img[2:, 1:-1] + img[1:-1, :-2] + img[1:-1, 2:]
           - 4.0 * img[1:-1, 1:-1])
    return float(np.var(lap))
