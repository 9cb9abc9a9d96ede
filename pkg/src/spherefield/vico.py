"""View-image consistency study: a toy conditional discriminator.

Isolates the mechanism behind the shuffled-label loss without a generator:
the discriminator sees 16x16 grayscale crops with a sin/cos camera-label
embedding, positives are real matched pairs, "fakes" are corrupted oracle
images, and the consistency term adds real images paired with shuffled
labels as extra negatives.  Training with that term should raise the
discriminator's ability to rank matched above mismatched pairs (mismatch
AUC), which is what the paired experiment measures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .dataset import DatasetManifest, GRAY_WEIGHTS, load_view
from .optim import AdamState, NumericalError, adam_step, backward

PATCH = 16
EMBED_DIM = 4


@dataclass
class ToyDiscriminator:
    """MLP over (flattened 16x16 grayscale + label embedding) -> logit."""

    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor
    w3: torch.Tensor
    b3: torch.Tensor

    @classmethod
    def build(cls, rng: np.random.Generator, hidden: int = 64,
              dtype: torch.dtype = torch.float32) -> "ToyDiscriminator":
        n_in = PATCH * PATCH + EMBED_DIM

        def layer(a, b):
            bound = 1.0 / math.sqrt(a)
            return (torch.tensor(rng.uniform(-bound, bound, (a, b)), dtype=dtype),
                    torch.zeros(b, dtype=dtype))

        w1, b1 = layer(n_in, hidden)
        w2, b2 = layer(hidden, hidden)
        w3, b3 = layer(hidden, 1)
        return cls(w1, b1, w2, b2, w3, b3)

    def logits(self, images: torch.Tensor, embeds: torch.Tensor) -> torch.Tensor:
        x = torch.cat([images, embeds], dim=-1)
        h = torch.relu(x @ self.w1 + self.b1)
        h = torch.relu(h @ self.w2 + self.b2)
        return (h @ self.w3 + self.b3).squeeze(-1)

    def prob(self, images: torch.Tensor, embeds: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(images, embeds))

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}


def embed_label(theta, phi) -> np.ndarray:
    """Camera-label embedding (sin/cos of both angles); shape (..., 4)."""
    return np.stack([np.sin(theta), np.cos(theta), np.sin(phi), np.cos(phi)], -1)


def downsample_gray(rgb: np.ndarray, patch: int = PATCH) -> np.ndarray:
    """Block-mean luminance downsample to ``patch x patch`` (dims must divide)."""
    h, w = rgb.shape[:2]
    if h % patch or w % patch:
        raise ValueError(f"image dims must be divisible by {patch}")
    gray = rgb @ np.asarray(GRAY_WEIGHTS)
    bh, bw = h // patch, w // patch
    return gray.reshape(patch, bh, patch, bw).mean(axis=(1, 3))


def shuffle_labels(labels: np.ndarray, seed_or_rng) -> tuple[np.ndarray, np.ndarray]:
    """Uniform random permutation of the label batch (plain shuffle, fixed points allowed)."""
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    n = len(labels)
    if n < 2:
        raise ValueError("need at least two labels to shuffle")
    perm = rng.permutation(n)
    return np.asarray(labels)[perm], perm


def vico_loss(d: ToyDiscriminator, images: torch.Tensor,
              shuffled_embeds: torch.Tensor) -> torch.Tensor:
    """Mean ``-log(1 - D(image, shuffled label))`` over the batch.

    This is the minimized form of the discriminator's shuffled-pair
    objective: driving it down pushes D towards 0 on mismatched pairs.
    The log argument is clamped at 1e-12.
    """
    p = d.prob(images, shuffled_embeds)
    return -torch.log(torch.clamp(1.0 - p, min=1e-12)).mean()


@dataclass
class CorruptionSpec:
    """Synthetic degradation standing in for generator fakes."""

    noise_std: float = 0.30
    blur_passes: int = 2


def corrupt_patches(patches: np.ndarray, spec: CorruptionSpec,
                    rng: np.random.Generator) -> np.ndarray:
    out = patches.copy()
    for _ in range(spec.blur_passes):
        blurred = out.copy()
        blurred[:, 1:-1, :] = (out[:, :-2, :] + out[:, 1:-1, :] + out[:, 2:, :]) / 3.0
        out = blurred
        blurred = out.copy()
        blurred[:, :, 1:-1] = (out[:, :, :-2] + out[:, :, 1:-1] + out[:, :, 2:]) / 3.0
        out = blurred
    out = out + rng.normal(0.0, spec.noise_std, out.shape)
    return np.clip(out, 0.0, 1.0)


def _bce(logits: torch.Tensor, target: float) -> torch.Tensor:
    t = torch.full_like(logits, target)
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, t)


@dataclass
class DiscriminatorRun:
    d: ToyDiscriminator
    real_fake_accuracy: float
    mismatch_auc: float
    pair_counts: dict[str, int]
    losses: list[float]


def train_discriminator(manifest: DatasetManifest, with_vico: bool,
                        corruption: CorruptionSpec, steps: int, seed: int, *,
                        root=None, batch: int = 32, lr: float = 2e-3,
                        holdout_frac: float = 0.25, hidden: int = 64) -> DiscriminatorRun:
    """Train real-matched vs corrupted (optionally + real-mismatched) and evaluate.

    Returns the trained discriminator together with held-out real-vs-corrupted
    accuracy, held-out mismatch AUC, and how many pairs of each kind the
    training loop actually constructed.
    """
    if not manifest.records:
        raise ValueError("dataset manifest is empty")
    root = root if root is not None else manifest.root
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(99,)))

    patches, embeds = [], []
    for rec in manifest.records:
        view = load_view(rec, root)
        patches.append(downsample_gray(view["rgb"]))
        embeds.append(embed_label(rec.theta, rec.phi))
    patches = np.stack(patches)
    embeds = np.stack(embeds)

    n = len(patches)
    order = rng.permutation(n)
    n_hold = max(4, int(round(holdout_frac * n)))
    hold, train = order[:n_hold], order[n_hold:]
    if len(train) < 2:
        raise ValueError("dataset too small for a train/holdout split")

    d = ToyDiscriminator.build(rng, hidden=hidden)
    params = d.tensors()
    for p in params.values():
        p.requires_grad_(True)
    adam = AdamState.init(params, lr=lr)
    counts = {"matched": 0, "corrupted": 0, "mismatched": 0}
    losses = []

    def to_t(x):
        return torch.tensor(x.reshape(len(x), -1), dtype=torch.float32)

    for step in range(steps):
        srng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(5, step)))
        sel = srng.choice(train, size=min(batch, len(train)), replace=False)
        imgs = patches[sel]
        embs = embeds[sel]
        fake_imgs = corrupt_patches(imgs, corruption, srng)

        loss = _bce(d.logits(to_t(imgs), to_t(embs)), 1.0)
        loss = loss + _bce(d.logits(to_t(fake_imgs), to_t(embs)), 0.0)
        counts["matched"] += len(sel)
        counts["corrupted"] += len(sel)
        if with_vico:
            shuf, _ = shuffle_labels(embs, srng)
            loss = loss + vico_loss(d, to_t(imgs), to_t(np.ascontiguousarray(shuf)))
            counts["mismatched"] += len(sel)
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite discriminator loss at step {step}")
        grads = backward(loss, params)
        adam_step(params, grads, adam)
        losses.append(float(loss.detach()))

    with torch.no_grad():
        h_imgs, h_embs = patches[hold], embeds[hold]
        erng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
        fake = corrupt_patches(h_imgs, corruption, erng)
        p_real = d.prob(to_t(h_imgs), to_t(h_embs)).numpy()
        p_fake = d.prob(to_t(fake), to_t(h_embs)).numpy()
        acc = 0.5 * float((p_real > 0.5).mean() + (p_fake <= 0.5).mean())
        shuf, _ = shuffle_labels(h_embs, erng)
        auc = mismatch_auc(d, (h_imgs, h_embs), (h_imgs, shuf))

    return DiscriminatorRun(d=d, real_fake_accuracy=acc, mismatch_auc=auc,
                            pair_counts=counts, losses=losses)


def _rankdata(x: np.ndarray) -> np.ndarray:
    """Average ranks (1-based) with tie handling."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def mismatch_auc(d: ToyDiscriminator, matched, mismatched) -> float:
    """Rank AUC of discriminator scores: matched pairs ranked above mismatched."""
    m_imgs, m_embs = matched
    s_imgs, s_embs = mismatched
    if len(m_imgs) == 0 or len(s_imgs) == 0:
        raise ValueError("both pair sets must be non-empty")

    def to_t(x):
        return torch.tensor(np.asarray(x).reshape(len(x), -1), dtype=torch.float32)

    with torch.no_grad():
        pos = d.prob(to_t(m_imgs), to_t(m_embs)).numpy()
        neg = d.prob(to_t(s_imgs), to_t(s_embs)).numpy()
    scores = np.concatenate([pos, neg])
    ranks = _rankdata(scores)
    n_pos, n_neg = len(pos), len(neg)
    u = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
