"""SPHF tensor container and field/fit-state serialization.

Byte layout (all little-endian):

* magic ``b"SPHF"``, then ``u32`` version (currently 1);
* per tensor, sorted by name: ``u16`` name length, UTF-8 name, ``u8`` rank,
  ``rank x u32`` dims, then the row-major ``f32`` payload.

The container stores f32 regardless of the in-memory dtype; fields
round-trip exactly because fitting runs in f32 (the f64 mode exists only
for gradient verification).  Field structure rides along as scalar
``meta.*`` tensors so a checkpoint alone is enough to rebuild the field.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SPHF"
VERSION = 1

_KIND_CODES = {"dual-sphere": 0.0, "single-sphere": 1.0, "tri-plane": 2.0, "tri-grid": 3.0}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


class CheckpointError(ValueError):
    pass


def write_tensors(path: Path | str, tensors: dict[str, np.ndarray | torch.Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name in sorted(tensors):
            arr = tensors[name]
            if isinstance(arr, torch.Tensor):
                arr = arr.detach().numpy()
            # note: np.ascontiguousarray would promote rank-0 to rank-1
            arr = np.asarray(arr, dtype="<f4")
            if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
                arr = np.ascontiguousarray(arr)
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def read_tensors(path: Path | str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError("not an SPHF container (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported SPHF version {version}")
    out: dict[str, np.ndarray] = {}
    off = 8
    while off < len(blob):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        out[name] = arr.copy()
    return out


def _field_tensors(field) -> dict[str, np.ndarray | torch.Tensor]:
    tensors: dict[str, np.ndarray | torch.Tensor] = {
        f"field.{k}": v for k, v in field.named_parameters().items()
    }
    meta = dict(field.meta())
    meta["kind_code"] = _KIND_CODES[field.kind]
    if hasattr(field, "set_a"):
        from .planes import WrapMode

        meta["phi_wrap"] = float(field.set_a.p_phi_r.wrap_u is WrapMode.WRAP)
    elif field.kind == "single-sphere":
        from .planes import WrapMode

        meta["phi_wrap"] = float(field.planes.p_phi_r.wrap_u is WrapMode.WRAP)
    for k, v in meta.items():
        tensors[f"meta.{k}"] = np.asarray(v, dtype=np.float32)
    return tensors


def save_field(path: Path | str, field) -> None:
    write_tensors(path, _field_tensors(field))


def _rebuild_field(tensors: dict[str, np.ndarray]):
    from .field import build_field

    meta = {k[len("meta."):]: float(v) for k, v in tensors.items() if k.startswith("meta.")}
    try:
        kind = _CODE_KINDS[meta["kind_code"]]
    except KeyError as exc:
        raise CheckpointError("checkpoint does not describe a known field kind") from exc
    kwargs = dict(resolution=int(meta["resolution"]), channels=int(meta["channels"]),
                  hidden=int(meta["hidden"]), n_classes=int(meta["n_classes"]))
    if kind in ("dual-sphere", "single-sphere"):
        kwargs["r_max"] = meta["r_max"]
        kwargs["phi_wrap"] = bool(meta.get("phi_wrap", 0.0))
        if kind == "dual-sphere":
            kwargs["epsilon"] = meta["epsilon"]
    else:
        kwargs["half_extent"] = meta["r_max"]
        if kind == "tri-grid":
            kwargs["depth"] = int(meta["depth"])
    field = build_field(kind, np.random.default_rng(0), **kwargs)
    params = field.named_parameters()
    with torch.no_grad():
        for name, p in params.items():
            key = f"field.{name}"
            if key not in tensors:
                raise CheckpointError(f"checkpoint is missing tensor {key}")
            if tuple(tensors[key].shape) != tuple(p.shape):
                raise CheckpointError(f"checkpoint tensor {key} has wrong shape")
            p.copy_(torch.tensor(tensors[key], dtype=p.dtype))
    return field


def load_field(path: Path | str):
    return _rebuild_field(read_tensors(path))


def save_fit_state(path: Path | str, field, adam) -> None:
    # Adam hyperparameters (lr, betas, eps) deliberately stay out of the
    # container: storing them would round through f32 and break bit-exact
    # resume.  They are re-supplied by the resuming invocation.
    tensors = _field_tensors(field)
    for k, v in adam.m.items():
        tensors[f"adam.m.{k}"] = v
    for k, v in adam.v.items():
        tensors[f"adam.v.{k}"] = v
    tensors["adam.step"] = np.asarray(float(adam.step), dtype=np.float32)
    write_tensors(path, tensors)


def load_fit_state(path: Path | str, lr: float = 5e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8):
    from .optim import AdamState

    tensors = read_tensors(path)
    field = _rebuild_field(tensors)
    params = field.named_parameters()
    adam = AdamState(
        m={k: torch.tensor(tensors[f"adam.m.{k}"]) for k in params},
        v={k: torch.tensor(tensors[f"adam.v.{k}"]) for k in params},
        step=int(tensors["adam.step"]),
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )
    return field, adam
