"""Checkpoint container, its binary file format, and checkpoint-level sampling.

File format (bit-exact): magic "UVAP", u32 version = 1, u32 tensor count,
then per tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims, and
float32 little-endian data; the remainder of the file is a canonical JSON
metadata block carrying the config hash, step count, vocabulary, model
dimensions, and schedule endpoints.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng
from .denoiser import ModelDims, denoiser_forward
from .diffusion import NoiseSchedule, build_schedule, cfg_combine, ddim_timesteps, ddim_trajectory
from .errors import CheckpointFormatError, CheckpointIntegrityError, ConfigError
from .text import TokenTable, encode_text

MAGIC = b"UVAP"
VERSION = 1


@dataclass
class Checkpoint:
    """Named parameter tensors plus everything needed to sample from them."""

    params: dict[str, np.ndarray]
    dims: ModelDims
    schedule: NoiseSchedule
    vocab: tuple[str, ...]
    metadata: dict = field(default_factory=dict)

    @property
    def table(self) -> TokenTable:
        return TokenTable(self.vocab)

    def clone(self) -> "Checkpoint":
        return Checkpoint(params={k: v.copy() for k, v in self.params.items()},
                          dims=self.dims, schedule=self.schedule,
                          vocab=self.vocab, metadata=dict(self.metadata))

    def encode(self, prompt: str, overrides: dict[str, np.ndarray] | None = None) -> np.ndarray:
        return encode_text(prompt, self.table, self.params, overrides)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Serialize; refuses to write non-finite tensors."""
    tensors = dict(ckpt.params)
    tensors["schedule.betas"] = ckpt.schedule.betas.astype(np.float32)
    for name, arr in tensors.items():
        if not np.all(np.isfinite(arr)):
            raise CheckpointIntegrityError(f"tensor {name!r} is not finite")

    meta = dict(ckpt.metadata)
    meta["vocabulary"] = list(ckpt.vocab)
    meta["dims"] = {
        "image_size": ckpt.dims.image_size,
        "channels": list(ckpt.dims.channels),
        "d_tok": ckpt.dims.d_tok,
        "d_cond": ckpt.dims.d_cond,
        "d_time": ckpt.dims.d_time,
        "sin_dim": ckpt.dims.sin_dim,
        "vocab_size": ckpt.dims.vocab_size,
    }
    meta["schedule"] = {"t_train": ckpt.schedule.t_train,
                        "beta_start": float(ckpt.schedule.betas[0]),
                        "beta_end": float(ckpt.schedule.betas[-1])}

    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        nb = name.encode("utf-8")
        arr32 = np.ascontiguousarray(arr, dtype=np.float32)
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<B", arr32.ndim)
        for d in arr32.shape:
            out += struct.pack("<I", d)
        out += arr32.astype("<f4").tobytes()
    out += json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise CheckpointIntegrityError("file too short")
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic: {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version: {version}")

    off = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            end = off + 4 * n
            if end > len(blob):
                raise CheckpointIntegrityError("truncated tensor data")
            tensors[name] = np.frombuffer(blob[off:end], dtype="<f4").reshape(shape).copy()
            off = end
    except struct.error as e:
        raise CheckpointIntegrityError(f"truncated file: {e}") from None

    try:
        meta = json.loads(blob[off:].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointIntegrityError(f"bad metadata block: {e}") from None

    betas = tensors.pop("schedule.betas", None)
    sched_meta = meta.pop("schedule")
    schedule = build_schedule(sched_meta["t_train"], sched_meta["beta_start"],
                              sched_meta["beta_end"])
    if betas is None:
        raise CheckpointFormatError("missing schedule tensor")
    dims_meta = meta.pop("dims")
    dims = ModelDims(image_size=dims_meta["image_size"],
                     channels=tuple(dims_meta["channels"]),
                     d_tok=dims_meta["d_tok"], d_cond=dims_meta["d_cond"],
                     d_time=dims_meta["d_time"], sin_dim=dims_meta["sin_dim"],
                     vocab_size=dims_meta["vocab_size"])
    vocab = tuple(meta.pop("vocabulary"))
    return Checkpoint(params=tensors, dims=dims, schedule=schedule,
                      vocab=vocab, metadata=meta)


# ---------------------------------------------------------------------------
# Sampling against a checkpoint

def predict_eps(ckpt: Checkpoint, z: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
    """Raw epsilon prediction for a batch; no guidance."""
    tensors = {k: ad.as_tensor(v) for k, v in ckpt.params.items()}
    t_arr = np.full(z.shape[0], t, dtype=np.int64) if np.isscalar(t) else np.asarray(t)
    out = denoiser_forward(tensors, z.astype(np.float32), t_arr,
                           ad.as_tensor(cond.astype(np.float32)),
                           ckpt.dims, ckpt.schedule.t_train,
                           ckpt.schedule.alpha_bars[t_arr])
    return out.data


def guided_eps_fn(ckpt: Checkpoint, conds: np.ndarray, guidance: float):
    """eps callback applying CFG; conds is (B, d_cond) for the batch."""
    null_cond = ckpt.encode("<null>")
    stacked = np.concatenate([conds, np.broadcast_to(null_cond, conds.shape)], axis=0)

    def eps_fn(z, t):
        both = predict_eps(ckpt, np.concatenate([z, z], axis=0), t, stacked)
        b = z.shape[0]
        return cfg_combine(both[:b], both[b:], guidance)
    return eps_fn


def ddim_sample_batch(ckpt: Checkpoint, conds: np.ndarray, steps: int,
                      guidance: float, seeds: list[int]) -> np.ndarray:
    """Sample len(seeds) images; row i uses conds[i] and its own noise seed.

    Returns (B, H, W, 3) images in [0, 1]. Deterministic in all arguments.
    """
    if conds.shape[0] != len(seeds):
        raise ConfigError("one seed per condition row required")
    size = ckpt.dims.image_size
    taus = ddim_timesteps(ckpt.schedule.t_train, steps)
    z = np.stack([
        rng.stream(s, "ddim-init").standard_normal((size, size, 3)).astype(np.float32)
        for s in seeds
    ])
    eps_fn = guided_eps_fn(ckpt, conds.astype(np.float32), guidance)
    out = ddim_trajectory(eps_fn, z, ckpt.schedule, taus)
    return np.clip((out.astype(np.float64) + 1.0) / 2.0, 0.0, 1.0)


def ddim_sample(ckpt: Checkpoint, cond: np.ndarray, steps: int, guidance: float,
                seed: int) -> np.ndarray:
    """Single-image convenience wrapper around ddim_sample_batch."""
    return ddim_sample_batch(ckpt, cond[None, :], steps, guidance, [seed])[0]
