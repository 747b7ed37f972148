"""Optimizer and the base-model training loop.

All loops are single-threaded and draw every random quantity from
counter-based streams keyed on (seed, purpose, step), so two runs with the
same config produce byte-identical checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng
from .checkpoint import Checkpoint
from .denoiser import ModelDims, denoiser_forward, init_params
from .diffusion import NoiseSchedule, build_schedule, q_sample
from .errors import ConfigError, TrainingDivergedError
from .synthdata import parse_caption
from .text import NULL_TOKEN, TokenTable, build_vocabulary, encoder_forward, pad_token_batch


class Adam:
    """Adam with optional gradient masking down to named tensors or rows."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 trainable: set[str] | None = None,
                 row_masks: dict[str, np.ndarray] | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.trainable = set(params) if trainable is None else trainable
        self.row_masks = row_masks or {}
        self.m = {k: np.zeros_like(params[k]) for k in self.trainable}
        self.v = {k: np.zeros_like(params[k]) for k in self.trainable}
        self.step_count = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name in self.trainable:
            g = grads.get(name)
            if g is None:
                continue
            if name in self.row_masks:
                masked = np.zeros_like(g)
                rows = self.row_masks[name]
                masked[rows] = g[rows]
                g = masked
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            self.params[name] -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class BaseTrainConfig:
    """Base-model training hyperparameters."""

    seed: int = 0
    steps: int = 4000
    lr: float = 2e-3
    batch_size: int = 16
    p_uncond: float = 0.1
    # Probability of dropping the color / pattern word from a caption, so the
    # model also learns partial and class-only prompts.
    p_drop_attr: float = 0.15
    t_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    image_size: int = 32


def new_checkpoint(dims: ModelDims, schedule: NoiseSchedule, seed: int) -> Checkpoint:
    vocab = build_vocabulary()
    dims = ModelDims(image_size=dims.image_size, channels=dims.channels,
                     d_tok=dims.d_tok, d_cond=dims.d_cond, d_time=dims.d_time,
                     sin_dim=dims.sin_dim, vocab_size=len(vocab))
    params = init_params(dims, seed)
    return Checkpoint(params=params, dims=dims, schedule=schedule, vocab=vocab,
                      metadata={"step_count": 0, "config_hash": ""})


def epsilon_step_loss(tensors: dict[str, ad.Tensor], dims: ModelDims,
                      schedule: NoiseSchedule, z0: np.ndarray, t: np.ndarray,
                      eps: np.ndarray, ids: np.ndarray, mask: np.ndarray) -> ad.Tensor:
    """Noise-prediction MSE for one batch, conditioning included in the tape."""
    cond = encoder_forward(tensors, ids, mask)
    zt = q_sample(z0, t, eps, schedule).astype(z0.dtype)
    pred = denoiser_forward(tensors, zt, t, cond, dims, schedule.t_train,
                            schedule.alpha_bars[t])
    return ad.mse(pred, eps)


def backward_grads(loss: ad.Tensor, tensors: dict[str, ad.Tensor]) -> dict[str, np.ndarray]:
    loss.backward()
    return {k: t.grad for k, t in tensors.items() if t.grad is not None}


def caption_variants(caption: str) -> tuple[str, str, str, str]:
    """(full, no-color, no-pattern, class-only) forms of a grammar caption."""
    try:
        attrs = parse_caption(caption)
    except Exception:
        return caption, caption, caption, caption
    return (caption,
            f"a photo of a {attrs.pattern} {attrs.shape}",
            f"a photo of a {attrs.color} {attrs.shape}",
            f"a photo of a {attrs.shape}")


def to_latent(images: np.ndarray) -> np.ndarray:
    """[0, 1] pixels -> [-1, 1] training latents (pixel-space diffusion)."""
    return (np.asarray(images, dtype=np.float32) * 2.0 - 1.0)


class TrainLogger:
    """JSON-lines training log: one record per optimization step."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, **fields) -> None:
        self.records.append(fields)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(fields, sort_keys=True) + "\n")


def train_base(images: np.ndarray, captions: list[str], cfg: BaseTrainConfig,
               log_path: str | Path | None = None) -> Checkpoint:
    """Train the base model from scratch on (image, caption) pairs.

    With probability p_uncond a caption is replaced by the null token; with
    probability p_drop_attr each of the color / pattern words is dropped.
    Returns a fresh checkpoint; fully reproducible from cfg.seed.
    """
    if len(images) == 0:
        raise ConfigError("corpus must be nonempty")
    if len(images) != len(captions):
        raise ConfigError("one caption per image required")

    schedule = build_schedule(cfg.t_train, cfg.beta_start, cfg.beta_end)
    ckpt = new_checkpoint(ModelDims(image_size=cfg.image_size), schedule, cfg.seed)
    table = ckpt.table
    z0_all = to_latent(images)
    variant_ids = [[table.tokenize(v) for v in caption_variants(c)] for c in captions]
    null_ids = [table.token_id(NULL_TOKEN)]

    opt = Adam(ckpt.params, lr=cfg.lr)
    logger = TrainLogger(log_path)
    size = cfg.image_size

    for step in range(cfg.steps):
        gen = rng.stream(cfg.seed, "base", step)
        idx = gen.integers(0, len(images), cfg.batch_size)
        t = gen.integers(1, cfg.t_train + 1, cfg.batch_size)
        eps = gen.standard_normal((cfg.batch_size, size, size, 3), dtype=np.float32)
        u_null = gen.random(cfg.batch_size)
        u_color = gen.random(cfg.batch_size)
        u_pattern = gen.random(cfg.batch_size)

        batch_ids = []
        for j, i in enumerate(idx):
            if u_null[j] < cfg.p_uncond:
                batch_ids.append(null_ids)
                continue
            drop_c = u_color[j] < cfg.p_drop_attr
            drop_p = u_pattern[j] < cfg.p_drop_attr
            batch_ids.append(variant_ids[i][3 if drop_c and drop_p else
                                            1 if drop_c else 2 if drop_p else 0])
        ids, mask = pad_token_batch(batch_ids)

        tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in ckpt.params.items()}
        loss = epsilon_step_loss(tensors, ckpt.dims, schedule, z0_all[idx], t, eps,
                                 ids, mask)
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise TrainingDivergedError(
                f"non-finite loss at step {step} (lr={cfg.lr})")
        opt.step(backward_grads(loss, tensors))
        logger.log(step=step, loss_total=loss_val, loss_recon=loss_val,
                   loss_prior_or_minus=None, lr=cfg.lr, seed=cfg.seed)

    ckpt.metadata["step_count"] = cfg.steps
    return ckpt


def smoothed_loss(records: list[dict], step: int, window: int = 20) -> float:
    """Mean loss over the `window` steps ending at `step` (inclusive)."""
    vals = [r["loss_total"] for r in records
            if step - window < r["step"] <= step]
    return float(np.mean(vals))
