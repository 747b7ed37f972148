"""Concept pre-learning and dual identifier training.

Pre-learning fine-tunes the base model on the reference images under
"a photo of a sks {class}" while an alpha-weighted reconstruction term on
model-generated class images counteracts drift. Dual training then binds
one identifier to each curated attribute set by alternating reconstruction
batches, optionally restricted to the two identifier embedding rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng
from .augment import CuratedSet
from .checkpoint import Checkpoint, ddim_sample_batch
from .errors import ConfigError, ShapeMismatchError, TrainingDivergedError, ValidationError
from .text import pad_token_batch
from .training import Adam, TrainLogger, backward_grads, epsilon_step_loss, to_latent


@dataclass
class PrelearnConfig:
    """Pre-learning hyperparameters; lr is kept at the reference value and
    scaled by a documented multiplier because this model is ~10^4 smaller
    than the networks that value was tuned for."""

    identifier: str = "sks"
    class_word: str = "star"
    alpha: float = 1.0
    steps: int = 500
    lr: float = 5e-6
    lr_multiplier: float = 100.0
    n_prior: int = 32
    batch_size: int = 4
    sample_steps: int = 50
    guidance: float = 7.5

    @property
    def effective_lr(self) -> float:
        return self.lr * self.lr_multiplier

    def reference_caption(self) -> str:
        return f"a photo of a {self.identifier} {self.class_word}"

    def prior_caption(self) -> str:
        return f"a photo of a {self.class_word}"


@dataclass
class DualTrainConfig:
    target_identifier: str = "tgt"
    nontarget_identifier: str = "ngt"
    steps: int = 1000
    lr: float = 5e-6
    lr_multiplier: float = 100.0
    mode: str = "full"             # "full" | "embedding-only"
    interleave: tuple[int, int] = (1, 1)
    batch_size: int = 4

    @property
    def effective_lr(self) -> float:
        return self.lr * self.lr_multiplier

    def __post_init__(self):
        if self.target_identifier == self.nontarget_identifier:
            raise ConfigError("identifiers must be distinct")
        if self.mode not in ("full", "embedding-only"):
            raise ConfigError(f"unknown mode: {self.mode!r}")
        if min(self.interleave) < 1:
            raise ConfigError("interleave ratio entries must be >= 1")


def make_prior_set(base: Checkpoint, class_word: str, n: int, seed: int,
                   steps: int = 50, guidance: float = 7.5) -> np.ndarray:
    """Sample n class images from the frozen base model.

    Returns (n, H, W, 3) pixels in [0, 1]; n = 0 yields an empty set.
    """
    if n == 0:
        s = base.dims.image_size
        return np.zeros((0, s, s, 3))
    cond = base.encode(f"a photo of a {class_word}")
    seeds = [rng.derive_seed(seed, "prior", i) for i in range(n)]
    return ddim_sample_batch(base, np.tile(cond, (n, 1)), steps, guidance, seeds)


def _check_images(images: np.ndarray, size: int, what: str) -> None:
    if images.ndim != 4 or images.shape[1:] != (size, size, 3):
        raise ShapeMismatchError(
            f"{what} images must be (N, {size}, {size}, 3), got {images.shape}")


def prelearn(base: Checkpoint, refs: np.ndarray, cfg: PrelearnConfig, seed: int,
             prior_images: np.ndarray | None = None,
             log_path: str | Path | None = None) -> Checkpoint:
    """Two-term concept pre-learning; returns the concept-aware checkpoint.

    The reference and preservation terms draw from independent random
    streams, so alpha = 0 reproduces the pure-reconstruction trajectory
    bit-exactly regardless of the prior set.
    """
    refs = np.asarray(refs)
    if len(refs) == 0:
        raise ConfigError("reference set must be nonempty")
    size = base.dims.image_size
    _check_images(refs, size, "reference")

    ckpt = base.clone()
    table = ckpt.table
    if not table.is_placeholder(cfg.identifier):
        raise ConfigError(f"identifier {cfg.identifier!r} is not a placeholder token")

    use_prior = cfg.alpha > 0.0
    if use_prior and prior_images is None:
        prior_images = make_prior_set(base, cfg.class_word, cfg.n_prior,
                                      rng.derive_seed(seed, "prior-set"),
                                      cfg.sample_steps, cfg.guidance)
    if use_prior and (prior_images is None or len(prior_images) == 0):
        use_prior = False
    if use_prior:
        _check_images(np.asarray(prior_images), size, "prior")
        z_prior = to_latent(np.asarray(prior_images))

    z_refs = to_latent(refs)
    ref_ids, ref_mask = pad_token_batch(
        [table.tokenize(cfg.reference_caption())] * cfg.batch_size)
    prior_ids, prior_mask = pad_token_batch(
        [table.tokenize(cfg.prior_caption())] * cfg.batch_size)

    opt = Adam(ckpt.params, lr=cfg.effective_lr)
    logger = TrainLogger(log_path)
    schedule = ckpt.schedule

    for step in range(cfg.steps):
        gen_ref = rng.stream(seed, "prelearn-ref", step)
        b = cfg.batch_size
        idx = gen_ref.integers(0, len(refs), b)
        t = gen_ref.integers(1, schedule.t_train + 1, b)
        eps = gen_ref.standard_normal((b, size, size, 3), dtype=np.float32)

        tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in ckpt.params.items()}
        loss_recon = epsilon_step_loss(tensors, ckpt.dims, schedule, z_refs[idx],
                                       t, eps, ref_ids, ref_mask)
        if use_prior:
            gen_p = rng.stream(seed, "prelearn-prior", step)
            pidx = gen_p.integers(0, len(z_prior), b)
            pt = gen_p.integers(1, schedule.t_train + 1, b)
            peps = gen_p.standard_normal((b, size, size, 3), dtype=np.float32)
            loss_prior = epsilon_step_loss(tensors, ckpt.dims, schedule,
                                           z_prior[pidx], pt, peps,
                                           prior_ids, prior_mask)
            total = ad.add(loss_recon, ad.scale(loss_prior, cfg.alpha))
            prior_val = float(loss_prior.data)
        else:
            total = loss_recon
            prior_val = None

        total_val = float(total.data)
        if not np.isfinite(total_val):
            raise TrainingDivergedError(
                f"non-finite loss at step {step} (lr={cfg.effective_lr})")
        opt.step(backward_grads(total, tensors))
        logger.log(step=step, loss_total=total_val,
                   loss_recon=float(loss_recon.data),
                   loss_prior_or_minus=prior_val, lr=cfg.effective_lr, seed=seed)

    ckpt.metadata["step_count"] = ckpt.metadata.get("step_count", 0) + cfg.steps
    return ckpt


def _validate_curated(curated: CuratedSet, identifier: str) -> None:
    for i, caption in enumerate(curated.captions):
        if identifier not in caption.split():
            raise ValidationError(
                f"{curated.tag} sample {i} ({caption!r}) lacks identifier "
                f"{identifier!r}")


def dual_train(g0: Checkpoint, d_plus: CuratedSet, d_minus: CuratedSet,
               cfg: DualTrainConfig, seed: int,
               root: str | Path | None = None,
               log_path: str | Path | None = None) -> Checkpoint:
    """Bind the target / non-target identifiers to the curated sets.

    Batches alternate between the sets at the configured ratio. In
    embedding-only mode gradients reach only the two identifier rows of the
    token table; every other tensor stays byte-identical to g0.
    """
    if not d_plus.captions or not d_minus.captions:
        raise ConfigError("both curated sets must be nonempty")
    _validate_curated(d_plus, cfg.target_identifier)
    _validate_curated(d_minus, cfg.nontarget_identifier)

    ckpt = g0.clone()
    table = ckpt.table
    size = ckpt.dims.image_size
    schedule = ckpt.schedule

    sets = {}
    for curated in (d_plus, d_minus):
        images = curated.images if curated.images is not None else curated.load_images(root)
        _check_images(np.asarray(images), size, curated.tag)
        ids, mask = pad_token_batch([table.tokenize(c) for c in curated.captions])
        sets[curated.tag] = (to_latent(np.asarray(images)), ids, mask)

    if cfg.mode == "embedding-only":
        rows = np.array([table.token_id(cfg.target_identifier),
                         table.token_id(cfg.nontarget_identifier)])
        opt = Adam(ckpt.params, lr=cfg.effective_lr, trainable={"tok.emb"},
                   row_masks={"tok.emb": rows})
    else:
        opt = Adam(ckpt.params, lr=cfg.effective_lr)

    logger = TrainLogger(log_path)
    rp, rm = cfg.interleave

    for step in range(cfg.steps):
        use_plus = (step % (rp + rm)) < rp
        tag = "plus" if use_plus else "minus"
        z_all, ids_all, mask_all = sets[tag]
        gen = rng.stream(seed, f"dual-{tag}", step)
        b = min(cfg.batch_size, len(z_all))
        idx = gen.integers(0, len(z_all), b)
        t = gen.integers(1, schedule.t_train + 1, b)
        eps = gen.standard_normal((b, size, size, 3), dtype=np.float32)

        tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in ckpt.params.items()}
        loss = epsilon_step_loss(tensors, ckpt.dims, schedule, z_all[idx], t, eps,
                                 ids_all[idx], mask_all[idx])
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            raise TrainingDivergedError(
                f"non-finite loss at step {step} (lr={cfg.effective_lr})")
        opt.step(backward_grads(loss, tensors))
        logger.log(step=step, loss_total=loss_val,
                   loss_recon=loss_val if use_plus else None,
                   loss_prior_or_minus=None if use_plus else loss_val,
                   lr=cfg.effective_lr, seed=seed)

    ckpt.metadata["step_count"] = ckpt.metadata.get("step_count", 0) + cfg.steps
    return ckpt
