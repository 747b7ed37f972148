"""The convolutional epsilon predictor.

A small encoder-decoder over pixels: two stride-2 downsampling stages with
channel widths (32, 64), a bottleneck, and a mirrored nearest-neighbor
upsampling path with additive skips. The sinusoidal timestep embedding and
the text condition vector enter every stage through feature-wise affine
modulation. Two normalized coordinate channels are appended to the input so
the absolute-phase pixel patterns of the corpus are locally decodable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng


@dataclass(frozen=True)
class ModelDims:
    """Architecture hyperparameters; fixed per checkpoint."""

    image_size: int = 32
    channels: tuple[int, int] = (32, 64)
    d_tok: int = 48
    d_cond: int = 64
    d_time: int = 64
    sin_dim: int = 32
    vocab_size: int = 0  # filled in when the table is known

    def film_sites(self):
        c1, c2 = self.channels
        return (("f1", c1), ("f2", c2), ("f3", c2),
                ("f4", c2), ("f5", c2), ("f6", c1))


def init_params(dims: ModelDims, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Deterministic parameter initialization keyed by (seed, tensor name)."""
    c1, c2 = dims.channels

    def normal(name, shape, std):
        return rng.stream(seed, "init", name).normal(0.0, std, shape).astype(dtype)

    def conv_w(name, cin, cout):
        return normal(name, (3, 3, cin, cout), (2.0 / (9 * cin)) ** 0.5)

    p: dict[str, np.ndarray] = {}
    # O(1) embeddings: there is no normalization layer downstream, so the
    # condition pathway must start at a healthy magnitude to train.
    p["tok.emb"] = normal("tok.emb", (dims.vocab_size, dims.d_tok), 1.0)
    p["enc.w1"] = normal("enc.w1", (dims.d_tok, dims.d_cond), (1.0 / dims.d_tok) ** 0.5)
    p["enc.b1"] = np.zeros(dims.d_cond, dtype=dtype)
    p["enc.w2"] = normal("enc.w2", (dims.d_cond, dims.d_cond), (1.0 / dims.d_cond) ** 0.5)
    p["enc.b2"] = np.zeros(dims.d_cond, dtype=dtype)
    p["time.w"] = normal("time.w", (dims.sin_dim, dims.d_time), (1.0 / dims.sin_dim) ** 0.5)
    p["time.b"] = np.zeros(dims.d_time, dtype=dtype)

    p["den.c1.w"] = conv_w("den.c1.w", 5, c1)
    p["den.c2.w"] = conv_w("den.c2.w", c1, c2)
    p["den.c3.w"] = conv_w("den.c3.w", c2, c2)
    p["den.c4.w"] = conv_w("den.c4.w", c2, c2)
    p["den.c5.w"] = conv_w("den.c5.w", c2, c2)
    p["den.c6.w"] = conv_w("den.c6.w", c2, c1)
    for k in ("c1", "c2", "c3", "c4", "c5", "c6"):
        cout = p[f"den.{k}.w"].shape[-1]
        p[f"den.{k}.b"] = np.zeros(cout, dtype=dtype)
    # Output head starts at zero: the model predicts zero noise initially.
    p["den.out.w"] = np.zeros((3, 3, c1, 3), dtype=dtype)
    p["den.out.b"] = np.zeros(3, dtype=dtype)

    for name, ch in dims.film_sites():
        # Zero-init modulation: conditioning fades in during training.
        p[f"film.{name}.ws_t"] = np.zeros((dims.d_time, ch), dtype=dtype)
        p[f"film.{name}.ws_c"] = np.zeros((dims.d_cond, ch), dtype=dtype)
        p[f"film.{name}.bs"] = np.zeros(ch, dtype=dtype)
        p[f"film.{name}.wt_t"] = np.zeros((dims.d_time, ch), dtype=dtype)
        p[f"film.{name}.wt_c"] = np.zeros((dims.d_cond, ch), dtype=dtype)
        p[f"film.{name}.bt"] = np.zeros(ch, dtype=dtype)
    return p


def sinusoidal_embedding(t: np.ndarray, dim: int, t_max: int, dtype=np.float32) -> np.ndarray:
    """Classic sin/cos embedding of integer timesteps, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(float(t_max)) * np.arange(half) / max(half - 1, 1))
    ang = t.astype(np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


def coordinate_channels(size: int, batch: int, dtype=np.float32) -> np.ndarray:
    ax = np.linspace(-1.0, 1.0, size, dtype=dtype)
    gx, gy = np.meshgrid(ax, ax)
    grid = np.stack([gx, gy], axis=-1)[None]
    return np.broadcast_to(grid, (batch, size, size, 2))


def _film(params, name, temb, cond, h):
    s = ad.add(ad.add(ad.matmul(temb, params[f"film.{name}.ws_t"]),
                      ad.matmul(cond, params[f"film.{name}.ws_c"])),
               params[f"film.{name}.bs"])
    t = ad.add(ad.add(ad.matmul(temb, params[f"film.{name}.wt_t"]),
                      ad.matmul(cond, params[f"film.{name}.wt_c"])),
               params[f"film.{name}.bt"])
    return ad.film(h, s, t)


def denoiser_forward(params: dict[str, ad.Tensor], z: np.ndarray, t: np.ndarray,
                     cond: ad.Tensor, dims: ModelDims, t_max: int,
                     abar_t: np.ndarray) -> ad.Tensor:
    """Predict epsilon for a batch: z (B, H, W, 3), t (B,), cond (B, d_cond).

    The network itself regresses the velocity v = sqrt(abar) eps -
    sqrt(1 - abar) z0 and the epsilon prediction is recombined as
    sqrt(abar) v + sqrt(1 - abar) z_t; both coefficients are bounded by 1
    and the clean-image structure is shared across every noise level, which
    is what makes the small model trainable at this scale.
    """
    B = z.shape[0]
    dtype = z.dtype
    sin = sinusoidal_embedding(t, dims.sin_dim, t_max, dtype)
    temb = ad.silu(ad.linear(ad.as_tensor(sin), params["time.w"], params["time.b"]))

    coords = coordinate_channels(dims.image_size, B, dtype)
    x = ad.concat_channels(ad.as_tensor(z), ad.as_tensor(coords))

    h1 = ad.silu(_film(params, "f1", temb, cond,
                       ad.conv3x3(x, params["den.c1.w"], params["den.c1.b"])))
    h2 = ad.silu(_film(params, "f2", temb, cond,
                       ad.conv3x3(h1, params["den.c2.w"], params["den.c2.b"], stride=2)))
    h3 = ad.silu(_film(params, "f3", temb, cond,
                       ad.conv3x3(h2, params["den.c3.w"], params["den.c3.b"], stride=2)))
    h4 = ad.silu(_film(params, "f4", temb, cond,
                       ad.conv3x3(h3, params["den.c4.w"], params["den.c4.b"])))
    u1 = ad.conv3x3(ad.upsample2(h4), params["den.c5.w"], params["den.c5.b"])
    h5 = ad.silu(_film(params, "f5", temb, cond, ad.add(u1, h2)))
    u2 = ad.conv3x3(ad.upsample2(h5), params["den.c6.w"], params["den.c6.b"])
    h6 = ad.silu(_film(params, "f6", temb, cond, ad.add(u2, h1)))
    v_hat = ad.conv3x3(h6, params["den.out.w"], params["den.out.b"])

    ab = np.asarray(abar_t, dtype=dtype).reshape(B, 1, 1, 1)
    c_v = ad.as_tensor(np.sqrt(ab))
    c_z = np.sqrt(1.0 - ab) * z
    return ad.add(ad.mul(v_hat, c_v), ad.as_tensor(c_z))
