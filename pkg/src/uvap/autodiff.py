"""Minimal reverse-mode automatic differentiation on numpy arrays.

Only the operations the denoiser and text encoder need are implemented.
Convolutions use a shift-and-accumulate lowering (nine GEMMs per 3x3 kernel)
in NHWC layout, which on a single core beats im2col by avoiding the large
column-buffer permutation. All ops preserve the input dtype, so the same
model code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """A node in the computation tape."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self):
        """Reverse sweep from this (scalar) node."""
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))
    out.backward_fn = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))
    out.backward_fn = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))
    out.backward_fn = bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s, parents=(a,))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * s)
    out.backward_fn = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data @ b.data, parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)
    out.backward_fn = bw
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Overflow-safe: exp only ever sees non-positive arguments.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(a: Tensor) -> Tensor:
    sig = _sigmoid(a.data)
    out = Tensor(a.data * sig, parents=(a,))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * sig * (1.0 + a.data * (1.0 - sig)))
    out.backward_fn = bw
    return out


def mean_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.mean()), parents=(a,))

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / a.data.size, a.shape).astype(a.dtype))
    out.backward_fn = bw
    return out


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather: (V, D) table, integer idx (...,) -> (..., D)."""
    out = Tensor(table.data[idx], parents=(table,))

    def bw(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table._accumulate(acc)
    out.backward_fn = bw
    return out


def masked_mean(a: Tensor, mask: np.ndarray) -> Tensor:
    """(B, L, D) with 0/1 mask (B, L) -> (B, D) mean over unmasked positions."""
    m = mask.astype(a.dtype)
    count = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
    out = Tensor((a.data * m[..., None]).sum(axis=1) / count, parents=(a,))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g[:, None, :] * (m / count)[..., None])
    out.backward_fn = bw
    return out


def film(h: Tensor, s: Tensor, t: Tensor) -> Tensor:
    """Feature-wise affine modulation: h * (1 + s) + t, per-channel.

    h is (B, H, W, C); s and t are (B, C).
    """
    out = Tensor(h.data * (1.0 + s.data[:, None, None, :]) + t.data[:, None, None, :],
                 parents=(h, s, t))

    def bw(g):
        if h.requires_grad:
            h._accumulate(g * (1.0 + s.data[:, None, None, :]))
        if s.requires_grad:
            s._accumulate((g * h.data).sum(axis=(1, 2)))
        if t.requires_grad:
            t._accumulate(g.sum(axis=(1, 2)))
    out.backward_fn = bw
    return out


def upsample2(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling in NHWC."""
    out = Tensor(a.data.repeat(2, axis=1).repeat(2, axis=2), parents=(a,))

    def bw(g):
        if a.requires_grad:
            B, H2, W2, C = g.shape
            a._accumulate(g.reshape(B, H2 // 2, 2, W2 // 2, 2, C).sum(axis=(2, 4)))
    out.backward_fn = bw
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    ca = a.data.shape[-1]
    out = Tensor(np.concatenate([a.data, b.data], axis=-1), parents=(a, b))

    def bw(g):
        if a.requires_grad:
            a._accumulate(g[..., :ca])
        if b.requires_grad:
            b._accumulate(g[..., ca:])
    out.backward_fn = bw
    return out


def _shift_slices(xp: np.ndarray, H: int, W: int, stride: int):
    for ky in range(3):
        for kx in range(3):
            sl = xp[:, ky:ky + H:stride, kx:kx + W:stride, :]
            yield ky, kx, np.ascontiguousarray(sl).reshape(-1, xp.shape[-1])


def conv3x3(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution, padding 1, NHWC; weight (3, 3, Cin, Cout), bias (Cout,).

    Lowered to nine per-offset GEMMs accumulated into the output. The input
    gradient on stride 1 is the mirrored convolution of the output gradient,
    lowered the same way, which avoids strided scatter writes.
    """
    B, H, W, Cin = x.data.shape
    Cout = w.data.shape[-1]
    Ho, Wo = H // stride, W // stride
    m = B * Ho * Wo
    xp = np.zeros((B, H + 2, W + 2, Cin), dtype=x.dtype)
    xp[:, 1:H + 1, 1:W + 1, :] = x.data

    acc = np.empty((m, Cout), dtype=x.dtype)
    tmp = np.empty((m, Cout), dtype=x.dtype)
    first = True
    for ky, kx, sl in _shift_slices(xp, H, W, stride):
        if first:
            np.matmul(sl, w.data[ky, kx], out=acc)
            first = False
        else:
            np.matmul(sl, w.data[ky, kx], out=tmp)
            acc += tmp
    acc += b.data
    out = Tensor(acc.reshape(B, Ho, Wo, Cout), parents=(x, w, b))

    def bw(g):
        gm = np.ascontiguousarray(g).reshape(m, Cout)
        if b.requires_grad:
            b._accumulate(gm.sum(axis=0))
        if w.requires_grad:
            dw = np.empty_like(w.data)
            for ky, kx, sl in _shift_slices(xp, H, W, stride):
                np.matmul(sl.T, gm, out=dw[ky, kx])
            w._accumulate(dw)
        if x.requires_grad:
            if stride == 1:
                gp = np.zeros((B, H + 2, W + 2, Cout), dtype=g.dtype)
                gp[:, 1:H + 1, 1:W + 1, :] = gm.reshape(B, Ho, Wo, Cout)
                dx = np.empty((B * H * W, Cin), dtype=g.dtype)
                dtmp = np.empty_like(dx)
                first_k = True
                for ky in range(3):
                    for kx in range(3):
                        sl = gp[:, 2 - ky:2 - ky + H, 2 - kx:2 - kx + W, :]
                        sl = np.ascontiguousarray(sl).reshape(-1, Cout)
                        if first_k:
                            np.matmul(sl, w.data[ky, kx].T, out=dx)
                            first_k = False
                        else:
                            np.matmul(sl, w.data[ky, kx].T, out=dtmp)
                            dx += dtmp
                x._accumulate(dx.reshape(B, H, W, Cin))
            else:
                dxp = np.zeros_like(xp)
                gr = gm.reshape(B, Ho, Wo, Cout)
                for ky in range(3):
                    for kx in range(3):
                        dsl = (gr @ w.data[ky, kx].T)
                        dxp[:, ky:ky + H:stride, kx:kx + W:stride, :] += dsl
                x._accumulate(dxp[:, 1:H + 1, 1:W + 1, :])
    out.backward_fn = bw
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    d = sub(pred, as_tensor(target.astype(pred.dtype)))
    return mean_all(mul(d, d))


# ---------------------------------------------------------------------------
# Finite-difference checking

def finite_difference_gradients(loss_fn, params: dict[str, np.ndarray],
                                h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of loss_fn(params) for every entry."""
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn(params)
            flat[i] = orig - h
            lm = loss_fn(params)
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic: dict[str, np.ndarray],
                       numeric: dict[str, np.ndarray],
                       floor: float = 1e-8) -> float:
    worst = 0.0
    for name in analytic:
        a, n = analytic[name].reshape(-1), numeric[name].reshape(-1)
        denom = np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst
