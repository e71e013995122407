"""Forward/backward kernels for the standard layers.

All sequence layers take ``[B, D, T]`` arrays with channels on axis 1.
Backward functions return gradients in the order of the forward arguments.
"""

from __future__ import annotations

import numpy as np


# --- linear ---------------------------------------------------------------

def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Channel-axis affine map: w is [out, in], x is [N, in, ...]."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"linear expects {w.shape[1]} input channels, got {x.shape[1]}")
    N, rest = x.shape[0], x.shape[2:]
    y = np.matmul(w, x.reshape(N, x.shape[1], -1)).reshape((N, w.shape[0]) + rest)
    if b is not None:
        y = y + b.reshape((1, -1) + (1,) * (x.ndim - 2))
    return y


def linear_bwd(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    N = dy.shape[0]
    dx = np.matmul(w.T, dy.reshape(N, dy.shape[1], -1)).reshape(x.shape)
    other = [0] + list(range(2, x.ndim))
    dw = np.tensordot(dy, x, axes=(other, other))
    db = dy.sum(axis=tuple(other))
    return dx, dw, db


# --- layer norm over channels ---------------------------------------------

def layernorm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Normalize each token over the channel axis; returns (y, cache)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    shape = (1, -1) + (1,) * (x.ndim - 2)
    return xhat * gamma.reshape(shape) + beta.reshape(shape), (xhat, inv, gamma)


def layernorm_bwd(dy: np.ndarray, cache):
    xhat, inv, gamma = cache
    other = (0,) + tuple(range(2, dy.ndim))
    dgamma = (dy * xhat).sum(axis=other)
    dbeta = dy.sum(axis=other)
    g = dy * gamma.reshape((1, -1) + (1,) * (dy.ndim - 2))
    dx = inv * (g - g.mean(axis=1, keepdims=True) - xhat * (g * xhat).mean(axis=1, keepdims=True))
    return dx, dgamma, dbeta


# --- pointwise ------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu_fwd(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def silu_bwd(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = _sigmoid(x)
    return dy * s * (1.0 + x * (1.0 - s))


def softplus_fwd(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus_bwd(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * _sigmoid(x)


# --- depthwise causal conv over folded segments ---------------------------

def _segments(x: np.ndarray, seg_len: int) -> np.ndarray:
    N, D, T = x.shape
    if T % seg_len:
        raise ValueError(f"sequence length {T} is not a multiple of segment length {seg_len}")
    return x.reshape(N, D, T // seg_len, seg_len)


def dwconv1d_folded(x: np.ndarray, kernel: np.ndarray, seg_len: int,
                    bias: np.ndarray | None = None) -> np.ndarray:
    """Causal depthwise conv applied independently inside each segment.

    out[n, d, tau] = sum_k kernel[d, k] * x[n, d, tau - K + 1 + k], with taps
    before the start of tau's segment reading zero.
    """
    if kernel.ndim != 2 or kernel.shape[0] != x.shape[1]:
        raise ValueError(f"kernel must be [D={x.shape[1]}, K], got {kernel.shape}")
    K = kernel.shape[1]
    if K < 1:
        raise ValueError("kernel width must be >= 1")
    xs = _segments(x, seg_len)
    N, D, G, L = xs.shape
    xp = np.concatenate([np.zeros((N, D, G, K - 1), x.dtype), xs], axis=3)
    out = np.zeros_like(xs)
    for k in range(K):
        out += kernel[None, :, None, k:k + 1] * xp[..., k:k + L]
    out = out.reshape(x.shape)
    if bias is not None:
        out = out + bias[None, :, None]
    return out


def dwconv1d_folded_bwd(dy: np.ndarray, x: np.ndarray, kernel: np.ndarray, seg_len: int):
    """Returns (dx, dkernel, dbias)."""
    K = kernel.shape[1]
    xs = _segments(x, seg_len)
    dys = _segments(dy, seg_len)
    N, D, G, L = xs.shape
    xp = np.concatenate([np.zeros((N, D, G, K - 1), x.dtype), xs], axis=3)
    dxp = np.zeros_like(xp)
    dk = np.empty_like(kernel)
    for k in range(K):
        dk[:, k] = np.einsum("ndgl,ndgl->d", dys, xp[..., k:k + L])
        dxp[..., k:k + L] += kernel[None, :, None, k:k + 1] * dys
    dx = dxp[..., K - 1:].reshape(x.shape)
    return dx, dk, dy.sum(axis=(0, 2))


# --- multi-head self-attention --------------------------------------------

def _softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def mha_fwd(x: np.ndarray, p: dict, heads: int):
    """Full (non-causal) scaled dot-product self-attention over the T axis.

    ``p`` holds wq, wk, wv, wo ([D, D]) and bq, bk, bv, bo ([D]).
    Returns (y, cache).
    """
    B, D, T = x.shape
    if D % heads:
        raise ValueError(f"channels {D} not divisible by {heads} heads")
    dh = D // heads
    q = linear_fwd(x, p["wq"], p["bq"]).reshape(B, heads, dh, T)
    k = linear_fwd(x, p["wk"], p["bk"]).reshape(B, heads, dh, T)
    v = linear_fwd(x, p["wv"], p["bv"]).reshape(B, heads, dh, T)
    scale = 1.0 / np.sqrt(dh)
    attn = _softmax(np.einsum("bhct,bhcu->bhtu", q, k) * scale)
    o = np.einsum("bhtu,bhcu->bhct", attn, v).reshape(B, D, T)
    y = linear_fwd(o, p["wo"], p["bo"])
    return y, (x, q, k, v, attn, o, scale)


def mha_bwd(dy: np.ndarray, cache, p: dict):
    """Returns (dx, grads) with grads keyed like ``p``."""
    x, q, k, v, attn, o, scale = cache
    B, H, dh, T = q.shape
    do, dwo, dbo = linear_bwd(dy, o, p["wo"])
    do = do.reshape(B, H, dh, T)
    dattn = np.einsum("bhct,bhcu->bhtu", do, v)
    dv = np.einsum("bhtu,bhct->bhcu", attn, do)
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
    dq = np.einsum("bhtu,bhcu->bhct", ds, k)
    dk = np.einsum("bhtu,bhct->bhcu", ds, q)
    grads = {"wo": dwo, "bo": dbo}
    dx = np.zeros_like(x)
    for name, g in (("q", dq), ("k", dk), ("v", dv)):
        dxi, grads["w" + name], grads["b" + name] = linear_bwd(g.reshape(B, H * dh, T), x, p["w" + name])
        dx += dxi
    return dx, grads


# --- 2-D convolution (stem / conv stages) ---------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # [N, C, Ho, Wo, kh, kw]


def conv2d_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0):
    """x [N, C, H, W], w [O, C, kh, kw] -> [N, O, Ho, Wo]."""
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d expects {w.shape[1]} channels, got {x.shape[1]}")
    cols = _im2col(x, w.shape[2], w.shape[3], stride, pad)
    y = np.einsum("nchwij,ocij->nohw", cols, w, optimize=True)
    return y + b[None, :, None, None]


def conv2d_bwd(dy: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0):
    O, C, kh, kw = w.shape
    cols = _im2col(x, kh, kw, stride, pad)
    dw = np.einsum("nohw,nchwij->ocij", dy, cols, optimize=True)
    db = dy.sum(axis=(0, 2, 3))
    N, _, H, W = x.shape
    dxp = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
    Ho, Wo = dy.shape[2:]
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += np.einsum(
                "nohw,oc->nchw", dy, w[:, :, i, j])
    dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
    return dx, dw, db


# --- loss -----------------------------------------------------------------

def cross_entropy_fwd(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy over a [N, classes] batch; returns (loss, probs)."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    return float(-logp[np.arange(n), labels].mean()), np.exp(logp)


def cross_entropy_bwd(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)
