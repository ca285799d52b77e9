"""
Forward/backward primitives composed by the encoder, the aggregator and the
fusion head. All functions take and return `Tensor`s; constants may be numpy
arrays or Python scalars.
"""

from typing import Optional, Tuple

import numpy as np

from config.errors import DegenerateVector, ShapeMismatch
from neural.tensor import Tensor, as_tensor, make_result, unbroadcast

BN_EPS = 1e-6
LN_EPS = 1e-5
BN_MOMENTUM = 0.1
_GELU_C = np.sqrt(2.0 / np.pi)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeMismatch(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from e

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def relu(x: Tensor) -> Tensor:
    # gradient at exactly 0 is 0
    active = x.data > 0
    return make_result(np.where(active, x.data, 0).astype(x.dtype), (x,), lambda g: (g * active,))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    z = x.data
    inner = _GELU_C * (z + 0.044715 * z ** 3)
    t = np.tanh(inner)
    out = 0.5 * z * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * z ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t ** 2) * d_inner),)

    return make_result(out.astype(x.dtype), (x,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeMismatch(f"layernorm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = xc * inv_std
    out = x_hat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        g_hat = g * gamma.data
        gx = inv_std / n * (n * g_hat - g_hat.sum(axis=-1, keepdims=True)
                            - x_hat * (g_hat * x_hat).sum(axis=-1, keepdims=True))
        reduce_axes = tuple(range(x.ndim - 1))
        return gx, (g * x_hat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return make_result(out.astype(x.dtype), (x, gamma, beta), backward)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """
    Batch normalisation over axis 1 of a (B, C) or (B, C, H, W) input.

    Training uses batch statistics and updates the running arrays in place;
    inference normalises with the running statistics.
    """
    if x.ndim not in (2, 4) or x.shape[1] != gamma.shape[0]:
        raise ShapeMismatch(f"batchnorm: input {x.shape} with {gamma.shape[0]} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    view = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    count = int(np.prod([x.shape[a] for a in axes]))

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * count / max(count - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu.reshape(view)) * inv_std.reshape(view)
    out = x_hat * gamma.data.reshape(view) + beta.data.reshape(view)

    def backward(g):
        g_gamma = (g * x_hat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        g_hat = g * gamma.data.reshape(view)
        if training:
            gx = inv_std.reshape(view) / count * (
                count * g_hat
                - g_hat.sum(axis=axes).reshape(view)
                - x_hat * (g_hat * x_hat).sum(axis=axes).reshape(view)
            )
        else:
            gx = g_hat * inv_std.reshape(view)
        return gx, g_gamma, g_beta

    return make_result(out.astype(x.dtype), (x, gamma, beta), backward)


def _masked_logits(x: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        return x
    return np.where(mask, x, -np.inf)


def _stable_exp(z: np.ndarray, axis: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)  # fully masked rows
    e = np.exp(z - m)
    s = e.sum(axis=axis, keepdims=True)
    return m, e, s


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along `axis`; positions where `mask` is False get probability 0."""
    z = _masked_logits(x.data, mask)
    _, e, s = _stable_exp(z, axis)
    p = e / np.where(s > 0, s, 1.0)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_result(p.astype(x.dtype), (x,), backward)


def log_softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    z = _masked_logits(x.data, mask)
    m, e, s = _stable_exp(z, axis)
    safe_s = np.where(s > 0, s, 1.0)
    out = z - m - np.log(safe_s)
    p = e / safe_s

    def backward(g):
        g = np.where(np.isfinite(out), g, 0.0)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out.astype(x.dtype), (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p) so inference is the identity."""
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,))


def conv2d(x: Tensor, weight: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, no bias: (B,Ci,H,W) * (Co,Ci,3,3) -> (B,Co,H,W)."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2:] != (3, 3) or weight.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape} with kernel {weight.shape}")
    b, _, h, w = x.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((b, h, w, weight.shape[0]), dtype=x.dtype)
    for ki in range(3):
        for kj in range(3):
            window = padded[:, :, ki:ki + h, kj:kj + w]
            out += np.tensordot(window, weight.data[:, :, ki, kj], axes=([1], [1]))

    def backward(g):
        g_padded = np.zeros_like(padded)
        g_weight = np.zeros_like(weight.data)
        for ki in range(3):
            for kj in range(3):
                window = padded[:, :, ki:ki + h, kj:kj + w]
                g_weight[:, :, ki, kj] = np.tensordot(g, window, axes=([0, 2, 3], [0, 2, 3]))
                contrib = np.tensordot(g, weight.data[:, :, ki, kj], axes=([1], [0]))
                g_padded[:, :, ki:ki + h, kj:kj + w] += contrib.transpose(0, 3, 1, 2)
        return g_padded[:, :, 1:-1, 1:-1], g_weight

    return make_result(out.transpose(0, 3, 1, 2), (x, weight), backward)


def pooling_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Rows average the bins [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out))."""
    matrix = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        start = (i * n_in) // n_out
        end = -((-(i + 1) * n_in) // n_out)
        matrix[i, start:end] = 1.0 / (end - start)
    return matrix


def adaptive_avg_pool2d(x: Tensor, out: Tuple[int, int]) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatch(f"adaptive_avg_pool2d expects (B,C,H,W), got {x.shape}")
    p, q = out
    h, w = x.shape[2:]
    if p > h or q > w:
        raise ShapeMismatch(f"adaptive_avg_pool2d: target ({p},{q}) exceeds input ({h},{w})")
    rows = pooling_matrix(h, p, x.dtype)
    cols = pooling_matrix(w, q, x.dtype)
    pooled = np.matmul(rows, np.matmul(x.data, cols.T))

    def backward(g):
        return (np.matmul(rows.T, np.matmul(g, cols)),)

    return make_result(pooled, (x,), backward)


def normalize(x: Tensor, valid: Optional[np.ndarray] = None) -> Tensor:
    """
    Unit-normalise along the last axis. Rows where `valid` is False are
    returned as zeros; any other zero-norm row raises DegenerateVector.
    """
    norms = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    live = np.ones(norms.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)[..., None]
    if np.any(live & (norms == 0)):
        raise DegenerateVector("cannot normalise a zero-norm vector")
    safe = np.where(live, norms, 1.0)
    unit = np.where(live, x.data / safe, 0.0)

    def backward(g):
        proj = (g * unit).sum(axis=-1, keepdims=True)
        return (np.where(live, (g - unit * proj) / safe, 0.0),)

    return make_result(unit.astype(x.dtype), (x,), backward)


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    u, v = as_tensor(u), as_tensor(v, like=as_tensor(u))
    if u.shape != v.shape:
        raise ShapeMismatch(f"cosine_sim: {u.shape} vs {v.shape}")
    return (normalize(u) * normalize(v)).sum(axis=-1)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets over the batch."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape} with targets {targets.shape}")
    picked = log_softmax(logits, axis=-1)[np.arange(len(targets)), targets]
    return -picked.mean()
