"""Forward kernels on plain float64 numpy arrays.

Every function here is pure: inputs are never modified and the result is a
fresh array. Leading batch dimensions are allowed wherever it makes sense.
"""

import math

import numpy as np
from scipy.special import erf

__all__ = [
    "DimensionError",
    "WindowError",
    "DegenerateStatsError",
    "as_tensor",
    "linear_forward",
    "conv1d_forward",
    "conv1d_windows",
    "adain",
    "adain_stats",
    "pool_matrix",
    "adaptive_avg_pool1d",
    "adaptive_avg_pool2d",
    "gelu",
    "gelu_grad",
    "log_softmax",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class WindowError(ValueError):
    """Convolution window does not fit inside the padded input."""


class DegenerateStatsError(ValueError):
    """Statistics requested over fewer than two samples."""


def as_tensor(x):
    return np.asarray(x, dtype=np.float64)


def linear_forward(x, W, b):
    """``out[..., j] = sum_i x[..., i] * W[i, j] + b[j]``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(
            f"linear: x{tuple(x.shape)} incompatible with W{tuple(W.shape)}, b{tuple(b.shape)}"
        )
    return x @ W + b


def _conv_out_len(L, k, stride, pad):
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if k > L + 2 * pad:
        raise WindowError(f"kernel width {k} exceeds padded length {L + 2 * pad}")
    return (L + 2 * pad - k) // stride + 1


def conv1d_windows(x, k, stride=1, pad=0):
    """Strided view ``[..., c_in, L_out, k]`` over the zero-padded input."""
    x = as_tensor(x)
    _conv_out_len(x.shape[-1], k, stride, pad)
    if pad:
        widths = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
        x = np.pad(x, widths)
    win = np.lib.stride_tricks.sliding_window_view(x, k, axis=-1)
    return win[..., ::stride, :]


def conv1d_forward(x, K, bias, stride=1, pad=0):
    """Cross-correlation of ``x[..., c_in, L]`` with ``K[c_out, c_in, k]``."""
    x, K, bias = as_tensor(x), as_tensor(K), as_tensor(bias)
    if K.ndim != 3 or x.ndim < 2 or x.shape[-2] != K.shape[1] or bias.shape != (K.shape[0],):
        raise DimensionError(
            f"conv1d: x{tuple(x.shape)} incompatible with K{tuple(K.shape)}, bias{tuple(bias.shape)}"
        )
    win = conv1d_windows(x, K.shape[2], stride, pad)
    out = np.swapaxes(np.tensordot(win, K, axes=([-3, -1], [1, 2])), -1, -2)
    return out + bias[:, None]


def adain_stats(x):
    """Per-channel mean and population std over the token axis (-2)."""
    x = as_tensor(x)
    if x.shape[-2] < 2:
        raise DegenerateStatsError(f"need at least 2 tokens for statistics, got {x.shape[-2]}")
    mu = x.mean(axis=-2, keepdims=True)
    sigma = np.sqrt(((x - mu) ** 2).mean(axis=-2, keepdims=True))
    # a channel that is constant up to summation rounding has sigma exactly 0
    noise = 4 * x.shape[-2] * np.finfo(np.float64).eps * np.abs(x).max(axis=-2, keepdims=True)
    return mu, np.where(sigma <= noise, 0.0, sigma)


def adain(content, style, eps=1e-5):
    """Re-normalise ``content[..., T, D]`` to the per-channel statistics of ``style``."""
    content, style = as_tensor(content), as_tensor(style)
    if content.shape != style.shape:
        raise DimensionError(f"adain: content{content.shape} != style{style.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu_c, sd_c = adain_stats(content)
    mu_s, sd_s = adain_stats(style)
    return sd_s * (content - mu_c) / (sd_c + eps) + mu_s


def pool_matrix(L, out_len):
    """Averaging matrix ``M[out_len, L]`` with floor/ceil window bounds."""
    if out_len < 1 or L < 1:
        raise ValueError(f"invalid pooling lengths L={L}, out_len={out_len}")
    M = np.zeros((out_len, L))
    for i in range(out_len):
        lo = (i * L) // out_len
        hi = -((-(i + 1) * L) // out_len)
        M[i, lo:hi] = 1.0 / (hi - lo)
    return M


def adaptive_avg_pool1d(x, out_len):
    x = as_tensor(x)
    return x @ pool_matrix(x.shape[-1], out_len).T


def adaptive_avg_pool2d(x, out_h, out_w=None):
    """Separable adaptive pooling over the last two axes."""
    out_w = out_h if out_w is None else out_w
    x = np.asarray(x)
    H, W = x.shape[-2:]
    if H % out_h == 0 and W % out_w == 0 and x.dtype != np.float64:
        # equal blocks: block means straight from the (possibly integer) input
        blocks = x.reshape(x.shape[:-2] + (out_h, H // out_h, out_w, W // out_w))
        return blocks.mean(axis=(-3, -1), dtype=np.float64)
    x = as_tensor(x)
    Mh = pool_matrix(H, out_h)
    Mw = pool_matrix(W, out_w)
    return Mh @ x @ Mw.T


_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    x = as_tensor(x)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    x = as_tensor(x)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def log_softmax(z):
    z = as_tensor(z)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
