"""Dense NCHW tensor kernels: forward/backward pairs for every layer the network needs.

Tensors are plain numpy arrays. Image tensors use (batch N, channels C,
height H, width W) layout. All kernels are pure: same inputs produce
bit-identical outputs, and each forward returns an opaque cache consumed
by its matching backward.

Convolution uses the cross-correlation convention (no kernel flip); only
the relative orientation of learned weights matters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

Array = np.ndarray


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator: identical seed, identical stream, any platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def he_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> Array:
    """Draw i.i.d. normal weights with std sqrt(2/fan_in)."""
    if fan_in < 1:
        raise ContractViolation(f"fan_in must be >= 1, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, std, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# caches


@dataclass
class ConvCache:
    x_padded: Array          # zero-padded input, needed for the weight gradient
    weights: Array
    padding: str
    input_shape: tuple


@dataclass
class ReluCache:
    mask: Array              # True where input > 0


@dataclass
class PoolCache:
    argmax: Array            # (N, C, H/2, W/2) flat index into each 2x2 window
    input_shape: tuple


@dataclass
class UpconvCache:
    x: Array
    weights: Array


@dataclass
class ConcatCache:
    channels_a: int


# ---------------------------------------------------------------------------
# conv2d


def _check_nchw(x: Array, name: str = "input") -> None:
    if x.ndim != 4:
        raise ContractViolation(f"{name} must be 4-D NCHW, got {x.ndim}-D shape {x.shape}")


def _conv_windows(x_padded: Array, k: int) -> Array:
    # zero-copy view (N, C, Ho, Wo, k, k) over the padded input
    return np.lib.stride_tricks.sliding_window_view(x_padded, (k, k), axis=(2, 3))


def conv2d_forward(x: Array, weights: Array, bias: Array, padding: str = "same"):
    """Stride-1 cross-correlation with a 3x3 or 1x1 kernel.

    `same` zero-pads so H, W are preserved; `valid` shrinks 3x3 outputs by 2.
    Returns (output, cache).
    """
    _check_nchw(x)
    if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
        raise ContractViolation(f"weights must be OxIxKxK, got shape {weights.shape}")
    out_c, in_c, k, _ = weights.shape
    if k not in (1, 3):
        raise ContractViolation(f"kernel size must be 1 or 3, got {k}")
    if x.shape[1] != in_c:
        raise ContractViolation(
            f"input channels {x.shape[1]} do not match weight InC {in_c}")
    if bias.shape != (out_c,):
        raise ContractViolation(f"bias shape {bias.shape} must be ({out_c},)")
    if padding not in ("same", "valid"):
        raise ContractViolation(f"padding must be 'same' or 'valid', got {padding!r}")
    pad = k // 2 if padding == "same" else 0
    if padding == "valid" and (x.shape[2] < k or x.shape[3] < k):
        raise ContractViolation(
            f"valid padding needs H,W >= {k}, got {x.shape[2]}x{x.shape[3]}")

    if pad:
        x_padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        x_padded = x
    windows = _conv_windows(x_padded, k)
    # im2col GEMM: (N*Ho*Wo, C*k*k) @ (C*k*k, O)
    n, _, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, in_c * k * k)
    y = cols @ weights.reshape(out_c, -1).T
    y = y.reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2) + bias[None, :, None, None]
    cache = ConvCache(x_padded=x_padded, weights=weights, padding=padding,
                      input_shape=x.shape)
    return np.ascontiguousarray(y), cache


def conv2d_backward(cache: ConvCache, grad_out: Array):
    """Adjoints of conv2d_forward. Returns (grad_input, grad_weights, grad_bias)."""
    if not isinstance(cache, ConvCache):
        raise ContractViolation(f"cache/layer mismatch: expected ConvCache, got {type(cache).__name__}")
    w = cache.weights
    out_c, in_c, k, _ = w.shape
    _check_nchw(grad_out, "grad_out")
    if grad_out.shape[1] != out_c:
        raise ContractViolation(
            f"grad_out channels {grad_out.shape[1]} do not match OutC {out_c}")

    grad_bias = grad_out.sum(axis=(0, 2, 3))

    windows = _conv_windows(cache.x_padded, k)
    n, _, ho, wo = windows.shape[:4]
    if grad_out.shape[2:] != (ho, wo):
        raise ContractViolation(
            f"grad_out spatial {grad_out.shape[2:]} does not match forward output {(ho, wo)}")
    go_cols = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, out_c)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, in_c * k * k)
    grad_w = (go_cols.T @ cols).reshape(w.shape)

    # grad wrt input: full correlation of grad_out with the 180-degree
    # rotated, channel-transposed kernel
    pad = k // 2 if cache.padding == "same" else 0
    gpad = k - 1 - pad
    if gpad:
        go_padded = np.pad(grad_out, ((0, 0), (0, 0), (gpad, gpad), (gpad, gpad)))
    else:
        go_padded = grad_out
    go_windows = _conv_windows(go_padded, k)
    hi, wi = go_windows.shape[2], go_windows.shape[3]
    go_cols2 = go_windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * hi * wi, out_c * k * k)
    w_rot = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (InC, OutC, k, k)
    grad_x = go_cols2 @ w_rot.reshape(in_c, -1).T
    grad_x = grad_x.reshape(n, hi, wi, in_c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(grad_x), grad_w, grad_bias


# ---------------------------------------------------------------------------
# relu


def relu_forward(x: Array):
    """Elementwise max(x, 0)."""
    mask = x > 0
    return np.where(mask, x, 0), ReluCache(mask=mask)


def relu_backward(cache: ReluCache, grad_out: Array) -> Array:
    if not isinstance(cache, ReluCache):
        raise ContractViolation(f"cache/layer mismatch: expected ReluCache, got {type(cache).__name__}")
    if grad_out.shape != cache.mask.shape:
        raise ContractViolation(
            f"grad_out shape {grad_out.shape} does not match forward shape {cache.mask.shape}")
    return np.where(cache.mask, grad_out, 0)


# ---------------------------------------------------------------------------
# 2x2 max pooling, stride 2


def maxpool2_forward(x: Array):
    """Disjoint 2x2 window max; H and W must be even.

    The cache records each window's argmax; ties break to the first element
    in row-major scan order.
    """
    _check_nchw(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractViolation(f"maxpool2 needs even H and W, got {h}x{w}")
    tiles = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = tiles.reshape(n, c, h // 2, w // 2, 4)
    argmax = flat.argmax(axis=-1)  # first max wins: row-major tie break
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), PoolCache(argmax=argmax, input_shape=x.shape)


def maxpool2_backward(cache: PoolCache, grad_out: Array) -> Array:
    if not isinstance(cache, PoolCache):
        raise ContractViolation(f"cache/layer mismatch: expected PoolCache, got {type(cache).__name__}")
    n, c, h, w = cache.input_shape
    if grad_out.shape != (n, c, h // 2, w // 2):
        raise ContractViolation(
            f"grad_out shape {grad_out.shape} does not match pooled shape {(n, c, h // 2, w // 2)}")
    flat = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(flat, cache.argmax[..., None], grad_out[..., None], axis=-1)
    grad_x = flat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(grad_x.reshape(n, c, h, w))


# ---------------------------------------------------------------------------
# 2x2 stride-2 transposed convolution


def upconv2_forward(x: Array, weights: Array, bias: Array):
    """Each input pixel scatters a 2x2 weighted block; output is 2H x 2W.

    Exact adjoint of a 2x2 stride-2 convolution. Weights are (InC, OutC, 2, 2).
    """
    _check_nchw(x)
    if weights.ndim != 4 or weights.shape[2:] != (2, 2):
        raise ContractViolation(f"upconv weights must be InCxOutCx2x2, got {weights.shape}")
    in_c, out_c = weights.shape[:2]
    if x.shape[1] != in_c:
        raise ContractViolation(
            f"input channels {x.shape[1]} do not match weight InC {in_c}")
    if bias.shape != (out_c,):
        raise ContractViolation(f"bias shape {bias.shape} must be ({out_c},)")
    n, _, h, w = x.shape
    # (N,C,H,W) x (C,O,2,2) -> (N,H,W,O,2,2); stride 2 makes the blocks disjoint
    blocks = np.tensordot(x, weights, axes=([1], [0]))
    y = blocks.transpose(0, 3, 1, 4, 2, 5).reshape(n, out_c, 2 * h, 2 * w)
    y = y + bias[None, :, None, None]
    return np.ascontiguousarray(y), UpconvCache(x=x, weights=weights)


def upconv2_backward(cache: UpconvCache, grad_out: Array):
    """Returns (grad_input, grad_weights, grad_bias)."""
    if not isinstance(cache, UpconvCache):
        raise ContractViolation(f"cache/layer mismatch: expected UpconvCache, got {type(cache).__name__}")
    x, w = cache.x, cache.weights
    in_c, out_c = w.shape[:2]
    n, _, h, wd = x.shape
    if grad_out.shape != (n, out_c, 2 * h, 2 * wd):
        raise ContractViolation(
            f"grad_out shape {grad_out.shape} does not match {(n, out_c, 2 * h, 2 * wd)}")
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    blocks = grad_out.reshape(n, out_c, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5)
    # blocks: (N,H,W,O,2,2)
    grad_x = np.tensordot(blocks, w, axes=([3, 4, 5], [1, 2, 3]))  # (N,H,W,InC)
    grad_x = grad_x.transpose(0, 3, 1, 2)
    grad_w = np.tensordot(x, blocks, axes=([0, 2, 3], [0, 1, 2]))  # (InC,O,2,2)
    return np.ascontiguousarray(grad_x), grad_w, grad_bias


# ---------------------------------------------------------------------------
# channel concatenation


def concat_channels(a: Array, b: Array):
    """Channels of a followed by channels of b; N, H, W must agree."""
    _check_nchw(a, "a")
    _check_nchw(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ContractViolation(
            f"batch/spatial mismatch: {a.shape} vs {b.shape}")
    out = np.concatenate([a, b], axis=1)
    return out, ConcatCache(channels_a=a.shape[1])


def concat_backward(cache: ConcatCache, grad_out: Array):
    """Splits the gradient back into (grad_a, grad_b)."""
    if not isinstance(cache, ConcatCache):
        raise ContractViolation(f"cache/layer mismatch: expected ConcatCache, got {type(cache).__name__}")
    ca = cache.channels_a
    return grad_out[:, :ca].copy(), grad_out[:, ca:].copy()


# ---------------------------------------------------------------------------
# loss


def mse_loss(pred: Array, target: Array):
    """Mean squared error and its gradient w.r.t. pred.

    loss = mean((pred-target)^2), grad = 2/M * (pred-target).
    The reduction accumulates in double precision.
    """
    if pred.shape != target.shape:
        raise ContractViolation(
            f"pred shape {pred.shape} does not match target shape {target.shape}")
    diff = pred - target
    m = diff.size
    loss = float(np.sum(diff.astype(np.float64) ** 2) / m)
    grad = (2.0 / m) * diff
    return loss, grad
