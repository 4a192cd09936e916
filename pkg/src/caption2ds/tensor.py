"""Dense numerical kernels shared by the cells, decoder and interpretation code.

Tensors are plain ``numpy.ndarray`` values. Every kernel is a pure function
and accepts an optional leading batch axis where that makes sense
(``C×H×W`` or ``N×C×H×W``).
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray

FLOAT32 = np.float32
FLOAT64 = np.float64


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class RegionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def as_tensor(data, dtype=FLOAT64) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim and min(arr.shape) < 1:
        raise ShapeError(f"empty extent in shape {arr.shape}")
    return arr


def ravel_index(index, shape) -> int:
    """Row-major offset of ``index`` in an array of ``shape`` (last axis fastest)."""
    return int(np.ravel_multi_index(tuple(index), tuple(shape)))


def unravel_index(offset, shape) -> tuple[int, ...]:
    return tuple(int(i) for i in np.unravel_index(offset, tuple(shape)))


# -- convolution ------------------------------------------------------------

def _batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeError(f"expected {ndim}-d or batched input, got shape {x.shape}")


def same_padding(kh: int, kw: int) -> tuple[int, int]:
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel extents must be odd, got {kh}x{kw}")
    return (kh - 1) // 2, (kw - 1) // 2


def conv_output_size(size: int, k: int, pad: int, stride: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xb: Tensor, kh: int, kw: int, stride: int) -> Tensor:
    """``N×(C·kh·kw)×(H'·W')`` patch matrix of the zero-padded input."""
    n, c, h, w = xb.shape
    ph, pw = same_padding(kh, kw)
    ho, wo = conv_output_size(h, kh, ph, stride), conv_output_size(w, kw, pw, stride)
    padded = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # one strided slice copy per kernel tap is far cheaper than gathering 6-d windows
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xb.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = padded[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo), (ho, wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Zero-padded "same" cross-correlation.

    ``x`` is ``C_in×H×W`` (or batched), ``kernel`` is ``C_out×C_in×kh×kw``.
    With stride 1 the spatial extents are preserved.
    """
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    xb, squeeze = _batched(x, 3)
    c_out, c_in, kh, kw = kernel.shape
    if xb.shape[1] != c_in:
        raise ShapeError(f"input has {xb.shape[1]} channels, kernel expects {c_in}")
    cols, (ho, wo) = _im2col(xb, kh, kw, stride)
    out = np.matmul(kernel.reshape(c_out, -1), cols).reshape(xb.shape[0], c_out, ho, wo)
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
        out += bias[None, :, None, None]
    return out[0] if squeeze else out


def conv2d_grad_kernel(x: Tensor, grad_out: Tensor, kernel_shape, stride: int = 1) -> Tensor:
    xb, _ = _batched(x, 3)
    gb, _ = _batched(grad_out, 3)
    c_out, _, kh, kw = kernel_shape
    cols, _ = _im2col(xb, kh, kw, stride)
    g = gb.reshape(gb.shape[0], c_out, -1)
    return np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel_shape)


def conv2d_grad_input(grad_out: Tensor, kernel: Tensor, input_shape, stride: int = 1) -> Tensor:
    gb, squeeze = _batched(grad_out, 3)
    _, c_in, kh, kw = kernel.shape
    ph, pw = same_padding(kh, kw)
    if stride == 1:
        # transpose of a same-padded correlation is a correlation with the flipped kernel
        flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx = conv2d(gb, flipped)
        return dx[0] if squeeze else dx
    n = gb.shape[0]
    h, w = input_shape[-2:]
    ho, wo = gb.shape[2:]
    cols = np.tensordot(gb, kernel, axes=([1], [0]))  # N, H', W', C_in, kh, kw
    cols = cols.transpose(0, 3, 4, 5, 1, 2)
    dpad = np.zeros((n, c_in, h + 2 * ph, w + 2 * pw), dtype=gb.dtype)
    for i in range(kh):
        for j in range(kw):
            dpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    dx = dpad[:, :, ph:ph + h, pw:pw + w]
    return dx[0] if squeeze else dx


# -- pooling ----------------------------------------------------------------

def mean_pool_spatial(x: Tensor) -> Tensor:
    # same reduction as subregion_mean_pool so the full region matches bit for bit
    h, w = x.shape[-2:]
    return x.sum(axis=(-2, -1)) / (h * w)


def max_pool_spatial(x: Tensor) -> Tensor:
    return x.max(axis=(-2, -1))


def check_region(region, height: int, width: int) -> tuple[int, int, int, int]:
    """Validate a one-based inclusive ``(x1, y1, x2, y2)`` region."""
    try:
        x1, y1, x2, y2 = (int(v) for v in region)
    except (TypeError, ValueError) as exc:
        raise RegionError(f"region must be four integers, got {region!r}") from exc
    if not (1 <= x1 <= x2 <= width and 1 <= y1 <= y2 <= height):
        raise RegionError(f"region {region} invalid for a {height}x{width} map")
    return x1, y1, x2, y2


def region_slices(region, height: int, width: int) -> tuple[slice, slice]:
    x1, y1, x2, y2 = check_region(region, height, width)
    return slice(y1 - 1, y2), slice(x1 - 1, x2)


def subregion_mean_pool(x: Tensor, region) -> Tensor:
    rows, cols = region_slices(region, x.shape[-2], x.shape[-1])
    x1, y1, x2, y2 = region
    block = x[..., rows, cols]
    return block.sum(axis=(-2, -1)) / ((y2 - y1 + 1) * (x2 - x1 + 1))


def subregion_max_pool(x: Tensor, region) -> Tensor:
    rows, cols = region_slices(region, x.shape[-2], x.shape[-1])
    return x[..., rows, cols].max(axis=(-2, -1))


# -- dense ------------------------------------------------------------------

def linear(weight: Tensor, x: Tensor, bias: Tensor | None = None) -> Tensor:
    """``weight @ x + bias``; ``x`` may carry a leading batch axis."""
    if weight.shape[1] != x.shape[-1]:
        raise ShapeError(f"weight {weight.shape} incompatible with input {x.shape}")
    out = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return out


def softmax(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite values")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(x: Tensor) -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NumericError("log_softmax input contains non-finite values")
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# -- pointwise --------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


_UNARY = {
    "tanh": np.tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "one_minus": lambda x: 1 - x,
}
_BINARY = {
    "add": np.add,
    "hadamard": np.multiply,
}


def elementwise(op: str, *operands: Tensor) -> Tensor:
    if op in _UNARY:
        (x,) = operands
        return _UNARY[op](np.asarray(x))
    if op in _BINARY:
        a, b = (np.asarray(v) for v in operands)
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
        return _BINARY[op](a, b)
    raise ConfigError(f"unknown elementwise op {op!r}")


# -- bicubic resampling -----------------------------------------------------

KEYS_A = -0.5


def keys_kernel(t, a: float = KEYS_A):
    t = np.abs(np.asarray(t, dtype=FLOAT64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def bicubic_matrix(src: int, dst: int) -> Tensor:
    """Interpolation matrix ``dst×src`` for align-corners Keys resampling.

    Out-of-range taps are clamped to the edge samples.
    """
    mat = np.zeros((dst, src), dtype=FLOAT64)
    scale = (src - 1) / (dst - 1) if dst > 1 else 0.0
    for i in range(dst):
        pos = i * scale
        base = int(np.floor(pos))
        frac = pos - base
        for tap in range(-1, 3):
            weight = float(keys_kernel(tap - frac))
            if weight == 0.0:
                continue
            j = min(max(base + tap, 0), src - 1)
            mat[i, j] += weight
    return mat


def bicubic_resize(x: Tensor, target) -> Tensor:
    """Resize the last two axes of ``x`` to ``target = (H', W')``."""
    th, tw = (int(v) for v in target)
    if th < 1 or tw < 1:
        raise ShapeError(f"target extents must be >= 1, got {target}")
    h, w = x.shape[-2:]
    if (h, w) == (th, tw):
        return x.copy()
    ry = bicubic_matrix(h, th).astype(x.dtype)
    rx = bicubic_matrix(w, tw).astype(x.dtype)
    return ry @ x @ rx.T
