"""Dense-array layers with hand-written reverse-mode gradients.

Tensors are plain :class:`numpy.ndarray` objects in ``[B, C, H, W]`` layout.
Every differentiable op comes as a ``*_forward`` / ``*_backward`` pair; the
forward variants used by the networks also return a cache so the backward
pass does not redo the expensive im2col work.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "ConvLayerParams",
    "BatchNormParams",
    "AdamState",
    "conv_output_size",
    "conv2d_forward",
    "conv2d_backward",
    "transpose_conv2d_forward",
    "transpose_conv2d_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "activation",
    "activation_backward",
    "adam_step",
    "finite_diff_gradcheck",
    "he_normal",
]


class ShapeError(ValueError):
    """Raised when array dimensions do not line up."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where it must not."""


def he_normal(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    """Zero-mean Gaussian with std ``sqrt(2 / fan_in)``; ``shape`` is ``[out, in, kh, kw]``."""
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvLayerParams:
    kernels: np.ndarray  # [out_channels, in_channels, kh, kw]
    bias: np.ndarray | None = None  # [out_channels]
    stride: int = 1
    padding: str = "same-zero"

    def __post_init__(self):
        if self.kernels.ndim != 4:
            raise ShapeError(f"kernels must be 4-d [out, in, kh, kw], got shape {self.kernels.shape}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding not in ("same-zero", "valid"):
            raise ValueError(f"padding must be 'same-zero' or 'valid', got {self.padding!r}")
        if self.bias is not None and self.bias.shape != (self.kernels.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.kernels.shape[0]} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    def pads(self) -> tuple[int, int, int, int]:
        """(top, bottom, left, right) zero padding."""
        if self.padding == "valid":
            return 0, 0, 0, 0
        kh, kw = self.kernels.shape[2:]
        top, left = (kh - 1) // 2, (kw - 1) // 2
        return top, kh - 1 - top, left, kw - 1 - left


def conv_output_size(size: int, kernel: int, stride: int, pad_total: int) -> int:
    return (size + pad_total - kernel) // stride + 1


def _check_conv_input(x: np.ndarray, params: ConvLayerParams):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be [B, C, H, W], got shape {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"conv input has {x.shape[1]} channels but kernels expect {params.in_channels}"
        )
    top, bottom, left, right = params.pads()
    kh, kw = params.kernels.shape[2:]
    if x.shape[2] + top + bottom < kh or x.shape[3] + left + right < kw:
        raise ShapeError(f"input spatial size {x.shape[2:]} smaller than kernel {kh}x{kw}")


def _im2col(x: np.ndarray, params: ConvLayerParams) -> tuple[np.ndarray, tuple[int, int]]:
    """Patch matrix of shape ``[B*Ho*Wo, C*kh*kw]`` plus the output size."""
    top, bottom, left, right = params.pads()
    kh, kw = params.kernels.shape[2:]
    s = params.stride
    if top or bottom or left or right:
        x = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    B, C, Hp, Wp = x.shape
    Ho = (Hp - kh) // s + 1
    Wo = (Wp - kw) // s + 1
    if kh == 1 and kw == 1:
        view = x[:, :, : (Ho - 1) * s + 1 : s, : (Wo - 1) * s + 1 : s]
        return view.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, C), (Ho, Wo)
    cols = np.empty((B, Ho, Wo, C, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[..., i, j] = x[:, :, i : i + (Ho - 1) * s + 1 : s, j : j + (Wo - 1) * s + 1 : s].transpose(
                0, 2, 3, 1
            )
    return cols.reshape(B * Ho * Wo, C * kh * kw), (Ho, Wo)


def _col2im(dcols: np.ndarray, x_shape, params: ConvLayerParams, out_hw) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patch gradients back to the input grid."""
    B, C, H, W = x_shape
    top, bottom, left, right = params.pads()
    kh, kw = params.kernels.shape[2:]
    s = params.stride
    Ho, Wo = out_hw
    Hp, Wp = H + top + bottom, W + left + right
    if kh == 1 and kw == 1:
        g = dcols.reshape(B, Ho, Wo, C).transpose(0, 3, 1, 2)
        if s == 1 and not (top or left):
            return np.ascontiguousarray(g)
        dx = np.zeros((B, C, Hp, Wp), dtype=dcols.dtype)
        dx[:, :, : (Ho - 1) * s + 1 : s, : (Wo - 1) * s + 1 : s] = g
    else:
        d = dcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dx = np.zeros((B, C, Hp, Wp), dtype=dcols.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + (Ho - 1) * s + 1 : s, j : j + (Wo - 1) * s + 1 : s] += d[..., i, j]
    return dx[:, :, top : top + H, left : left + W]


def conv2d_forward_cached(x: np.ndarray, params: ConvLayerParams):
    """Like :func:`conv2d_forward` but also returns ``(cols, out_hw)`` for the backward pass."""
    _check_conv_input(x, params)
    cols, (Ho, Wo) = _im2col(x, params)
    wmat = params.kernels.reshape(params.out_channels, -1)
    out = cols @ wmat.T
    if params.bias is not None:
        out += params.bias
    out = out.reshape(x.shape[0], Ho, Wo, params.out_channels).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, (Ho, Wo))


def conv2d_forward(x: np.ndarray, params: ConvLayerParams) -> np.ndarray:
    """2-d cross-correlation, ``[B, C, H, W] -> [B, C', H', W']``.

    With ``"same-zero"`` padding the output size is ``ceil(H / stride)``, so a
    stride of one preserves the spatial size. ``"valid"`` uses no padding.
    """
    return conv2d_forward_cached(x, params)[0]


def conv2d_backward_cached(x_shape, params: ConvLayerParams, grad_out: np.ndarray, cache, need_input=True):
    cols, (Ho, Wo) = cache
    B = x_shape[0]
    expected = (B, params.out_channels, Ho, Wo)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match conv output {expected}")
    gmat = grad_out.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, params.out_channels)
    grad_kernels = (gmat.T @ cols).reshape(params.kernels.shape)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_input = None
    if need_input:
        dcols = gmat @ params.kernels.reshape(params.out_channels, -1)
        grad_input = _col2im(dcols, x_shape, params, (Ho, Wo))
    return grad_input, grad_kernels, grad_bias


def conv2d_backward(x: np.ndarray, params: ConvLayerParams, grad_out: np.ndarray):
    """Gradients of ``sum(grad_out * conv2d_forward(x, params))``.

    Returns
    -------
    grad_input, grad_kernels, grad_bias
    """
    _check_conv_input(x, params)
    cache = _im2col(x, params)
    return conv2d_backward_cached(x.shape, params, grad_out, cache)


def _transpose_geometry(y: np.ndarray, params: ConvLayerParams, output_size):
    if y.ndim != 4:
        raise ShapeError(f"transpose conv input must be [B, C, H, W], got shape {y.shape}")
    if y.shape[1] != params.out_channels:
        raise ShapeError(
            f"transpose conv input has {y.shape[1]} channels, kernels provide {params.out_channels}"
        )
    top, bottom, left, right = params.pads()
    kh, kw = params.kernels.shape[2:]
    s = params.stride
    if output_size is None:
        output_size = ((y.shape[2] - 1) * s + kh - top - bottom, (y.shape[3] - 1) * s + kw - left - right)
    H, W = output_size
    if (
        conv_output_size(H, kh, s, top + bottom) != y.shape[2]
        or conv_output_size(W, kw, s, left + right) != y.shape[3]
    ):
        raise ShapeError(f"output size {output_size} inconsistent with input {y.shape[2:]} at stride {s}")
    return (y.shape[0], params.in_channels, H, W)


def transpose_conv2d_forward(
    y: np.ndarray, params: ConvLayerParams, output_size=None, bias: np.ndarray | None = None
) -> np.ndarray:
    """Adjoint of the bias-free :func:`conv2d_forward` for the same ``params``.

    Maps ``[B, out_channels, Ho, Wo]`` to ``[B, in_channels, H, W]``; with
    stride ``s`` this upsamples by ``s``. ``params.bias`` is ignored, pass
    ``bias`` (length ``in_channels``) to add one. ``output_size`` resolves the
    size ambiguity of strided "same" convolutions.
    """
    x_shape = _transpose_geometry(y, params, output_size)
    B, _, Ho, Wo = y.shape
    gmat = y.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, params.out_channels)
    dcols = gmat @ params.kernels.reshape(params.out_channels, -1)
    out = _col2im(dcols, x_shape, params, (Ho, Wo))
    if bias is not None:
        out = out + bias[None, :, None, None]
    return np.ascontiguousarray(out)


def transpose_conv2d_backward(y: np.ndarray, params: ConvLayerParams, grad_out: np.ndarray):
    """Gradients ``(grad_input, grad_kernels, grad_bias)`` of the transposed convolution."""
    x_shape = _transpose_geometry(y, params, grad_out.shape[2:])
    if grad_out.shape != x_shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match output {x_shape}")
    nobias = ConvLayerParams(params.kernels, None, params.stride, params.padding)
    grad_input = conv2d_forward(grad_out, nobias)
    # d<y, conv(g)>/dK: same as the conv kernel gradient with roles swapped.
    _, grad_kernels, _ = conv2d_backward(grad_out, nobias, y)
    return grad_input, grad_kernels, grad_out.sum(axis=(0, 2, 3))


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormParams:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.9
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float64, **kw) -> "BatchNormParams":
        return cls(
            scale=np.ones(channels, dtype),
            shift=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")


def batchnorm_forward_cached(x: np.ndarray, params: BatchNormParams):
    if x.ndim != 4:
        raise ShapeError(f"batchnorm input must be [B, C, H, W], got shape {x.shape}")
    if x.shape[0] == 0:
        raise ShapeError("batchnorm needs a non-empty batch")
    if x.shape[1] != params.scale.shape[0]:
        raise ShapeError(f"batchnorm input has {x.shape[1]} channels, params have {params.scale.shape[0]}")
    if params.mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        centered = x - mean[None, :, None, None]
        var = np.mean(centered * centered, axis=(0, 2, 3))
        n = x.size // x.shape[1]
        unbiased = var * (n / (n - 1)) if n > 1 else var
        m = params.momentum
        params.running_mean[...] = m * params.running_mean + (1 - m) * mean
        params.running_var[...] = m * params.running_var + (1 - m) * unbiased
    else:
        mean, var = params.running_mean, params.running_var
        centered = x - mean[None, :, None, None]
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    xhat = centered * inv_std[None, :, None, None]
    out = xhat * params.scale[None, :, None, None] + params.shift[None, :, None, None]
    return out, (xhat, inv_std, params.mode)


def batchnorm_forward(x: np.ndarray, params: BatchNormParams) -> np.ndarray:
    """Per-channel normalization followed by ``scale * xhat + shift``.

    Train mode normalizes with batch statistics and updates the running
    estimates (``running = momentum * running + (1 - momentum) * batch``);
    eval mode normalizes with the running estimates and leaves them alone.
    """
    return batchnorm_forward_cached(x, params)[0]


def batchnorm_backward_cached(params: BatchNormParams, grad_out: np.ndarray, cache):
    xhat, inv_std, mode = cache
    grad_scale = np.sum(grad_out * xhat, axis=(0, 2, 3))
    grad_shift = grad_out.sum(axis=(0, 2, 3))
    g = grad_out * params.scale[None, :, None, None]
    if mode == "train":
        n = grad_out.size // grad_out.shape[1]
        g_mean = grad_shift[None, :, None, None] * params.scale[None, :, None, None] / n
        gx_mean = (grad_scale * params.scale)[None, :, None, None] / n
        grad_input = (g - g_mean - xhat * gx_mean) * inv_std[None, :, None, None]
    else:
        grad_input = g * inv_std[None, :, None, None]
    return grad_input, grad_scale, grad_shift


def batchnorm_backward(x: np.ndarray, params: BatchNormParams, grad_out: np.ndarray):
    """Gradients ``(grad_input, grad_scale, grad_shift)``.

    Recomputes the forward statistics on a copy of ``params`` so the running
    estimates are not touched twice.
    """
    probe = BatchNormParams(
        params.scale,
        params.shift,
        params.running_mean.copy(),
        params.running_var.copy(),
        params.epsilon,
        params.momentum,
        params.mode,
    )
    _, cache = batchnorm_forward_cached(x, probe)
    return batchnorm_backward_cached(params, grad_out, cache)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "sigmoid":
        return _sigmoid(np.asarray(x))
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(output: np.ndarray, grad_out: np.ndarray, kind: str) -> np.ndarray:
    """Input gradient expressed through the forward *output*."""
    if kind == "relu":
        return grad_out * (output > 0)
    if kind == "sigmoid":
        return grad_out * output * (1 - output)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    learning_rate: float = 1e-4
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: list, grads: list, state: AdamState) -> tuple[list, AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Raises :class:`NonFiniteError` before touching anything if a gradient
    contains NaN or Inf.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError("params, grads and optimizer state must have equal length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeError(f"param {i}: shape {p.shape} vs gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {i}; step rejected")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_gradcheck(
    fn: Callable[[np.ndarray], float],
    point: np.ndarray,
    h: float = 1e-6,
    grad: np.ndarray | None = None,
    floor: float = 1e-7,
) -> float:
    """Max elementwise relative error between an analytic and a central-difference gradient.

    ``fn`` maps an array to a scalar. If ``grad`` is omitted, ``fn`` must
    return ``(value, gradient)`` instead and the gradient at ``point`` is used.
    The relative error of entry ``i`` is ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``.
    """
    point = np.array(point, dtype=np.float64)
    if grad is None:
        _, grad = fn(point)
        scalar = lambda z: fn(z)[0]  # noqa: E731
    else:
        scalar = fn
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != point.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match point {point.shape}")
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(scalar(point))
        flat[i] = old - h
        fm = float(scalar(point))
        flat[i] = old
        nflat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), floor)
    return float(np.max(np.abs(grad - numeric) / denom)) if grad.size else 0.0
