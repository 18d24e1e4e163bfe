"""Linear measurement operators and the data-consistency machinery.

Two operators are provided:

* :class:`MaskedFourierOperator` -- unitary FFT followed by restriction to a
  sampling mask (single-coil MRI). Images are complex arrays whose trailing
  dimensions equal the mask shape; k-space is kept center-shifted so the mask
  reads like a picture of the sampling pattern.
* :class:`BoxDownsampleOperator` -- averaging over non-overlapping
  ``factor x factor`` blocks per channel (superresolution).

Both accept arbitrary leading batch dimensions.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .tensor_core import ShapeError

__all__ = [
    "SamplingMask",
    "MaskedFourierOperator",
    "BoxDownsampleOperator",
    "generate_mask",
    "nullspace_filter",
    "data_consistency",
    "approx_deconvolve",
    "complex_to_channels",
    "channels_to_complex",
]


def complex_to_channels(z: np.ndarray, dtype=np.float64) -> np.ndarray:
    """``[B, H, W]`` complex -> ``[B, 2, H, W]`` real (real, imaginary)."""
    return np.stack([z.real, z.imag], axis=1).astype(dtype, copy=False)


def channels_to_complex(t: np.ndarray) -> np.ndarray:
    if t.ndim < 2 or t.shape[1] != 2:
        raise ShapeError(f"expected a two-channel [B, 2, ...] tensor, got shape {t.shape}")
    return t[:, 0] + 1j * t[:, 1]


# ---------------------------------------------------------------------------
# Sampling masks
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SamplingMask:
    included: np.ndarray
    fraction: float

    def __post_init__(self):
        if self.included.dtype != bool:
            object.__setattr__(self, "included", self.included.astype(bool))
        if not 0 < self.fraction <= 1:
            raise ValueError(f"fraction must be in (0, 1], got {self.fraction}")

    @property
    def shape(self):
        return self.included.shape

    @property
    def count(self) -> int:
        return int(self.included.sum())

    @property
    def mask_id(self) -> str:
        """Content hash; stable across save/load."""
        h = hashlib.sha256()
        h.update(np.asarray(self.shape, dtype="<u4").tobytes())
        h.update(np.packbits(self.included.reshape(-1)).tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        return (
            isinstance(other, SamplingMask)
            and self.shape == other.shape
            and bool(np.array_equal(self.included, other.included))
            and self.fraction == other.fraction
        )


def _calibration_slices(shape, calib_size):
    return tuple(slice(n // 2 - calib_size // 2, n // 2 - calib_size // 2 + calib_size) for n in shape)


def _radial_distance(shape) -> np.ndarray:
    grids = np.meshgrid(*[(np.arange(n) - n // 2) / (n / 2) for n in shape], indexing="ij")
    r = np.sqrt(sum(g * g for g in grids))
    return r / r.max()


def generate_mask(
    H: int,
    W: int,
    fraction: float,
    decay_power: float = 3.0,
    calib_size: int | None = None,
    seed: int = 0,
) -> SamplingMask:
    """Variable-density random mask with a fully sampled center block.

    Inclusion probability falls off as ``(1 - r) ** decay_power`` with ``r``
    the distance from the k-space center normalized to 1 at the corners. After
    the Bernoulli draw the count is corrected to exactly ``ceil(fraction*H*W)``
    by adding (or dropping) points drawn with density-proportional weights.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if calib_size is None:
        calib_size = math.ceil(min(H, W) / 8)
    if calib_size > min(H, W):
        raise ValueError(f"calib_size {calib_size} exceeds image size {H}x{W}")
    target = math.ceil(fraction * H * W - 1e-9)
    if target < calib_size * calib_size:
        raise ValueError(
            f"fraction {fraction} gives {target} samples, fewer than the {calib_size}x{calib_size} calibration block"
        )
    if target >= H * W:
        return SamplingMask(np.ones((H, W), bool), fraction)

    rng = np.random.default_rng(seed)
    density = (1.0 - _radial_distance((H, W))) ** decay_power
    calib = np.zeros((H, W), bool)
    calib[_calibration_slices((H, W), calib_size)] = True

    # scale so the expected count over the free region matches what is left
    free = ~calib
    need = target - calib.sum()
    prob = np.zeros((H, W))
    lo, hi = 0.0, need / max(density[free].sum(), 1e-300) * 4 + 1
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if np.minimum(density[free] * mid, 1).sum() < need:
            lo = mid
        else:
            hi = mid
    prob[free] = np.minimum(density[free] * hi, 1)

    mask = calib | (rng.random((H, W)) < prob)
    surplus = int(mask.sum()) - target
    if surplus > 0:
        cand = np.flatnonzero(mask & free)
        w = 1.0 - prob.reshape(-1)[cand] + 1e-12
        drop = rng.choice(cand, size=surplus, replace=False, p=w / w.sum())
        mask.reshape(-1)[drop] = False
    elif surplus < 0:
        cand = np.flatnonzero(~mask)
        w = density.reshape(-1)[cand] + 1e-12
        add = rng.choice(cand, size=-surplus, replace=False, p=w / w.sum())
        mask.reshape(-1)[add] = True
    return SamplingMask(mask, fraction)


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------


class MaskedFourierOperator:
    """``y = S F x`` with unitary (orthonormal) FFT scaling.

    Measurements are the sampled k-space values in row-major mask order,
    shape ``[..., M]`` with ``M = mask.count``.
    """

    is_complex = True

    def __init__(self, mask: SamplingMask):
        self.mask = mask
        self._axes = tuple(range(-mask.included.ndim, 0))

    @property
    def image_shape(self):
        return self.mask.shape

    @property
    def measurement_shape(self):
        return (self.mask.count,)

    def _check_image(self, x):
        nd = len(self._axes)
        if x.shape[x.ndim - nd :] != self.mask.shape:
            raise ShapeError(f"image trailing shape {x.shape[x.ndim - nd:]} does not match mask {self.mask.shape}")

    def _check_measurement(self, y):
        if y.shape[-1:] != (self.mask.count,):
            raise ShapeError(f"measurement length {y.shape[-1:]} does not match {self.mask.count} samples")

    def kspace(self, x: np.ndarray) -> np.ndarray:
        """Full centered k-space of ``x``."""
        self._check_image(x)
        return np.fft.fftshift(np.fft.fftn(x, axes=self._axes, norm="ortho"), axes=self._axes)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.kspace(x)[..., self.mask.included]

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        self._check_measurement(y)
        k = np.zeros(y.shape[:-1] + self.mask.shape, dtype=np.result_type(y.dtype, np.complex64))
        k[..., self.mask.included] = y
        return np.fft.ifftn(np.fft.ifftshift(k, axes=self._axes), axes=self._axes, norm="ortho")

    def normal(self, x: np.ndarray) -> np.ndarray:
        """``Phi^H Phi x`` without materializing the measurement vector."""
        k = self.kspace(x)
        k *= self.mask.included
        return np.fft.ifftn(np.fft.ifftshift(k, axes=self._axes), axes=self._axes, norm="ortho")

    # network tensors are real two-channel [B, 2, H, W]
    def from_channels(self, t: np.ndarray) -> np.ndarray:
        return channels_to_complex(t)

    def to_channels(self, z: np.ndarray, dtype=np.float64) -> np.ndarray:
        return complex_to_channels(z, dtype)


class BoxDownsampleOperator:
    """Per-channel mean over non-overlapping ``factor x factor`` blocks.

    Equivalent to a channel-diagonal convolution with a constant kernel
    ``1 / factor**2`` and stride ``factor``; the adjoint is the matching
    transposed convolution.
    """

    is_complex = False

    def __init__(self, factor: int = 4, channels: int = 3):
        if factor < 1:
            raise ValueError("factor must be >= 1")
        self.factor = factor
        self.channels = channels

    def _check_image(self, x):
        if x.ndim < 3 or x.shape[-3] != self.channels:
            raise ShapeError(f"expected [..., {self.channels}, H, W] image, got shape {x.shape}")
        if x.shape[-1] % self.factor or x.shape[-2] % self.factor:
            raise ShapeError(f"image size {x.shape[-2:]} not divisible by factor {self.factor}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check_image(x)
        f = self.factor
        *lead, C, H, W = x.shape
        return x.reshape(*lead, C, H // f, f, W // f, f).mean(axis=(-3, -1))

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        if y.ndim < 3 or y.shape[-3] != self.channels:
            raise ShapeError(f"expected [..., {self.channels}, h, w] measurement, got shape {y.shape}")
        f = self.factor
        return np.repeat(np.repeat(y, f, axis=-2), f, axis=-1) / (f * f)

    def normal(self, x: np.ndarray) -> np.ndarray:
        return self.adjoint(self.forward(x))

    def from_channels(self, t):
        return t

    def to_channels(self, x, dtype=np.float64):
        return x.astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# Gradient-step primitives
# ---------------------------------------------------------------------------


def nullspace_filter(op, x: np.ndarray, alpha: float) -> np.ndarray:
    """``(I - alpha Phi^H Phi) x``."""
    return x - alpha * op.normal(x)


def data_consistency(op, x: np.ndarray, y: np.ndarray, alpha: float) -> np.ndarray:
    """One gradient step on ``0.5 * ||y - Phi x||^2`` with step ``alpha``.

    For the masked-Fourier operator and ``alpha = 1`` this overwrites the
    sampled k-space entries of ``x`` with ``y``.
    """
    return x + alpha * op.adjoint(y - op.forward(x))


def approx_deconvolve(op: BoxDownsampleOperator, y: np.ndarray, steps: int = 5, step_size: float = 0.1):
    """Approximate pseudo-inverse of the box operator by plain gradient descent.

    Starts from the replicated low-resolution image ``factor**2 * Phi^H y``
    (each low-res pixel copied over its block) and takes ``steps`` steps of
    size ``step_size`` on ``0.5 * ||y - Phi x||^2``.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    x = op.adjoint(y) * (op.factor * op.factor)
    for _ in range(steps):
        x = x + step_size * op.adjoint(y - op.forward(x))
    return x
