"""Sparse-coding baselines: shrinkage, Haar wavelets, TV prox, ISTA/FISTA, CG.

All solvers minimize ``0.5 * ||y - Phi x||^2 + reg_weight * R(x)`` where
``R`` is the l1 norm of the Haar coefficients, the anisotropic total
variation, or the plain l1 norm of the pixels. With the unitary operators in
:mod:`unrolled_cs.operators` the data term has Lipschitz constant at most 1,
so ``step = 1`` is admissible.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor_core import ShapeError

log = logging.getLogger(__name__)

__all__ = [
    "SparsityConfig",
    "SolverTrace",
    "DivergenceError",
    "CGBreakdown",
    "soft_threshold",
    "wavelet_forward",
    "wavelet_inverse",
    "total_variation",
    "tv_prox",
    "objective",
    "ista",
    "fista",
    "conjugate_gradient",
    "tune_reg_weight",
]


class DivergenceError(RuntimeError):
    pass


class CGBreakdown(ArithmeticError):
    pass


@dataclass
class SparsityConfig:
    """Regularizer choice for the classical solvers.

    ``continuation`` (a factor in (0, 1)) turns on a homotopy: the threshold
    starts at ``reg_start`` (default: half the largest transform coefficient of
    ``Phi^H y``) and shrinks geometrically per iteration down to
    ``reg_weight``.
    """

    transform: str = "wavelet"
    reg_weight: float = 1e-3
    wavelet_levels: int = 3
    tv_iters: int = 50
    continuation: float | None = None
    reg_start: float | None = None

    def __post_init__(self):
        if self.transform not in ("wavelet", "tv", "identity"):
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be non-negative")
        if self.wavelet_levels < 1:
            raise ValueError("wavelet_levels must be positive")
        if self.continuation is not None and not 0 < self.continuation < 1:
            raise ValueError("continuation factor must lie in (0, 1)")


@dataclass
class SolverTrace:
    objective: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    monotone_violations: list = field(default_factory=list)

    def __len__(self):
        return len(self.objective)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "objective", "residual"])
            for i, (f, r) in enumerate(zip(self.objective, self.residual), 1):
                w.writerow([i, repr(float(f)), repr(float(r))])


# ---------------------------------------------------------------------------
# Proximal building blocks
# ---------------------------------------------------------------------------


def soft_threshold(x: np.ndarray, tau: float) -> np.ndarray:
    """Prox of ``tau * ||.||_1``; complex entries keep their phase."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    x = np.asarray(x)
    if tau == 0:
        return x.copy()
    if np.iscomplexobj(x):
        mag = np.abs(x)
        scale = np.maximum(mag - tau, 0) / np.where(mag > 0, mag, 1)
        return x * scale
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0)


_SQRT_HALF = 1 / math.sqrt(2)


def _haar_step(x, axis):
    lo = x.take(np.arange(0, x.shape[axis], 2), axis=axis)
    hi = x.take(np.arange(1, x.shape[axis], 2), axis=axis)
    return np.concatenate([(lo + hi) * _SQRT_HALF, (lo - hi) * _SQRT_HALF], axis=axis)


def _ihaar_step(c, axis):
    n = c.shape[axis] // 2
    a = c.take(np.arange(n), axis=axis)
    d = c.take(np.arange(n, 2 * n), axis=axis)
    out = np.empty_like(c)
    even = [slice(None)] * c.ndim
    odd = [slice(None)] * c.ndim
    even[axis] = slice(0, None, 2)
    odd[axis] = slice(1, None, 2)
    out[tuple(even)] = (a + d) * _SQRT_HALF
    out[tuple(odd)] = (a - d) * _SQRT_HALF
    return out


def _check_dyadic(shape, levels):
    for n in shape:
        if n % (1 << levels):
            raise ShapeError(f"size {n} not divisible by 2**{levels}")


def wavelet_forward(x: np.ndarray, levels: int = 3, ndim: int = 2) -> np.ndarray:
    """Orthonormal multilevel Haar transform over the last ``ndim`` axes.

    Coefficients are stored in the usual pyramid layout: the coarse
    approximation occupies the leading ``n / 2**levels`` corner.
    """
    axes = list(range(-ndim, 0))
    _check_dyadic(x.shape[-ndim:], levels)
    c = np.array(x, copy=True)
    for lev in range(levels):
        region = (Ellipsis,) + tuple(slice(0, n >> lev) for n in x.shape[-ndim:])
        block = c[region]
        for ax in axes:
            block = _haar_step(block, ax)
        c[region] = block
    return c


def wavelet_inverse(c: np.ndarray, levels: int = 3, ndim: int = 2) -> np.ndarray:
    axes = list(range(-ndim, 0))
    _check_dyadic(c.shape[-ndim:], levels)
    x = np.array(c, copy=True)
    for lev in reversed(range(levels)):
        region = (Ellipsis,) + tuple(slice(0, n >> lev) for n in c.shape[-ndim:])
        block = x[region]
        for ax in reversed(axes):
            block = _ihaar_step(block, ax)
        x[region] = block
    return x


def _grad(x, ndim):
    return [np.roll(x, -1, axis=ax) - x for ax in range(-ndim, 0)]


def _grad_adjoint(p, ndim):
    # D^T for periodic forward differences
    return sum(np.roll(q, 1, axis=ax) - q for q, ax in zip(p, range(-ndim, 0)))


def total_variation(x: np.ndarray, ndim: int | None = None) -> float:
    """Anisotropic TV with periodic forward differences."""
    ndim = min(x.ndim, 2) if ndim is None else ndim
    return float(sum(np.abs(g).sum() for g in _grad(x, ndim)))


def tv_prox(z: np.ndarray, weight: float, inner_iters: int = 50, step: float = 0.25, ndim: int | None = None):
    """Approximate ``argmin_x 0.5||x - z||^2 + weight * TV(x)``.

    Projected gradient on the dual (Chambolle-style). The dual variable has one
    component per differenced axis and is projected onto the unit modulus ball
    elementwise, which handles real and complex images alike.
    """
    if weight < 0:
        raise ValueError("weight must be non-negative")
    z = np.asarray(z)
    if weight == 0 or inner_iters == 0:
        return z.copy()
    ndim = min(z.ndim, 2) if ndim is None else ndim
    p = [np.zeros_like(z) for _ in range(ndim)]
    x = z
    for _ in range(inner_iters):
        g = _grad(x, ndim)
        for q, gq in zip(p, g):
            q += (step / weight) * gq
            mag = np.abs(q)
            np.divide(q, np.maximum(mag, 1.0), out=q)
        x = z - weight * _grad_adjoint(p, ndim)
    return x


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------


def _image_ndim(op):
    shape = getattr(op, "image_shape", None)
    return len(shape) if shape is not None else 2


def _regularizer(config: SparsityConfig, x, ndim):
    if config.transform == "wavelet":
        return float(np.abs(wavelet_forward(x, config.wavelet_levels, ndim)).sum())
    if config.transform == "tv":
        return total_variation(x, ndim)
    return float(np.abs(x).sum())


def _prox(config: SparsityConfig, z, tau, ndim):
    if config.transform == "wavelet":
        c = soft_threshold(wavelet_forward(z, config.wavelet_levels, ndim), tau)
        return wavelet_inverse(c, config.wavelet_levels, ndim)
    if config.transform == "tv":
        return tv_prox(z, tau, config.tv_iters, ndim=ndim)
    return soft_threshold(z, tau)


def objective(op, y, x, config: SparsityConfig, reg_weight: float | None = None) -> float:
    reg = config.reg_weight if reg_weight is None else reg_weight
    r = y - op.forward(x)
    return 0.5 * float(np.vdot(r, r).real) + reg * _regularizer(config, x, _image_ndim(op))


def _reg_schedule(op, y, config: SparsityConfig, ndim):
    if config.continuation is None:
        return lambda k: config.reg_weight
    start = config.reg_start
    if start is None:
        zf = op.adjoint(y)
        coeffs = wavelet_forward(zf, config.wavelet_levels, ndim) if config.transform == "wavelet" else zf
        start = 0.5 * float(np.max(np.abs(coeffs)))
    start = max(start, config.reg_weight)
    return lambda k: max(start * config.continuation**k, config.reg_weight)


def _record(trace, op, y, x, config, reg, keep_snapshots):
    r = y - op.forward(x)
    res = math.sqrt(float(np.vdot(r, r).real))
    trace.residual.append(res)
    trace.objective.append(0.5 * res * res + reg * _regularizer(config, x, _image_ndim(op)))
    if keep_snapshots:
        trace.snapshots.append(x.copy())


def _check_divergence(trace, f0):
    f = trace.objective[-1]
    if not math.isfinite(f) or f > 10 * max(f0, 1e-300) + 1e-12:
        raise DivergenceError(f"objective blew up to {f:.3e} at iteration {len(trace)} (start {f0:.3e})")


def ista(op, y, config: SparsityConfig, step: float = 1.0, iters: int = 100, x0=None, keep_snapshots=False, mono_tol=1e-10):
    """Iterative soft-thresholding: ``x <- prox(x + step * Phi^H (y - Phi x))``.

    Returns ``(x, trace)``. Objective increases larger than ``mono_tol``
    (relative) are logged in ``trace.monotone_violations``; a blow-up past ten
    times the starting objective raises :class:`DivergenceError`.
    """
    ndim = _image_ndim(op)
    x = op.adjoint(y) * 0 if x0 is None else np.array(x0, copy=True)
    reg_at = _reg_schedule(op, y, config, ndim)
    f0 = objective(op, y, x, config, reg_at(0))
    trace = SolverTrace()
    prev = f0
    for k in range(iters):
        reg = reg_at(k)
        x = _prox(config, x + step * op.adjoint(y - op.forward(x)), step * reg, ndim)
        _record(trace, op, y, x, config, reg, keep_snapshots)
        _check_divergence(trace, f0)
        f = trace.objective[-1]
        if config.continuation is None and f > prev + mono_tol * max(1.0, abs(prev)):
            trace.monotone_violations.append(k + 1)
            log.warning("ISTA objective increased at iteration %d: %.6e -> %.6e", k + 1, prev, f)
        prev = f
    return x, trace


def fista(op, y, config: SparsityConfig, step: float = 1.0, iters: int = 100, x0=None, keep_snapshots=False):
    """ISTA with Nesterov momentum, ``t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2``."""
    ndim = _image_ndim(op)
    x = op.adjoint(y) * 0 if x0 is None else np.array(x0, copy=True)
    reg_at = _reg_schedule(op, y, config, ndim)
    f0 = objective(op, y, x, config, reg_at(0))
    z = x
    t = 1.0
    trace = SolverTrace()
    for k in range(iters):
        reg = reg_at(k)
        x_new = _prox(config, z + step * op.adjoint(y - op.forward(z)), step * reg, ndim)
        t_new = (1 + math.sqrt(1 + 4 * t * t)) / 2
        z = x_new + ((t - 1) / t_new) * (x_new - x)
        x, t = x_new, t_new
        _record(trace, op, y, x, config, reg, keep_snapshots)
        _check_divergence(trace, f0)
    return x, trace


def conjugate_gradient(
    apply_normal: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    iters: int = 100,
    tol: float = 1e-10,
    x0: np.ndarray | None = None,
    variant: str = "residual",
):
    """Krylov solver for Hermitian positive definite ``A x = rhs``.

    ``variant="residual"`` (conjugate residual) minimizes ``||A x - rhs||``
    over the Krylov space, so the residual norm never increases;
    ``variant="classic"`` is textbook CG, which minimizes the A-norm of the
    error instead. Iteration stops once the residual norm drops to ``tol``.

    Returns ``(x, residual_norms)`` where ``residual_norms[0]`` is the
    starting residual.
    """
    if variant not in ("residual", "classic"):
        raise ValueError(f"unknown variant {variant!r}")
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, copy=True)
    r = rhs - apply_normal(x)
    norms = [float(np.linalg.norm(r))]
    if norms[0] <= tol:
        return x, norms
    p = r.copy()
    if variant == "classic":
        rr = np.vdot(r, r).real
        for _ in range(iters):
            Ap = apply_normal(p)
            denom = np.vdot(p, Ap).real
            if denom <= 0 or not math.isfinite(denom):
                raise CGBreakdown(f"non-positive curvature p^H A p = {denom}")
            a = rr / denom
            x = x + a * p
            r = r - a * Ap
            rr_new = np.vdot(r, r).real
            norms.append(math.sqrt(rr_new))
            if norms[-1] <= tol:
                break
            p = r + (rr_new / rr) * p
            rr = rr_new
        return x, norms
    Ar = apply_normal(r)
    Ap = Ar.copy()
    rAr = np.vdot(r, Ar).real
    for _ in range(iters):
        denom = np.vdot(Ap, Ap).real
        if denom == 0 or not math.isfinite(denom):
            raise CGBreakdown("zero denominator ||A p||^2")
        a = rAr / denom
        x = x + a * p
        r = r - a * Ap
        norms.append(float(np.linalg.norm(r)))
        if norms[-1] <= tol:
            break
        Ar = apply_normal(r)
        rAr_new = np.vdot(r, Ar).real
        if rAr == 0:
            raise CGBreakdown("zero denominator r^H A r")
        b = rAr_new / rAr
        p = r + b * p
        Ap = Ar + b * Ap
        rAr = rAr_new
    return x, norms


# ---------------------------------------------------------------------------
# Weight selection
# ---------------------------------------------------------------------------


def tune_reg_weight(score: Callable[[float], float], lo: float = 1e-5, hi: float = 1.0, grid: int = 11, golden_iters: int = 12):
    """Maximize ``score(reg_weight)`` over a log grid, then refine by golden section.

    Returns ``(best_weight, best_score)``.
    """
    exps = np.linspace(math.log10(lo), math.log10(hi), grid)
    cache = {}

    def f(e):
        e = float(e)
        if e not in cache:
            cache[e] = score(10.0**e)
        return cache[e]

    vals = [f(e) for e in exps]
    i = int(np.argmax(vals))
    a = exps[max(i - 1, 0)]
    b = exps[min(i + 1, grid - 1)]
    invphi = (math.sqrt(5) - 1) / 2
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    for _ in range(golden_iters):
        if f(c) >= f(d):
            b, d = d, c
            c = b - invphi * (b - a)
        else:
            a, c = c, d
            d = a + invphi * (b - a)
    best = max(cache, key=lambda e: (cache[e], -e))
    return 10.0**best, cache[best]
