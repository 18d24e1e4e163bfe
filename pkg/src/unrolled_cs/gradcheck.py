"""Finite-difference verification of every hand-written backward pass.

Each check builds a small double-precision instance with a random linear
read-out ``L = sum(w * f(x))`` (or the real training loss for the
end-to-end case), and compares analytic gradients with central
differences at sampled coordinates.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .layers import Activation, BatchNorm2d, Conv2d
from .operators import MaskedFourierOperator, generate_mask
from .tensor_core import ConvLayerParams, transpose_conv2d_backward, transpose_conv2d_forward
from .unrolled import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    ResidualBlock,
    UnrolledModel,
    magnitude_input,
    magnitude_input_backward,
)

__all__ = ["CheckResult", "run_suite", "check_module", "check_unrolled_loss", "THRESHOLD"]

THRESHOLD = 1e-4
KINK_MARGIN = 1e-3
F64 = np.float64


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    coords: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < THRESHOLD


def _rel(a, n, floor):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _central(loss, flat, i, h):
    """Richardson-extrapolated central difference, truncation error O(h^4)."""
    old = flat[i]
    d = []
    for step in (h, h / 2):
        flat[i] = old + step
        fp = loss()
        flat[i] = old - step
        fm = loss()
        d.append((fp - fm) / (2 * step))
    flat[i] = old
    return (4 * d[1] - d[0]) / 3


def _probe(loss, arrays, grads, rng, max_coords, h, floor):
    """Central differences of ``loss()`` w.r.t. sampled entries of each array (perturbed in place).

    A coordinate that fails at step ``h`` is re-probed at ``h / 10`` and
    ``h / 100``: the interval may straddle a ReLU kink, which a genuine
    backward bug would not escape by shrinking the step.
    """
    worst, count = 0.0, 0
    for arr, g in zip(arrays, grads):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        idx = np.arange(flat.size) if flat.size <= max_coords else rng.choice(flat.size, max_coords, replace=False)
        for i in idx:
            err = float(_rel(gflat[i], _central(loss, flat, i, h), floor))
            for shrink in (10, 100):
                if err < THRESHOLD:
                    break
                err = min(err, float(_rel(gflat[i], _central(loss, flat, i, h / shrink), floor)))
            worst = max(worst, err)
            count += 1
    return worst, count


@contextmanager
def _relu_margin():
    """Record the smallest ``|input|`` seen by any ReLU while active."""
    seen = [np.inf]
    original = Activation.forward

    def forward(self, x):
        if self.kind == "relu" and x.size:
            seen[0] = min(seen[0], float(np.abs(x).min()))
        return original(self, x)

    Activation.forward = forward
    try:
        yield seen
    finally:
        Activation.forward = original


def _jitter_biases(params, rng):
    # zero-initialized biases put dead ReLU units exactly on the kink
    for p in params:
        if p.name.endswith((".bias", ".shift")):
            p.value[...] = 0.1 * rng.standard_normal(p.value.shape)


def check_module(name, module, x, rng, max_coords=30, h=1e-4, floor=1e-5, jitter=True) -> CheckResult:
    """Parameters and input of a layer-like object with ``forward``/``backward``."""
    t0 = time.perf_counter()
    if jitter:
        _jitter_biases(module.parameters(), rng)
    out, _ = module.forward(x)
    w = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(w * module.forward(x)[0]))

    module.zero_grad()
    _, cache = module.forward(x)
    gx = module.backward(cache, w)
    params = module.parameters()
    arrays = [x] + [p.value for p in params]
    grads = [gx] + [p.grad.copy() for p in params]
    err, n = _probe(loss, arrays, grads, rng, max_coords, h, floor)
    return CheckResult(name, err, n, time.perf_counter() - t0)


def _check_transpose_conv(rng) -> CheckResult:
    t0 = time.perf_counter()
    p = ConvLayerParams(rng.standard_normal((4, 3, 3, 3)), None, stride=2)
    y = rng.standard_normal((2, 4, 4, 4))
    out = transpose_conv2d_forward(y, p, output_size=(8, 8))
    w = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(w * transpose_conv2d_forward(y, p, output_size=(8, 8))))

    gy, gk, _ = transpose_conv2d_backward(y, p, w)
    err, n = _probe(loss, [y, p.kernels], [gy, gk], rng, 40, 1e-4, 1e-5)
    return CheckResult("transpose_conv2d", err, n, time.perf_counter() - t0)


def _check_magnitude(rng) -> CheckResult:
    t0 = time.perf_counter()
    x = rng.random((2, 2, 5, 5))
    w = rng.standard_normal((2, 1, 5, 5))

    def loss():
        return float(np.sum(w * magnitude_input(x)[0]))

    _, cache = magnitude_input(x)
    g = magnitude_input_backward(cache, w)
    err, n = _probe(loss, [x], [g], rng, 50, 1e-4, 1e-5)
    return CheckResult("magnitude_input", err, n, time.perf_counter() - t0)


def _check_discriminator(rng) -> CheckResult:
    # BN in training mode couples the batch; redraw inputs that sit on a ReLU kink
    for _ in range(200):
        d = Discriminator(DiscriminatorConfig(in_channels=1, dtype="float64"), rng)
        _jitter_biases(d.parameters(), rng)
        x = rng.random((3, 1, 16, 16))
        with _relu_margin() as margin:
            d.forward(x)
        if margin[0] > KINK_MARGIN:
            break
    # strong BN curvature with three samples per channel: O(h^2) truncation needs a smaller step
    return check_module("discriminator", d, x, rng, max_coords=15, h=1e-5, jitter=False)


def check_unrolled_loss(rng, copies=2, blocks=1, size=8, weight_mode="shared", gamma=0.5, max_coords=25) -> CheckResult:
    """The generator training loss through all copies, DC steps and step sizes.

    Instances with a ReLU input closer than ``KINK_MARGIN`` to zero are
    redrawn, since no finite step can difference across a kink.
    """
    from .training import LossWeights, generator_loss

    t0 = time.perf_counter()
    weights = LossWeights(lam=0.0, eta=1.0, gamma=gamma)
    for _ in range(200):
        op = MaskedFourierOperator(generate_mask(size, size, 0.5, seed=int(rng.integers(1 << 16))))
        cfg = GeneratorConfig(blocks, 4, 2, 2, dtype="float64")
        model = UnrolledModel(op, copies, cfg, weight_mode=weight_mode, seed=int(rng.integers(1 << 16)))
        _jitter_biases(model.parameters(), rng)
        for k, a in enumerate(model.alpha_raw):
            a.value[0] = 0.8 + 0.1 * k
        truth = rng.random((2, size, size)) + 1j * rng.random((2, size, size))
        y = op.forward(truth)
        x_tilde = op.to_channels(op.adjoint(y))
        x_truth = op.to_channels(truth)
        with _relu_margin() as margin:
            model.forward(y, x_tilde, keep_cache=False)
        if margin[0] > KINK_MARGIN:
            break

    def loss():
        x_hat, inter = model.forward(y, x_tilde, keep_cache=False)
        return generator_loss(y, inter, x_hat, x_truth, None, weights, op).total

    model.zero_grad()
    x_hat, inter = model.forward(y, x_tilde)
    terms = generator_loss(y, inter, x_hat, x_truth, None, weights, op)
    model.backward(terms.grad_xhat, terms.grad_intermediates)
    params = model.parameters()
    grads = [p.grad.copy() for p in params]
    err, n = _probe(loss, [p.value for p in params], grads, rng, max_coords, 1e-4, 1e-5)
    return CheckResult(f"unrolled_loss[K={copies},RB={blocks},{weight_mode}]", err, n, time.perf_counter() - t0)


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    x = rng.standard_normal((2, 3, 7, 6))
    results.append(check_module("conv2d[3x3,s1]", Conv2d("c", 3, 4, 3, rng, dtype=F64), x, rng))
    results.append(check_module("conv2d[3x3,s2]", Conv2d("c", 3, 4, 3, rng, stride=2, dtype=F64), x, rng))
    results.append(check_module("conv2d[1x1]", Conv2d("c", 3, 2, 1, rng, dtype=F64), x, rng))
    results.append(_check_transpose_conv(rng))
    bn = BatchNorm2d("bn", 3, F64)
    bn.scale.value[:] = rng.uniform(0.5, 1.5, 3)
    bn.shift.value[:] = rng.standard_normal(3)
    results.append(check_module("batchnorm[train]", bn, x, rng))
    bn_eval = BatchNorm2d("bn", 3, F64)
    bn_eval.bn.running_var[:] = rng.uniform(0.5, 2, 3)
    bn_eval.set_mode("eval")
    results.append(check_module("batchnorm[eval]", bn_eval, x, rng))
    # keep inputs away from the kink so central differences are valid
    xr = np.where(np.abs(x) < 1e-3, 0.5, x)
    results.append(check_module("relu", Activation("relu"), xr, rng))
    results.append(check_module("sigmoid", Activation("sigmoid"), x, rng))
    results.append(_check_magnitude(rng))
    results.append(check_module("residual_block", ResidualBlock("rb", 3, rng, F64), x, rng))
    g = Generator(GeneratorConfig(2, 4, 2, 2, dtype="float64"), rng)
    results.append(check_module("generator", g, rng.random((2, 2, 6, 6)), rng))
    results.append(_check_discriminator(rng))
    results.append(check_unrolled_loss(rng, 2, 1, weight_mode="shared"))
    results.append(check_unrolled_loss(rng, 2, 1, weight_mode="independent"))
    return results
