"""Learned proximal networks and the unrolled proximal-gradient model.

The unrolled model alternates a ResNet proximal ``G`` with a gradient step on
the data-fidelity cost::

    x_0 = x_tilde
    xcheck_k = G(theta_k, x_{k-1})
    x_k = xcheck_k + alpha_k * Phi^H (y - Phi xcheck_k)      k = 1..K
    x_hat = x_K

``theta_1 = ... = theta_K`` in shared mode (one generator object reused K
times); independent mode owns K generators.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .layers import Activation, BatchNorm2d, Conv2d, Module, Parameter, Sequential
from .tensor_core import ShapeError

__all__ = [
    "GeneratorConfig",
    "DiscriminatorConfig",
    "ResidualBlock",
    "Generator",
    "Discriminator",
    "UnrolledModel",
    "StaleCacheError",
    "magnitude_input",
    "magnitude_input_backward",
]


class StaleCacheError(RuntimeError):
    """backward() called without a matching forward()."""


@dataclass
class GeneratorConfig:
    num_residual_blocks: int = 1
    feature_maps: int = 16
    in_channels: int = 2
    out_channels: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.num_residual_blocks < 1 or self.feature_maps < 2:
            raise ValueError("need at least one residual block and two feature maps")


class ResidualBlock(Module):
    """conv3x3 -> BN -> ReLU -> conv3x3 -> BN, identity skip, ReLU after the sum."""

    def __init__(self, name, channels, rng, dtype):
        self.body = Sequential(
            Conv2d(f"{name}.conv1", channels, channels, 3, rng, dtype=dtype, bias=False),
            BatchNorm2d(f"{name}.bn1", channels, dtype),
            Activation("relu"),
            Conv2d(f"{name}.conv2", channels, channels, 3, rng, dtype=dtype, bias=False),
            BatchNorm2d(f"{name}.bn2", channels, dtype),
        )
        self.out_act = Activation("relu")

    def children(self):
        return [self.body]

    def parameters(self):
        return self.body.parameters()

    def buffers(self):
        return self.body.buffers()

    def forward(self, x):
        h, body_cache = self.body.forward(x)
        out, act_cache = self.out_act.forward(x + h)
        return out, (body_cache, act_cache)

    def backward(self, cache, grad):
        body_cache, act_cache = cache
        g = self.out_act.backward(act_cache, grad)
        return g + self.body.backward(body_cache, g)


class Generator(Module):
    """ResNet proximal: lifting conv, residual blocks, three 1x1 head convs.

    The head widths are ``F -> F -> F/2 -> out_channels`` with ReLU, ReLU and
    a sigmoid, so every output pixel lies in (0, 1).
    """

    def __init__(self, config: GeneratorConfig, rng: np.random.Generator, name: str = "gen"):
        self.config = config
        F = config.feature_maps
        dt = np.dtype(config.dtype)
        self.lift = Sequential(Conv2d(f"{name}.lift", config.in_channels, F, 3, rng, dtype=dt), Activation("relu"))
        self.blocks = [ResidualBlock(f"{name}.rb{i}", F, rng, dt) for i in range(config.num_residual_blocks)]
        self.head = Sequential(
            Conv2d(f"{name}.head1", F, F, 1, rng, dtype=dt),
            Activation("relu"),
            Conv2d(f"{name}.head2", F, F // 2, 1, rng, dtype=dt),
            Activation("relu"),
            Conv2d(f"{name}.head3", F // 2, config.out_channels, 1, rng, dtype=dt),
            Activation("sigmoid"),
        )

    def children(self):
        return [self.lift, *self.blocks, self.head]

    def parameters(self):
        return [p for c in self.children() for p in c.parameters()]

    def buffers(self):
        out = {}
        for c in self.children():
            out.update(c.buffers())
        return out

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"generator expects [B, {self.config.in_channels}, H, W], got {x.shape}")
        x = x.astype(self.config.dtype, copy=False)
        caches = []
        for c in self.children():
            x, cache = c.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, caches, grad):
        grad = grad.astype(self.config.dtype, copy=False)
        for c, cache in zip(reversed(self.children()), reversed(caches)):
            grad = c.backward(cache, grad)
        return grad


@dataclass
class DiscriminatorConfig:
    in_channels: int = 1
    widths: tuple = (8, 16, 32, 64, 64, 64, 32, 1)
    kernels: tuple = (3, 3, 3, 3, 3, 3, 1, 1)
    strides: tuple = (2, 2, 2, 2, 1, 1, 1, 1)
    dtype: str = "float32"

    def __post_init__(self):
        if not len(self.widths) == len(self.kernels) == len(self.strides):
            raise ValueError("widths, kernels and strides must have equal length")

    @property
    def min_size(self) -> int:
        return int(np.prod(self.strides))


class Discriminator(Module):
    """Strided CNN without pooling; the last conv map is averaged to one score per image."""

    def __init__(self, config: DiscriminatorConfig, rng: np.random.Generator, name: str = "disc"):
        self.config = config
        dt = np.dtype(config.dtype)
        layers = []
        cin = config.in_channels
        n = len(config.widths)
        for i, (w, k, s) in enumerate(zip(config.widths, config.kernels, config.strides)):
            layers.append(Conv2d(f"{name}.conv{i + 1}", cin, w, k, rng, stride=s, dtype=dt, bias=i == n - 1))
            if i < n - 1:
                layers += [BatchNorm2d(f"{name}.bn{i + 1}", w, dt), Activation("relu")]
            cin = w
        self.net = Sequential(*layers)

    def children(self):
        return [self.net]

    def parameters(self):
        return self.net.parameters()

    def buffers(self):
        return self.net.buffers()

    def forward(self, image):
        if image.ndim != 4 or image.shape[1] != self.config.in_channels:
            raise ShapeError(f"discriminator expects [B, {self.config.in_channels}, H, W], got {image.shape}")
        m = self.config.min_size
        if image.shape[2] < m or image.shape[3] < m:
            raise ShapeError(f"discriminator input {image.shape[2:]} smaller than the {m}x{m} minimum")
        fmap, cache = self.net.forward(image.astype(self.config.dtype, copy=False))
        return fmap.mean(axis=(1, 2, 3)), (cache, fmap.shape)

    def backward(self, cache, grad_scores):
        net_cache, shape = cache
        per = grad_scores.astype(self.config.dtype)[:, None, None, None] / np.prod(shape[1:])
        return self.net.backward(net_cache, np.broadcast_to(per, shape).copy())


def magnitude_input(x_channels, normalizer=None, eps=1e-12):
    """Two-channel (normalized) complex image -> ``[B, 1, H, W]`` magnitude for the discriminator."""
    t = x_channels if normalizer is None else normalizer.denormalize_channels(x_channels)
    mag = np.sqrt(t[:, 0] ** 2 + t[:, 1] ** 2 + eps)
    return mag[:, None], (t, mag)


def magnitude_input_backward(cache, grad_mag, normalizer=None):
    t, mag = cache
    g = grad_mag[:, 0] / mag
    out = np.stack([g * t[:, 0], g * t[:, 1]], axis=1)
    if normalizer is not None:
        out = out / normalizer.scale
    return out


class UnrolledModel:
    """K proximal copies interleaved with data-consistency steps.

    Parameters
    ----------
    op : operator
        :class:`~unrolled_cs.operators.MaskedFourierOperator` or
        :class:`~unrolled_cs.operators.BoxDownsampleOperator`.
    copies : int
        Number of unrolled iterations K.
    generator_config : GeneratorConfig
    weight_mode : {"shared", "independent"}
    learn_alpha : bool
        Step sizes are ``alpha_k = raw_k ** 2``; set False to freeze them.
    alpha_init : float
        Initial step size (``raw_k = sqrt(alpha_init)``).
    generators : list, optional
        Replace the ResNets (diagnostic stubs); each needs ``forward``,
        ``backward``, ``parameters``.
    """

    def __init__(
        self,
        op,
        copies: int,
        generator_config: GeneratorConfig | None = None,
        weight_mode: str = "shared",
        learn_alpha: bool = True,
        seed: int = 0,
        generators=None,
        alpha_init: float = 1.0,
    ):
        if copies < 1:
            raise ValueError("need at least one copy (K >= 1)")
        if weight_mode not in ("shared", "independent"):
            raise ValueError(f"weight_mode must be 'shared' or 'independent', got {weight_mode!r}")
        self.op = op
        self.copies = copies
        self.weight_mode = weight_mode
        self.learn_alpha = learn_alpha
        self.seed = seed
        self.generator_config = generator_config or GeneratorConfig()
        if generators is None:
            rng = np.random.default_rng(seed)
            n = 1 if weight_mode == "shared" else copies
            generators = [Generator(self.generator_config, rng, name=f"gen{i}") for i in range(n)]
        expected = 1 if weight_mode == "shared" else copies
        if len(generators) != expected:
            raise ValueError(f"{weight_mode} mode needs {expected} generator(s), got {len(generators)}")
        self.generators = list(generators)
        if alpha_init < 0:
            raise ValueError("alpha_init must be non-negative")
        self.alpha_init = alpha_init
        self.alpha_raw = [Parameter(f"alpha{k}", np.full(1, np.sqrt(alpha_init))) for k in range(copies)]
        self._cache = None

    # -- parameters -------------------------------------------------------
    def generator(self, k: int):
        return self.generators[0 if self.weight_mode == "shared" else k]

    @property
    def alphas(self) -> np.ndarray:
        return np.array([float(a.value[0]) ** 2 for a in self.alpha_raw])

    def parameters(self) -> list[Parameter]:
        params = [p for g in self.generators for p in g.parameters()]
        if self.learn_alpha:
            params += self.alpha_raw
        return params

    def generator_parameter_count(self) -> int:
        return sum(p.value.size for g in self.generators for p in g.parameters())

    def zero_grad(self):
        for g in self.generators:
            for p in g.parameters():
                p.zero_grad()
        for a in self.alpha_raw:
            a.zero_grad()

    def set_mode(self, mode: str):
        for g in self.generators:
            if hasattr(g, "set_mode"):
                g.set_mode(mode)

    def state(self) -> dict[str, np.ndarray]:
        """All tensors needed to restore the model, keyed by name."""
        out = {}
        for g in self.generators:
            for p in g.parameters():
                out[p.name] = p.value
            if hasattr(g, "buffers"):
                out.update(g.buffers())
        for a in self.alpha_raw:
            out[a.name] = a.value
        return out

    def load_state(self, named: dict[str, np.ndarray]):
        current = self.state()
        missing = set(current) - set(named)
        if missing:
            raise KeyError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for name, arr in current.items():
            src = np.asarray(named[name])
            if src.shape != arr.shape:
                raise ShapeError(f"tensor {name}: checkpoint shape {src.shape} vs model {arr.shape}")
            arr[...] = src

    def manifest(self) -> dict:
        cfg = asdict(self.generator_config)
        out = {
            "copies": self.copies,
            "weight_mode": self.weight_mode,
            "learn_alpha": self.learn_alpha,
            "alpha_init": self.alpha_init,
            "seed": self.seed,
        }
        out.update({f"generator.{k}": v for k, v in cfg.items()})
        out.update({f"alpha{k}": repr(float(a)) for k, a in enumerate(self.alphas)})
        return out

    # -- data consistency in the network's channel layout ----------------
    def _dc(self, xc, y, alpha):
        op = self.op
        z = op.from_channels(xc.astype(np.float64))
        step = op.adjoint(y - op.forward(z))
        out = op.to_channels(z + alpha * step, xc.dtype)
        return out, op.to_channels(step, np.float64)

    def _dc_backward(self, grad, step, alpha, raw):
        op = self.op
        g64 = grad.astype(np.float64)
        gz = op.to_channels(op.normal(op.from_channels(g64)), np.float64)
        grad_in = (g64 - alpha * gz).astype(grad.dtype)
        grad_raw = 2.0 * raw * float(np.sum(g64 * step))
        return grad_in, grad_raw

    # -- passes -----------------------------------------------------------
    def forward(self, y, x_tilde, keep_cache: bool = True):
        """Run all K copies; returns ``(x_hat, [xcheck_1, ..., xcheck_K])``."""
        x = x_tilde
        intermediates = []
        caches = []
        alphas = self.alphas
        for k in range(self.copies):
            xc, gcache = self.generator(k).forward(x)
            x, step = self._dc(xc, y, alphas[k])
            intermediates.append(xc)
            caches.append((gcache, step))
        self._cache = caches if keep_cache else None
        return x, intermediates

    def backward(self, grad_xhat, grad_intermediates=None):
        """Accumulate parameter gradients; returns the gradient w.r.t. ``x_tilde``.

        ``grad_intermediates[k]`` is the loss gradient w.r.t. ``xcheck_{k+1}``
        (e.g. from the per-copy fidelity term) and may be None.
        """
        if self._cache is None:
            raise StaleCacheError("backward() needs a preceding forward() with keep_cache=True")
        caches, self._cache = self._cache, None
        alphas = self.alphas
        g = grad_xhat
        for k in reversed(range(self.copies)):
            gcache, step = caches[k]
            raw = float(self.alpha_raw[k].value[0])
            g, graw = self._dc_backward(g, step, alphas[k], raw)
            self.alpha_raw[k].grad[0] += graw
            if grad_intermediates is not None and grad_intermediates[k] is not None:
                g = g + grad_intermediates[k]
            g = self.generator(k).backward(gcache, g)
        return g
