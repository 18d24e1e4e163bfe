"""Losses and the alternating generator/discriminator optimization loop."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .tensor_core import AdamState, NonFiniteError, adam_step
from .unrolled import magnitude_input, magnitude_input_backward

__all__ = [
    "LossWeights",
    "TrainConfig",
    "GeneratorLoss",
    "TrainingAborted",
    "TrainResult",
    "mixed_norm",
    "mixed_norm_grad",
    "generator_loss",
    "discriminator_loss",
    "gan_warmup",
    "clip_gradients",
    "train",
    "parameter_checksum",
    "LOG_COLUMNS",
]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("batch", "fidelity_loss", "pixel_loss", "gan_g_loss", "gan_d_loss", "lambda_eff", "grad_norm")


class TrainingAborted(RuntimeError):
    def __init__(self, batch_index: int, message: str):
        super().__init__(f"batch {batch_index}: {message}")
        self.batch_index = batch_index


@dataclass
class LossWeights:
    lam: float = 0.0
    eta: float = 1.0
    gamma: float = 0.0
    warmup_batches: int = 1000

    def __post_init__(self):
        if self.lam < 0 or self.eta < 0:
            raise ValueError("lambda and eta must be non-negative")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.warmup_batches < 1:
            raise ValueError("warmup_batches must be positive")


@dataclass
class TrainConfig:
    batch_size: int = 2
    learning_rate: float = 1e-4
    beta1: float = 0.9
    epochs: int = 1
    steps: int | None = None
    clip_threshold: float | None = None
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    time_budget: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.clip_threshold is not None and self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be positive")

    def to_dict(self, weights: LossWeights | None = None) -> dict:
        out = asdict(self)
        if weights is not None:
            w = asdict(weights)
            out["lambda"] = w.pop("lam")
            out.update(w)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> tuple["TrainConfig", LossWeights]:
        values = dict(values)
        if "lambda" in values:
            values["lam"] = values.pop("lambda")
        names = {f.name for f in fields(cls)}
        wnames = {f.name for f in fields(LossWeights)}
        unknown = set(values) - names - wnames
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**{k: v for k, v in values.items() if k in names})
        w = LossWeights(**{k: v for k, v in values.items() if k in wnames})
        return cfg, w


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def mixed_norm(x: np.ndarray, gamma: float) -> float:
    """``gamma * ||x||_1 + (1 - gamma) * ||x||_2`` (the l2 part is not squared)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(gamma * np.abs(x).sum() + (1 - gamma) * np.linalg.norm(x))


def mixed_norm_grad(x: np.ndarray, gamma: float) -> np.ndarray:
    """A subgradient of :func:`mixed_norm`; zero at the origin."""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x)
    g = gamma * np.sign(x)
    if n > 0:
        g = g + (1 - gamma) * x / n
    return g


@dataclass
class GeneratorLoss:
    """Batch-averaged generator cost and its gradients.

    ``grad_intermediates[k]`` and ``grad_xhat`` are w.r.t. the network's
    channel tensors; ``grad_d`` is w.r.t. the discriminator scores.
    """

    fidelity: float
    gan: float
    pixel: float
    total: float
    grad_intermediates: list
    grad_xhat: np.ndarray
    grad_d: np.ndarray | None


def generator_loss(y, intermediates, x_hat, x_truth, d_of_xhat, weights: LossWeights, op, lam=None) -> GeneratorLoss:
    """``sum_k ||y - Phi xcheck_k||^2 + lam (1 - D(x_hat))^2 + eta ||x - x_hat||_{1,2}``, averaged over the batch.

    ``lam`` overrides ``weights.lam`` (used for the warm-up ramp).
    """
    lam = weights.lam if lam is None else lam
    B = x_hat.shape[0]
    fid = 0.0
    g_int = []
    for xc in intermediates:
        z = op.from_channels(xc.astype(np.float64))
        r = op.forward(z) - y
        fid += float(np.sum(np.abs(r) ** 2))
        g_int.append((2.0 / B) * op.to_channels(op.adjoint(r), np.float64))
    fid /= B

    pix = 0.0
    g_hat = np.zeros(x_hat.shape)
    if weights.eta > 0:
        for b in range(B):
            e = x_truth[b].astype(np.float64) - x_hat[b].astype(np.float64)
            pix += mixed_norm(e, weights.gamma)
            g_hat[b] = -(weights.eta / B) * mixed_norm_grad(e, weights.gamma)
        pix /= B

    gan = 0.0
    g_d = None
    if d_of_xhat is not None:
        d = np.asarray(d_of_xhat, dtype=np.float64)
        gan = float(np.mean((1 - d) ** 2))
        g_d = -2.0 * lam * (1 - d) / B
    total = fid + lam * gan + weights.eta * pix
    return GeneratorLoss(fid, gan, pix, total, g_int, g_hat, g_d)


def discriminator_loss(d_real, d_fake) -> tuple[float, np.ndarray, np.ndarray]:
    """``mean((1 - D(x))^2) + mean(D(x_hat)^2)`` and gradients w.r.t. both score vectors."""
    d_real = np.asarray(d_real, dtype=np.float64)
    d_fake = np.asarray(d_fake, dtype=np.float64)
    loss = float(np.mean((1 - d_real) ** 2) + np.mean(d_fake**2))
    return loss, -2 * (1 - d_real) / d_real.size, 2 * d_fake / d_fake.size


def gan_warmup(batch_index: int, weights: LossWeights) -> float:
    if batch_index < 0:
        raise ValueError("batch_index must be >= 0")
    return weights.lam * min(1.0, batch_index / weights.warmup_batches)


def clip_gradients(grads, threshold):
    """Global-norm clipping; returns ``(grads, norm_before)``."""
    norm = math.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2)) for g in grads))
    if threshold is not None and norm > threshold:
        s = threshold / norm
        grads = [g * s for g in grads]
    return grads, norm


def parameter_checksum(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    log: list
    steps: int
    seconds: float
    checksum: str

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.log:
            w.writerow([row["batch"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()

    def write_log(self, path):
        Path(path).write_text(self.log_csv())


def _disc_input(x, dataset):
    """Discriminator sees magnitudes of physical MRI images, or RGB directly."""
    if dataset.op.is_complex:
        return magnitude_input(x, dataset.normalizer)
    return x, None


def _disc_input_backward(cache, grad, dataset):
    if cache is None:
        return grad
    return magnitude_input_backward(cache, grad, dataset.normalizer)


def _batches(n, batch_size, rng):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[i : i + batch_size]


def _optimizer(params, cfg):
    st = AdamState.zeros_like([p.value for p in params])
    st.beta1 = cfg.beta1
    st.learning_rate = cfg.learning_rate
    return st


def train(model, discriminator, dataset, config: TrainConfig, weights: LossWeights, on_checkpoint=None) -> TrainResult:
    """Alternate one D step and one G step per mini-batch.

    The discriminator is neither evaluated nor updated when ``weights.lam``
    is zero, so it may be None in that case.
    """
    use_gan = weights.lam > 0
    if use_gan and discriminator is None:
        raise ValueError("lambda > 0 needs a discriminator")
    n = len(dataset)
    steps = config.steps if config.steps is not None else config.epochs * max(1, n // config.batch_size)
    rng = np.random.default_rng(config.seed)
    batches = _batches(n, config.batch_size, rng)
    g_params = model.parameters()
    g_opt = _optimizer(g_params, config)
    d_params = discriminator.parameters() if use_gan else []
    d_opt = _optimizer(d_params, config) if use_gan else None
    model.set_mode("train")
    if use_gan:
        discriminator.set_mode("train")

    rows = []
    t0 = time.perf_counter()
    done = 0
    for step in range(steps):
        idx = next(batches)
        y, x_tilde, x_truth = dataset.batch(idx)
        lam_eff = gan_warmup(step, weights) if use_gan else 0.0

        x_hat, inter = model.forward(y, x_tilde)
        d_loss = 0.0
        d_fake = None
        if use_gan:
            # D step on (truth, current reconstruction)
            for p in d_params:
                p.zero_grad()
            real_in, _ = _disc_input(x_truth, dataset)
            fake_in, _ = _disc_input(x_hat, dataset)
            both = np.concatenate([real_in, fake_in])
            scores, dcache = discriminator.forward(both)
            B = len(idx)
            d_loss, g_real, g_fake = discriminator_loss(scores[:B], scores[B:])
            discriminator.backward(dcache, np.concatenate([g_real, g_fake]))
            if not math.isfinite(d_loss):
                raise TrainingAborted(step, "non-finite discriminator loss")
            dg, _ = clip_gradients([p.grad for p in d_params], None)
            adam_step([p.value for p in d_params], dg, d_opt)
            # D score of the reconstruction for the G step, after the D update
            fake_in, mcache = _disc_input(x_hat, dataset)
            d_fake, fcache = discriminator.forward(fake_in)

        loss = generator_loss(y, inter, x_hat, x_truth, d_fake, weights, model.op, lam=lam_eff)
        if not math.isfinite(loss.total):
            raise TrainingAborted(step, f"non-finite generator loss ({loss.total})")
        model.zero_grad()
        g_hat = loss.grad_xhat
        if use_gan:
            gin = discriminator.backward(fcache, loss.grad_d)
            g_hat = g_hat + _disc_input_backward(mcache, gin, dataset)
            for p in d_params:  # the G step leaves D untouched
                p.zero_grad()
        model.backward(g_hat, loss.grad_intermediates)
        grads, gnorm = clip_gradients([p.grad for p in g_params], config.clip_threshold)
        try:
            adam_step([p.value for p in g_params], grads, g_opt)
        except NonFiniteError as exc:
            raise TrainingAborted(step, str(exc)) from None
        rows.append(
            {
                "batch": step,
                "fidelity_loss": loss.fidelity,
                "pixel_loss": loss.pixel,
                "gan_g_loss": loss.gan,
                "gan_d_loss": d_loss,
                "lambda_eff": lam_eff,
                "grad_norm": gnorm,
            }
        )
        done = step + 1
        if config.checkpoint_every and done % config.checkpoint_every == 0 and on_checkpoint is not None:
            on_checkpoint(model, done)
        if config.time_budget is not None and time.perf_counter() - t0 > config.time_budget:
            log.info("time budget reached after %d steps", done)
            break
    model.set_mode("eval")
    return TrainResult(model, rows, done, time.perf_counter() - t0, parameter_checksum(g_params))
