"""Synthetic data: MRI-like phantoms, RGB textures, measurements and datasets."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .operators import BoxDownsampleOperator, MaskedFourierOperator, approx_deconvolve, generate_mask

__all__ = [
    "PhantomSpec",
    "generate_phantom",
    "TextureSpec",
    "generate_texture",
    "synthesize_measurements",
    "Normalizer",
    "MRI_NORMALIZER",
    "IDENTITY_NORMALIZER",
    "MeasurementSet",
    "build_measurement_set",
    "DatasetManifest",
    "SplitError",
    "make_mri_datasets",
    "make_superres_datasets",
]


class SplitError(ValueError):
    """Train and test sets overlap."""


@dataclass
class PhantomSpec:
    size: int = 64
    ellipses: tuple[int, int] = (4, 9)
    intensity: tuple[float, float] = (0.1, 0.9)
    texture: float = 0.04
    max_phase: float = math.pi / 3
    seed: int = 0

    def __post_init__(self):
        if self.size < 16 or self.size & (self.size - 1):
            raise ValueError(f"phantom size must be a power of two >= 16, got {self.size}")
        if self.ellipses[0] < 0 or self.ellipses[1] < self.ellipses[0]:
            raise ValueError("bad ellipse count range")


def _smooth_field(rng, n, cutoff):
    """Random band-limited field normalized to unit peak magnitude."""
    white = rng.standard_normal((n, n))
    f = np.fft.fftfreq(n)
    fy, fx = np.meshgrid(f, f, indexing="ij")
    lowpass = np.exp(-(fy**2 + fx**2) / (2 * cutoff**2))
    out = np.fft.ifft2(np.fft.fft2(white) * lowpass).real
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def generate_phantom(spec: PhantomSpec) -> np.ndarray:
    """Complex ``[size, size]`` image: ellipses with smooth intensity, texture and a smooth phase."""
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    t = (np.arange(n) + 0.5) / n * 2 - 1
    yy, xx = np.meshgrid(t, t, indexing="ij")
    mag = np.zeros((n, n))
    count = int(rng.integers(spec.ellipses[0], spec.ellipses[1] + 1))
    for i in range(count):
        if i == 0:
            # a large body outline holds the rest
            cy, cx = rng.uniform(-0.1, 0.1, 2)
            ay, ax = rng.uniform(0.6, 0.85, 2)
        else:
            cy, cx = rng.uniform(-0.5, 0.5, 2)
            ay, ax = rng.uniform(0.08, 0.35, 2)
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = ((xx - cx) * c + (yy - cy) * s) / ax
        v = (-(xx - cx) * s + (yy - cy) * c) / ay
        inside = u**2 + v**2 <= 1
        level = rng.uniform(*spec.intensity)
        # gentle linear shading across the ellipse
        shade = 1 + 0.15 * (rng.uniform(-1, 1) * u + rng.uniform(-1, 1) * v)
        mag = np.where(inside, level * shade if i == 0 else mag + (level - 0.5) * 0.6 * shade, mag)
    if spec.texture > 0 and count > 0:
        mag = mag + spec.texture * _smooth_field(rng, n, 0.12) * (mag > 0)
    mag = np.clip(mag, 0.0, 1.0)
    phase = spec.max_phase * _smooth_field(rng, n, 0.03)
    return mag * np.exp(1j * phase)


@dataclass
class TextureSpec:
    size: int = 64
    blobs: int = 6
    stripes: int = 2
    seed: int = 0


def generate_texture(spec: TextureSpec) -> np.ndarray:
    """RGB ``[3, size, size]`` image in [0, 1]: colored soft blobs over smooth gradients and stripes."""
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    t = np.linspace(0, 1, n)
    yy, xx = np.meshgrid(t, t, indexing="ij")
    base = rng.uniform(0.2, 0.8, (3, 1, 1)) + 0.2 * _smooth_field(rng, n, 0.02)[None] * rng.uniform(-1, 1, (3, 1, 1))
    img = np.broadcast_to(base, (3, n, n)).copy()
    for _ in range(spec.stripes):
        freq = rng.uniform(2, 6)
        ang = rng.uniform(0, np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(ang) + yy * np.sin(ang)) + rng.uniform(0, 2 * np.pi))
        img += 0.08 * wave[None] * rng.uniform(-1, 1, (3, 1, 1))
    for _ in range(spec.blobs):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.06, 0.2)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        w = 1 / (1 + np.exp((d - r) / (0.01 + 0.02 * rng.random())))
        color = rng.uniform(0, 1, (3, 1, 1))
        img = img * (1 - w[None]) + color * w[None]
    return np.clip(img, 0.0, 1.0)


def synthesize_measurements(x: np.ndarray, op, noise_sigma: float, seed: int = 0) -> np.ndarray:
    """``Phi x`` plus Gaussian noise; complex operators get independent noise per component."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    y = op.forward(x)
    if noise_sigma == 0:
        return y
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_sigma, y.shape)
    if np.iscomplexobj(y) or getattr(op, "is_complex", False):
        noise = noise + 1j * rng.normal(0.0, noise_sigma, y.shape)
    return y + noise


@dataclass(frozen=True)
class Normalizer:
    """Affine map ``x -> offset * c + scale * x`` with ``c = 1 + 1j`` for complex data.

    Keeps complex images inside the generator's sigmoid range. Because the
    map is affine it carries over to measurements through ``Phi(ones)``.
    """

    offset: float
    scale: float
    is_complex: bool

    @property
    def _c(self):
        return self.offset * (1 + 1j) if self.is_complex else self.offset

    def normalize_image(self, x):
        return self._c + self.scale * x

    def denormalize_image(self, xn):
        return (xn - self._c) / self.scale

    def denormalize_channels(self, t):
        return (t - self.offset) / self.scale

    def normalize_measurement(self, op, y, image_shape=None):
        if self.offset == 0:
            return self.scale * y
        shape = image_shape if image_shape is not None else getattr(op, "image_shape", None)
        ones = np.ones(shape, dtype=complex if self.is_complex else float)
        return self.scale * y + self._c * op.forward(ones)


MRI_NORMALIZER = Normalizer(0.5, 0.45, True)
IDENTITY_NORMALIZER = Normalizer(0.0, 1.0, False)


@dataclass
class MeasurementSet:
    """Aligned arrays for training / evaluation in the normalized domain.

    ``images`` are the physical ground-truth images and ``y_raw`` their
    measurements; ``y``, ``x_truth`` and ``x_tilde`` live in the normalized
    domain, the latter two as two/three-channel network tensors.
    """

    op: object
    normalizer: Normalizer
    images: np.ndarray
    y: np.ndarray
    x_tilde: np.ndarray
    x_truth: np.ndarray
    y_raw: np.ndarray
    seeds: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        idx = np.asarray(idx)
        seeds = [self.seeds[i] for i in idx] if self.seeds else []
        return MeasurementSet(
            self.op, self.normalizer, self.images[idx], self.y[idx], self.x_tilde[idx], self.x_truth[idx], self.y_raw[idx], seeds
        )

    def batch(self, idx):
        return self.y[idx], self.x_tilde[idx], self.x_truth[idx]

    def physical(self, x_channels: np.ndarray) -> np.ndarray:
        """Network tensors -> physical images (complex for MRI)."""
        return self.normalizer.denormalize_image(self.op.from_channels(x_channels.astype(np.float64)))


def initial_image(op, y_normalized):
    if isinstance(op, BoxDownsampleOperator):
        return approx_deconvolve(op, y_normalized)
    return op.adjoint(y_normalized)


def build_measurement_set(op, images, noise_sigma, normalizer, seeds=None, noise_seed=0, dtype=np.float32):
    images = np.asarray(images)
    y = np.stack([synthesize_measurements(x, op, noise_sigma, seed=noise_seed + i) for i, x in enumerate(images)])
    shape = images.shape[1:]
    yn = normalizer.normalize_measurement(op, y, shape)
    x_tilde = op.to_channels(initial_image(op, yn), dtype)
    x_truth = op.to_channels(normalizer.normalize_image(images), dtype)
    return MeasurementSet(op, normalizer, images, yn, x_tilde, x_truth, y, list(seeds or []))


@dataclass
class DatasetManifest:
    """Where the images came from and which split they belong to."""

    entries: list  # dicts: path, seed, split, mask_id
    operator: dict

    def __post_init__(self):
        self.check_disjoint()

    def split(self, name):
        return [e for e in self.entries if e["split"] == name]

    def check_disjoint(self):
        train = {(e.get("path"), e["seed"]) for e in self.split("train")}
        test = {(e.get("path"), e["seed"]) for e in self.split("test")}
        train_seeds = {s for _, s in train}
        test_seeds = {s for _, s in test}
        if train & test or train_seeds & test_seeds:
            raise SplitError("train and test splits share images")

    def save(self, path):
        Path(path).write_text(json.dumps({"operator": self.operator, "entries": self.entries}, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        d = json.loads(Path(path).read_text())
        return cls(d["entries"], d["operator"])


def _split_seeds(seed, n_train, n_test):
    ss = np.random.SeedSequence(seed)
    seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(n_train + n_test)]
    return seeds[:n_train], seeds[n_train:]


def make_mri_datasets(
    n_train=512,
    n_test=64,
    size=64,
    fraction=0.2,
    noise_sigma=0.0,
    seed=0,
    mask_seed=0,
    phantom: PhantomSpec | None = None,
):
    """Phantom train/test sets behind one variable-density mask.

    Returns ``(train, test, manifest)``.
    """
    mask = generate_mask(size, size, fraction, seed=mask_seed)
    op = MaskedFourierOperator(mask)
    base = phantom or PhantomSpec(size=size)
    tr_seeds, te_seeds = _split_seeds(seed, n_train, n_test)
    sets = []
    for k, seeds in enumerate((tr_seeds, te_seeds)):
        imgs = np.stack([generate_phantom(PhantomSpec(**{**asdict(base), "size": size, "seed": s})) for s in seeds])
        sets.append(build_measurement_set(op, imgs, noise_sigma, MRI_NORMALIZER, seeds, noise_seed=seed * 7919 + k * 100003))
    entries = [{"path": None, "seed": s, "split": sp, "mask_id": mask.mask_id} for sp, ss in (("train", tr_seeds), ("test", te_seeds)) for s in ss]
    manifest = DatasetManifest(entries, {"kind": "fourier", "size": size, "fraction": fraction, "mask_seed": mask_seed, "noise_sigma": noise_sigma})
    return sets[0], sets[1], manifest


def make_superres_datasets(n_train=256, n_test=32, size=64, factor=4, noise_sigma=0.0, seed=0):
    op = BoxDownsampleOperator(factor, 3)
    tr_seeds, te_seeds = _split_seeds(seed, n_train, n_test)
    sets = []
    for k, seeds in enumerate((tr_seeds, te_seeds)):
        imgs = np.stack([generate_texture(TextureSpec(size=size, seed=s)) for s in seeds])
        sets.append(build_measurement_set(op, imgs, noise_sigma, IDENTITY_NORMALIZER, seeds, noise_seed=seed * 7919 + k * 100003))
    entries = [{"path": None, "seed": s, "split": sp, "mask_id": None} for sp, ss in (("train", tr_seeds), ("test", te_seeds)) for s in ss]
    manifest = DatasetManifest(entries, {"kind": "box", "size": size, "factor": factor, "noise_sigma": noise_sigma})
    return sets[0], sets[1], manifest
