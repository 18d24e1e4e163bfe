"""Metrics over test sets, classical baselines and the copies x blocks sweep harness."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .classical_cs import SparsityConfig, fista, tune_reg_weight
from .metrics import snr, ssim
from .training import LossWeights, TrainConfig, train
from .unrolled import GeneratorConfig, UnrolledModel

__all__ = [
    "MetricReport",
    "evaluate_images",
    "zero_fill_baseline",
    "model_reconstruct",
    "cs_reconstruct",
    "tune_cs_weight",
    "inference_ms",
    "SweepCell",
    "SweepSpec",
    "SweepCellError",
    "run_sweep",
    "sweep_csv",
    "SWEEP_COLUMNS",
    "save_panels",
]

SWEEP_COLUMNS = ("method", "copies", "RBs", "weight_mode", "mean_snr", "mean_ssim", "train_seconds", "inference_ms")


@dataclass
class MetricReport:
    snr_db: list
    ssim: list

    @property
    def mean_snr(self) -> float:
        return float(np.mean(self.snr_db))

    @property
    def std_snr(self) -> float:
        return float(np.std(self.snr_db))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def std_ssim(self) -> float:
        return float(np.std(self.ssim))

    def to_text(self) -> str:
        return (
            f"images={len(self.snr_db)}\n"
            f"mean_snr_db={self.mean_snr:.6f}\nstd_snr_db={self.std_snr:.6f}\n"
            f"mean_ssim={self.mean_ssim:.6f}\nstd_ssim={self.std_ssim:.6f}\n"
        )


def _for_ssim(img):
    # magnitudes for complex, values in [0, 1] assumed otherwise
    return np.abs(img) if np.iscomplexobj(img) else img


def evaluate_images(truths, estimates) -> MetricReport:
    s, q = [], []
    for t, e in zip(truths, estimates):
        s.append(snr(t, e))
        q.append(ssim(_for_ssim(t), _for_ssim(e)))
    return MetricReport(s, q)


def zero_fill_baseline(op, y):
    """Inverse FFT of k-space with the unsampled entries left at zero."""
    return op.adjoint(y)


def model_reconstruct(model, dataset, batch_size: int = 16) -> np.ndarray:
    """Physical-domain reconstructions of every image in ``dataset`` (eval mode)."""
    model.set_mode("eval")
    out = []
    for i in range(0, len(dataset), batch_size):
        sl = slice(i, i + batch_size)
        x_hat, _ = model.forward(dataset.y[sl], dataset.x_tilde[sl], keep_cache=False)
        out.append(dataset.physical(x_hat))
    return np.concatenate(out)


def cs_reconstruct(dataset, transform: str, reg_weight: float, iters: int = 200) -> np.ndarray:
    cfg = SparsityConfig(transform=transform, reg_weight=reg_weight)
    return np.stack([fista(dataset.op, y, cfg, iters=iters)[0] for y in dataset.y_raw])


def tune_cs_weight(tune_set, transform: str, iters: int = 200, lo=1e-5, hi=1.0, grid=11, golden_iters=8) -> float:
    """Regularization weight maximizing mean SNR on a tuning set (kept apart from the test images)."""

    def score(w):
        return evaluate_images(tune_set.images, cs_reconstruct(tune_set, transform, w, iters)).mean_snr

    best, _ = tune_reg_weight(score, lo, hi, grid, golden_iters)
    return best


def inference_ms(model, dataset, passes: int = 20, warmup: int = 3) -> float:
    """Median wall time of single-image forward passes, in milliseconds."""
    model.set_mode("eval")
    y, xt = dataset.y[:1], dataset.x_tilde[:1]
    for _ in range(warmup):
        model.forward(y, xt, keep_cache=False)
    times = []
    for _ in range(passes):
        t0 = time.perf_counter()
        model.forward(y, xt, keep_cache=False)
        times.append(time.perf_counter() - t0)
    return 1000.0 * float(np.median(times))


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepCell:
    copies: int
    blocks: int = 1
    weight_mode: str = "shared"


@dataclass
class SweepSpec:
    """Architectures to compare under one training budget.

    ``timing=False`` writes ``NA`` in the wall-clock columns so that the CSV
    is byte-reproducible.
    """

    cells: list
    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    feature_maps: int = 16
    seed: int = 0
    timing: bool = True
    cs_transforms: tuple = ()
    cs_iters: int = 200
    cs_tune_images: int = 8
    zero_fill_row: bool = False


class SweepCellError(RuntimeError):
    def __init__(self, cell, cause):
        super().__init__(f"sweep cell {cell} failed: {cause}")
        self.cell = cell
        self.cause = cause


def _fmt(v):
    return "NA" if v is None else f"{v:.6f}"


def run_sweep(spec: SweepSpec, train_set, test_set, models_out: dict | None = None) -> list[dict]:
    """Train and evaluate every cell with identical data, budget and seed.

    Cells do not share state, so permuting ``spec.cells`` only permutes the
    corresponding output rows. Classical rows (``CS-WV``, ``CS-TV``) are
    appended with weights tuned on the first ``cs_tune_images`` training
    images.
    """
    rows = []
    channels = 2 if test_set.op.is_complex else 3
    for cell in spec.cells:
        try:
            gcfg = GeneratorConfig(cell.blocks, spec.feature_maps, channels, channels)
            model = UnrolledModel(train_set.op, cell.copies, gcfg, weight_mode=cell.weight_mode, seed=spec.seed)
            cfg = replace(spec.train, seed=spec.seed)
            result = train(model, None, train_set, cfg, spec.weights)
            report = evaluate_images(test_set.images, model_reconstruct(model, test_set))
            ms = inference_ms(model, test_set) if spec.timing else None
        except Exception as exc:  # surfaced with the cell identity
            raise SweepCellError(cell, exc) from exc
        if models_out is not None:
            models_out[cell] = model
        rows.append(
            {
                "method": "unrolled",
                "copies": cell.copies,
                "RBs": cell.blocks,
                "weight_mode": cell.weight_mode,
                "mean_snr": report.mean_snr,
                "mean_ssim": report.mean_ssim,
                "train_seconds": result.seconds if spec.timing else None,
                "inference_ms": ms,
                "report": report,
            }
        )
    tune = train_set.subset(np.arange(min(spec.cs_tune_images, len(train_set))))
    for transform in spec.cs_transforms:
        w = tune_cs_weight(tune, transform, spec.cs_iters)
        t0 = time.perf_counter()
        recon = cs_reconstruct(test_set, transform, w, spec.cs_iters)
        per = (time.perf_counter() - t0) * 1000 / len(test_set)
        report = evaluate_images(test_set.images, recon)
        name = {"wavelet": "CS-WV", "tv": "CS-TV"}.get(transform, f"CS-{transform}")
        rows.append(_baseline_row(name, report, per if spec.timing else None, reg_weight=w))
    if spec.zero_fill_row:
        recon = zero_fill_baseline(test_set.op, test_set.y_raw) if test_set.op.is_complex else test_set.physical(test_set.x_tilde)
        rows.append(_baseline_row("ZF", evaluate_images(test_set.images, recon), None))
    return rows


def _baseline_row(name, report, ms, reg_weight=None):
    return {
        "method": name,
        "copies": None,
        "RBs": None,
        "weight_mode": None,
        "mean_snr": report.mean_snr,
        "mean_ssim": report.mean_ssim,
        "train_seconds": None,
        "inference_ms": ms,
        "report": report,
        "reg_weight": reg_weight,
    }


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow(
            [
                r["method"],
                "NA" if r["copies"] is None else r["copies"],
                "NA" if r["RBs"] is None else r["RBs"],
                r["weight_mode"] or "NA",
                _fmt(r["mean_snr"]),
                _fmt(r["mean_ssim"]),
                _fmt(r["train_seconds"]),
                _fmt(r["inference_ms"]),
            ]
        )
    return buf.getvalue()


def save_panels(directory, index: int, columns: dict, bits: int = 16):
    """Write one PGM per column (e.g. ZF, CS, model, truth) of magnitude images, clipped to [0, 1]."""
    from .fileio import save_image

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, img in columns.items():
        mag = np.abs(img) if np.iscomplexobj(img) else np.asarray(img)
        if mag.ndim == 3:
            mag = mag.mean(axis=0)
        p = d / f"{index:04d}_{name}.pgm"
        save_image(p, np.clip(mag, 0, 1), format="pgm", bits=bits)
        paths.append(p)
    return paths
