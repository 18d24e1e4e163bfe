"""Command-line entry point: ``unrolled-cs <subcommand> [options]``.

Every subcommand takes ``--config FILE`` (key=value lines) and ``--seed``;
explicit flags override config values. Exit codes: 0 success, 1 usage,
2 runtime failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("unrolled_cs")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _settings(args, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    from .fileio import read_config

    out = dict(defaults)
    if args.config:
        cfg = read_config(args.config)
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        out.update(cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _common(p):
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--seed", type=int)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

MASK_DEFAULTS = {"height": 64, "width": 64, "fraction": 0.2, "decay_power": 3.0, "seed": 0, "out": "mask.pgm"}


def cmd_mask_gen(args):
    from .fileio import save_mask_bits, save_mask_pgm
    from .operators import generate_mask

    s = _settings(args, MASK_DEFAULTS)
    mask = generate_mask(int(s["height"]), int(s["width"]), float(s["fraction"]), float(s["decay_power"]), seed=int(s["seed"]))
    out = Path(s["out"])
    (save_mask_pgm if out.suffix.lower() == ".pgm" else save_mask_bits)(out, mask)
    print(f"wrote {out} ({mask.count} samples, id {mask.mask_id})")
    return EXIT_OK


PHANTOM_DEFAULTS = {"count": 4, "size": 64, "seed": 0, "out_dir": "phantoms", "mask": None, "sigma": 0.0, "texture": 0.04}


def cmd_phantom_gen(args):
    from .data import DatasetManifest, PhantomSpec, generate_phantom, synthesize_measurements
    from .fileio import load_mask, save_image, save_measurements
    from .operators import MaskedFourierOperator

    s = _settings(args, PHANTOM_DEFAULTS)
    out = Path(s["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    mask = load_mask(s["mask"]) if s["mask"] else None
    op = MaskedFourierOperator(mask) if mask else None
    entries = []
    rng = np.random.default_rng(int(s["seed"]))
    for i in range(int(s["count"])):
        seed = int(rng.integers(1 << 31))
        img = generate_phantom(PhantomSpec(size=int(s["size"]), texture=float(s["texture"]), seed=seed))
        path = out / f"phantom_{i:04d}.pgm"
        save_image(path, np.abs(img), format="pgm", bits=16)
        entry = {"path": path.name, "seed": seed, "split": "test", "mask_id": mask.mask_id if mask else None}
        if op is not None:
            y = synthesize_measurements(img, op, float(s["sigma"]), seed=seed)
            save_measurements(out / f"phantom_{i:04d}.meas", y, mask, float(s["sigma"]))
            entry["measurements"] = f"phantom_{i:04d}.meas"
        entries.append(entry)
    DatasetManifest(entries, {"kind": "fourier" if mask else None, "size": int(s["size"])}).save(out / "manifest.json")
    print(f"wrote {len(entries)} phantoms to {out}")
    return EXIT_OK


TRAIN_DEFAULTS = {
    "task": "mri",
    "n_train": 512,
    "n_test": 64,
    "size": 64,
    "fraction": 0.2,
    "mask_seed": 0,
    "noise_sigma": 0.0,
    "copies": 3,
    "blocks": 1,
    "feature_maps": 16,
    "weight_mode": "shared",
    "learn_alpha": True,
    "out": "checkpoint",
    "log": None,
    # TrainConfig / LossWeights
    "batch_size": 2,
    "learning_rate": 1e-4,
    "beta1": 0.9,
    "epochs": 1,
    "steps": None,
    "clip_threshold": None,
    "seed": 0,
    "checkpoint_every": 0,
    "lambda": 0.0,
    "eta": 1.0,
    "gamma": 0.0,
    "warmup_batches": 1000,
}


def _datasets(s):
    from .data import make_mri_datasets, make_superres_datasets

    if s["task"] == "mri":
        return make_mri_datasets(
            int(s["n_train"]), int(s["n_test"]), int(s["size"]), float(s["fraction"]), float(s["noise_sigma"]), int(s["seed"]), int(s["mask_seed"])
        )
    if s["task"] == "superres":
        return make_superres_datasets(int(s["n_train"]), int(s["n_test"]), int(s["size"]), 4, float(s["noise_sigma"]), int(s["seed"]))
    raise UsageError(f"unknown task {s['task']!r} (mri or superres)")


def _train_config(s):
    from .training import TrainConfig

    keys = ("batch_size", "learning_rate", "beta1", "epochs", "steps", "clip_threshold", "seed", "checkpoint_every", "lambda", "eta", "gamma", "warmup_batches")
    return TrainConfig.from_dict({k: s[k] for k in keys})


def cmd_train(args):
    from .checkpoint import save_model
    from .evaluation import evaluate_images, model_reconstruct
    from .training import train
    from .unrolled import Discriminator, DiscriminatorConfig, GeneratorConfig, UnrolledModel

    s = _settings(args, TRAIN_DEFAULTS)
    cfg, weights = _train_config(s)
    train_set, test_set, manifest = _datasets(s)
    ch = 2 if s["task"] == "mri" else 3
    model = UnrolledModel(
        train_set.op,
        int(s["copies"]),
        GeneratorConfig(int(s["blocks"]), int(s["feature_maps"]), ch, ch),
        weight_mode=s["weight_mode"],
        learn_alpha=bool(s["learn_alpha"]),
        seed=int(s["seed"]),
        alpha_init=1.0 if s["task"] == "mri" else 16.0,
    )
    disc = None
    if weights.lam > 0:
        disc = Discriminator(DiscriminatorConfig(in_channels=1 if ch == 2 else 3), np.random.default_rng(int(s["seed"]) + 1))
    out = Path(s["out"])

    def on_ckpt(m, step):
        save_model(out / f"step_{step:06d}", m)

    result = train(model, disc, train_set, cfg, weights, on_checkpoint=on_ckpt)
    save_model(out, model)
    manifest.save(out / "dataset.json")
    result.write_log(s["log"] or out / "train_log.csv")
    report = evaluate_images(test_set.images, model_reconstruct(model, test_set))
    (out / "report.txt").write_text(report.to_text())
    print(f"trained {result.steps} steps in {result.seconds:.1f}s; test SNR {report.mean_snr:.2f} dB, SSIM {report.mean_ssim:.4f}")
    return EXIT_OK


RECON_DEFAULTS = {"measurements": None, "checkpoint": None, "out": "recon.pgm", "truth": None, "report": None, "seed": 0}


def _write_report(path, truth_path, estimate):
    from .evaluation import evaluate_images
    from .fileio import load_image

    truth = load_image(truth_path)
    est = np.abs(estimate) if np.iscomplexobj(estimate) else estimate
    rep = evaluate_images([truth], [est])
    text = rep.to_text()
    if path:
        Path(path).write_text(text)
    print(text, end="")


def cmd_reconstruct(args):
    from .checkpoint import load_model
    from .data import MRI_NORMALIZER
    from .fileio import load_measurements, save_image

    s = _settings(args, RECON_DEFAULTS)
    if not s["measurements"] or not s["checkpoint"]:
        raise UsageError("reconstruct needs --measurements and --checkpoint")
    model = load_model(s["checkpoint"])
    meas = load_measurements(s["measurements"])
    op = model.op
    if getattr(op, "mask", None) is None or meas["mask_id"] != op.mask.mask_id:
        raise RuntimeError("measurement mask does not match the checkpoint's mask")
    y = MRI_NORMALIZER.normalize_measurement(op, meas["y"].astype(np.complex128))[None]
    x_tilde = op.to_channels(op.adjoint(y), np.float32)
    x_hat, _ = model.forward(y, x_tilde, keep_cache=False)
    img = MRI_NORMALIZER.denormalize_image(op.from_channels(x_hat.astype(np.float64)))[0]
    save_image(s["out"], np.clip(np.abs(img), 0, 1))
    if s["truth"]:
        _write_report(s["report"], s["truth"], img)
    return EXIT_OK


CS_DEFAULTS = {
    "measurements": None,
    "mask": None,
    "algorithm": "fista",
    "transform": "wavelet",
    "reg_weight": 1e-3,
    "iters": 200,
    "out": "cs.pgm",
    "truth": None,
    "report": None,
    "seed": 0,
}


def cmd_cs_solve(args):
    from .classical_cs import SparsityConfig, fista, ista
    from .fileio import load_mask, load_measurements, save_image
    from .operators import MaskedFourierOperator

    s = _settings(args, CS_DEFAULTS)
    if not s["measurements"] or not s["mask"]:
        raise UsageError("cs-solve needs --measurements and --mask")
    if s["algorithm"] not in ("ista", "fista") or s["transform"] not in ("wavelet", "tv"):
        raise UsageError("algorithm must be ista|fista and transform wavelet|tv")
    mask = load_mask(s["mask"])
    meas = load_measurements(s["measurements"])
    if meas["mask_id"] != mask.mask_id:
        raise RuntimeError("measurement file was recorded with a different mask")
    op = MaskedFourierOperator(mask)
    solver = fista if s["algorithm"] == "fista" else ista
    x, trace = solver(op, meas["y"].astype(np.complex128), SparsityConfig(s["transform"], float(s["reg_weight"])), iters=int(s["iters"]))
    save_image(s["out"], np.clip(np.abs(x), 0, 1))
    print(f"{s['algorithm']}/{s['transform']}: final objective {trace.objective[-1]:.6g}")
    if s["truth"]:
        _write_report(s["report"], s["truth"], x)
    return EXIT_OK


BENCH_DEFAULTS = {
    "task": "mri",
    "n_train": 64,
    "n_test": 16,
    "size": 64,
    "fraction": 0.2,
    "mask_seed": 0,
    "noise_sigma": 0.0,
    "copies": "1,2,3",
    "blocks": "1",
    "weight_modes": "shared",
    "feature_maps": 16,
    "steps": 200,
    "batch_size": 2,
    "learning_rate": 3e-3,
    "seed": 0,
    "timing": True,
    "cs": "",
    "out": "sweep.csv",
}


def _int_list(v):
    return [int(t) for t in str(v).split(",") if str(t).strip()]


def cmd_benchmark(args):
    from .evaluation import SweepCell, SweepSpec, run_sweep, sweep_csv
    from .training import LossWeights, TrainConfig

    s = _settings(args, BENCH_DEFAULTS)
    train_set, test_set, _ = _datasets({**s, "task": s["task"]})
    cells = [
        SweepCell(k, b, m)
        for m in str(s["weight_modes"]).split(",")
        for b in _int_list(s["blocks"])
        for k in _int_list(s["copies"])
    ]
    spec = SweepSpec(
        cells,
        TrainConfig(batch_size=int(s["batch_size"]), learning_rate=float(s["learning_rate"]), steps=int(s["steps"])),
        LossWeights(),
        feature_maps=int(s["feature_maps"]),
        seed=int(s["seed"]),
        timing=bool(s["timing"]),
        cs_transforms=tuple(t for t in str(s["cs"] or "").split(",") if t),
    )
    rows = run_sweep(spec, train_set, test_set)
    text = sweep_csv(rows)
    Path(s["out"]).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import THRESHOLD, run_suite

    s = _settings(args, {"seed": 0})
    results = run_suite(int(s["seed"]))
    ok = True
    for r in results:
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:40s} max_rel_err={r.max_rel_error:.3e} coords={r.coords}")
    print(f"{'all checks below' if ok else 'checks exceeding'} {THRESHOLD:g}")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unrolled-cs", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    m = sub.add_parser("mask-gen", help="variable-density k-space mask")
    _common(m)
    m.add_argument("--height", type=int)
    m.add_argument("--width", type=int)
    m.add_argument("--fraction", type=float)
    m.add_argument("--decay-power", dest="decay_power", type=float)
    m.add_argument("--out")
    m.set_defaults(func=cmd_mask_gen)

    ph = sub.add_parser("phantom-gen", help="synthetic phantoms (+ measurements with --mask)")
    _common(ph)
    ph.add_argument("--count", type=int)
    ph.add_argument("--size", type=int)
    ph.add_argument("--out-dir", dest="out_dir")
    ph.add_argument("--mask")
    ph.add_argument("--sigma", type=float)
    ph.set_defaults(func=cmd_phantom_gen)

    t = sub.add_parser("train", help="train an unrolled model")
    _common(t)
    t.add_argument("--task", choices=["mri", "superres"])
    t.add_argument("--copies", type=int)
    t.add_argument("--blocks", type=int)
    t.add_argument("--weight-mode", dest="weight_mode", choices=["shared", "independent"])
    t.add_argument("--steps", type=int)
    t.add_argument("--n-train", dest="n_train", type=int)
    t.add_argument("--n-test", dest="n_test", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="apply a checkpoint to a measurement file")
    _common(r)
    r.add_argument("--measurements")
    r.add_argument("--checkpoint")
    r.add_argument("--out")
    r.add_argument("--truth")
    r.add_argument("--report")
    r.set_defaults(func=cmd_reconstruct)

    c = sub.add_parser("cs-solve", help="ISTA/FISTA with wavelet or TV regularization")
    _common(c)
    c.add_argument("--measurements")
    c.add_argument("--mask")
    c.add_argument("--algorithm", choices=["ista", "fista"])
    c.add_argument("--transform", choices=["wavelet", "tv"])
    c.add_argument("--reg-weight", dest="reg_weight", type=float)
    c.add_argument("--iters", type=int)
    c.add_argument("--out")
    c.add_argument("--truth")
    c.add_argument("--report")
    c.set_defaults(func=cmd_cs_solve)

    b = sub.add_parser("benchmark", help="copies x blocks sweep to CSV")
    _common(b)
    b.add_argument("--copies", help="comma-separated K values")
    b.add_argument("--blocks", help="comma-separated RB counts")
    b.add_argument("--steps", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_benchmark)

    g = sub.add_parser("gradcheck", help="finite-difference suite")
    _common(g)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # any runtime failure maps to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
