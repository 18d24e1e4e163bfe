import numpy as np
import pytest

from unrolled_cs.cli import main
from unrolled_cs.fileio import load_image, load_mask, save_measurements
from unrolled_cs.operators import MaskedFourierOperator, generate_mask


def test_mask_gen(tmp_path, capsys):
    out = tmp_path / "m.pgm"
    assert main(["mask-gen", "--height", "32", "--width", "16", "--fraction", "0.25", "--seed", "3", "--out", str(out)]) == 0
    m = load_mask(out)
    assert m == generate_mask(32, 16, 0.25, seed=3)
    assert m.mask_id in capsys.readouterr().out


def test_config_file_then_flags(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("height=16\nwidth=16\nfraction=0.5\n")
    out = tmp_path / "m.bin"
    assert main(["mask-gen", "--config", str(cfg), "--fraction", "0.75", "--out", str(out)]) == 0
    assert load_mask(out).count == 192


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("bogus=1\n")
    assert main(["mask-gen", "--config", str(cfg)]) == 1


def test_usage_errors(capsys):
    assert main(["no-such-command"]) == 1
    assert main([]) == 1
    assert main(["mask-gen", "--height", "x"]) == 1


def test_runtime_error_exit_code(tmp_path):
    assert main(["cs-solve", "--measurements", str(tmp_path / "missing"), "--mask", str(tmp_path / "nope")]) == 2


def test_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "unrolled_loss" in out


def test_cs_solve_full_mask_zero_weight(tmp_path):
    mask = generate_mask(16, 16, 1.0)
    x = np.random.default_rng(0).random((16, 16))
    save_measurements(tmp_path / "y.meas", MaskedFourierOperator(mask).forward(x), mask, 0.0)
    main(["mask-gen", "--height", "16", "--width", "16", "--fraction", "1", "--out", str(tmp_path / "m.bin")])
    args = ["cs-solve", "--measurements", str(tmp_path / "y.meas"), "--mask", str(tmp_path / "m.bin")]
    assert main(args + ["--reg-weight", "0", "--iters", "5", "--out", str(tmp_path / "x.pgm")]) == 0
    assert np.abs(load_image(tmp_path / "x.pgm") - x).max() < 1e-4


def test_mask_mismatch(tmp_path):
    m1, m2 = generate_mask(16, 16, 0.5, seed=1), generate_mask(16, 16, 0.5, seed=2)
    save_measurements(tmp_path / "y.meas", np.zeros(m1.count, complex), m1, 0.0)
    from unrolled_cs.fileio import save_mask_bits

    save_mask_bits(tmp_path / "m.bin", m2)
    assert main(["cs-solve", "--measurements", str(tmp_path / "y.meas"), "--mask", str(tmp_path / "m.bin")]) == 2


def test_benchmark_one_cell(tmp_path):
    cfg = tmp_path / "b.cfg"
    cfg.write_text("n_train=4\nn_test=2\nsize=16\nfeature_maps=4\ntiming=false\n")
    out = tmp_path / "s.csv"
    argv = ["benchmark", "--config", str(cfg), "--copies", "2", "--blocks", "1", "--steps", "2", "--out", str(out)]
    assert main(argv) == 0
    first = out.read_text()
    lines = first.splitlines()
    assert len(lines) == 2 and lines[1].startswith("unrolled,2,1,shared,")
    assert main(argv) == 0
    assert out.read_text() == first


def test_train_then_reconstruct(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("n_train=4\nn_test=2\nsize=16\nfeature_maps=4\nfraction=0.4\n")
    ckpt = tmp_path / "ckpt"
    assert main(["train", "--config", str(cfg), "--copies", "2", "--steps", "3", "--out", str(ckpt)]) == 0
    for name in ("model.cfg", "weights.bin", "mask.bin", "dataset.json", "train_log.csv", "report.txt"):
        assert (ckpt / name).exists()
    ph = tmp_path / "ph"
    assert main(["phantom-gen", "--count", "1", "--size", "16", "--mask", str(ckpt / "mask.bin"), "--out-dir", str(ph)]) == 0
    rep = tmp_path / "r.txt"
    argv = ["reconstruct", "--measurements", str(ph / "phantom_0000.meas"), "--checkpoint", str(ckpt)]
    argv += ["--out", str(tmp_path / "r.pgm"), "--truth", str(ph / "phantom_0000.pgm"), "--report", str(rep)]
    assert main(argv) == 0
    assert load_image(tmp_path / "r.pgm").shape == (16, 16)
    assert "mean_snr_db=" in rep.read_text()


def test_reconstruct_requires_inputs():
    assert main(["reconstruct"]) == 1
