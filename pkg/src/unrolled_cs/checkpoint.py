"""Model checkpoints: a key=value manifest next to a tensor blob.

A checkpoint directory holds ``model.cfg`` (copies, weight mode, generator
config, step sizes, operator description), ``weights.bin`` and, for the
masked-Fourier operator, ``mask.bin``.
"""

from __future__ import annotations

from pathlib import Path

from .fileio import load_mask_bits, load_tensors, read_config, save_mask_bits, save_tensors, write_config
from .operators import BoxDownsampleOperator, MaskedFourierOperator
from .unrolled import GeneratorConfig, UnrolledModel

__all__ = ["save_model", "load_model"]


def save_model(directory, model: UnrolledModel, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = model.manifest()
    op = model.op
    if isinstance(op, MaskedFourierOperator):
        manifest.update({"operator": "fourier", "mask_file": "mask.bin", "mask_id": op.mask.mask_id})
        save_mask_bits(d / "mask.bin", op.mask)
    elif isinstance(op, BoxDownsampleOperator):
        manifest.update({"operator": "box", "factor": op.factor, "channels": op.channels})
    else:
        raise TypeError(f"cannot checkpoint operator {type(op).__name__}")
    manifest.update(extra or {})
    write_config(d / "model.cfg", manifest)
    save_tensors(d / "weights.bin", model.state())
    return d


def load_model(directory) -> UnrolledModel:
    d = Path(directory)
    m = read_config(d / "model.cfg")
    if m["operator"] == "fourier":
        op = MaskedFourierOperator(load_mask_bits(d / m["mask_file"]))
    else:
        op = BoxDownsampleOperator(int(m["factor"]), int(m["channels"]))
    gcfg = GeneratorConfig(**{k.split(".", 1)[1]: v for k, v in m.items() if k.startswith("generator.")})
    model = UnrolledModel(
        op,
        int(m["copies"]),
        gcfg,
        weight_mode=m["weight_mode"],
        learn_alpha=bool(m["learn_alpha"]),
        seed=int(m["seed"]),
        alpha_init=float(m.get("alpha_init", 1.0)),
    )
    model.load_state(load_tensors(d / "weights.bin"))
    model.set_mode("eval")
    return model
