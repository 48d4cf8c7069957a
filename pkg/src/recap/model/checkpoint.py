"""Checkpoint serialization: config, parameter tensors (f64 LE), frozen
flags, RNG state, and step count inside a checksummed container."""

from __future__ import annotations

import base64

import numpy as np
import torch

from .. import formats
from .network import CaptionModel, ModelConfig

CHECKPOINT_MAGIC = b"RVCK"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(model: CaptionModel, step: int = 0) -> bytes:
    names, blobs, frozen = [], [], {}
    for name, p in sorted(model.named_parameters()):
        names.append(name)
        blobs.append(np.ascontiguousarray(
            p.detach().numpy(), dtype="<f8").tobytes())
        frozen.setdefault(model.group_of(name), not p.requires_grad)
    rng_state = bytes(torch.get_rng_state().numpy().tobytes())
    header = {
        "config": model.config.to_dict(),
        "param_names": names,
        "frozen": frozen,
        "step": step,
        "rng_state": base64.b64encode(rng_state).decode("ascii"),
    }
    return formats.pack_container(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, blobs)


def save_checkpoint(model: CaptionModel, path: str, step: int = 0) -> None:
    formats.atomic_write_bytes(path, checkpoint_bytes(model, step))


def load_checkpoint(path: str) -> tuple[CaptionModel, int]:
    header, blobs = formats.load_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    config = ModelConfig.from_dict(header["config"])
    model = CaptionModel(config)
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, blob in zip(header["param_names"], blobs):
            p = params[name]
            p.copy_(torch.from_numpy(
                np.frombuffer(blob, dtype="<f8").reshape(p.shape).copy()))
    for name, p in params.items():
        p.requires_grad_(not header["frozen"].get(model.group_of(name), False))
    rng = np.frombuffer(base64.b64decode(header["rng_state"]), dtype=np.uint8)
    torch.set_rng_state(torch.from_numpy(rng.copy()))
    return model, header["step"]
