"""Weight checkpoints.

One ``.npz`` archive per model. Every parameter and floating-point buffer
is stored as a little-endian float32 array under a prefixed name:

    spatial/<name>    GLANCE encoder
    temporal/<name>   bidirectional GRU
    head/<name>       parameter regressor
    disc/<name>       motion discriminator (optional)

The ``__header__`` entry holds UTF-8 JSON with the format version and the
encoder / GRU / regressor configs, which are checked before loading.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .glance import EncoderConfig
from .smpl_head import GlanceNet, MotionDiscriminator, RegressorConfig
from .temporal import GruConfig

FORMAT_VERSION = 1
PREFIXES = ("spatial", "temporal", "head")


class CheckpointMismatchError(ValueError):
    pass


def _state(module: torch.nn.Module, prefix: str) -> dict:
    out = {}
    for name, t in module.state_dict().items():
        if t.is_floating_point():
            out[f"{prefix}/{name}"] = t.detach().cpu().numpy().astype("<f4")
    return out


def state_arrays(model: GlanceNet, disc: MotionDiscriminator = None) -> dict:
    arrays = {}
    for prefix in PREFIXES:
        arrays.update(_state(getattr(model, prefix), prefix))
    if disc is not None:
        arrays.update(_state(disc, "disc"))
    return arrays


def save_checkpoint(path, model: GlanceNet, disc: MotionDiscriminator = None, extra: dict = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": FORMAT_VERSION,
        "encoder": model.spatial.config.to_dict(),
        "gru": model.temporal.config.to_dict(),
        "regressor": asdict(model.head.config),
        "has_disc": disc is not None,
        "extra": extra or {},
    }
    arrays = state_arrays(model, disc)
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def read_header(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return json.loads(bytes(z["__header__"]).decode())


def _load_into(module: torch.nn.Module, prefix: str, arrays):
    state = module.state_dict()
    for name, t in state.items():
        if not t.is_floating_point():
            continue
        key = f"{prefix}/{name}"
        if key not in arrays:
            raise CheckpointMismatchError(f"checkpoint is missing {key}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(t.shape):
            raise CheckpointMismatchError(f"{key}: checkpoint shape {arr.shape} != model shape {tuple(t.shape)}")
        t.copy_(torch.from_numpy(np.asarray(arr, dtype=np.float32)))


def load_checkpoint(path, encoder: EncoderConfig = None, gru: GruConfig = None):
    """Rebuild (model, disc or None, header). Passing configs asserts they match the header."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointMismatchError(f"unsupported checkpoint version {header.get('version')}")
        enc = EncoderConfig(**header["encoder"])
        g = GruConfig(**header["gru"])
        if encoder is not None and encoder.to_dict() != enc.to_dict():
            raise CheckpointMismatchError("encoder config does not match checkpoint")
        if gru is not None and gru.to_dict() != g.to_dict():
            raise CheckpointMismatchError("GRU config does not match checkpoint")
        model = GlanceNet(enc, g, RegressorConfig(**header["regressor"]))
        arrays = {k: z[k] for k in z.files}
    with torch.no_grad():
        for prefix in PREFIXES:
            _load_into(getattr(model, prefix), prefix, arrays)
        disc = None
        if header.get("has_disc"):
            disc = MotionDiscriminator()
            _load_into(disc, "disc", arrays)
    model.eval()
    return model, disc, header
