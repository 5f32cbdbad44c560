"""Versioned binary checkpoints with bit-exact round-trips.

Layout (little-endian):

    magic "EMCK" | u16 version=1 | u32 header_len | UTF-8 JSON header
    raw float64 array payloads, back to back, in header order

The JSON header carries the network/training config echoes, training
state (epoch, best epoch, best validation loss, generator state), the
per-parameter optimizer step counts, and an array index of
(group, name, shape) entries. Arrays hold 64-bit values: float32 model
weights and optimizer moments embed exactly, so write -> read -> write
is byte-identical and resuming reproduces the same trajectory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .network import NetworkConfig, SegmentationNet

MAGIC = b"EMCK"
FORMAT_VERSION = 1

_GROUPS = ("params", "best_params", "opt_m", "opt_v")


@dataclass
class Checkpoint:
    """Model weights plus enough training state to resume exactly."""

    net_config: dict
    train_config: dict
    epoch: int = -1
    best_epoch: int = -1
    best_val_loss: float | None = None
    params: dict[str, np.ndarray] = field(default_factory=dict)
    best_params: dict[str, np.ndarray] = field(default_factory=dict)
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    opt_steps: dict[str, int] = field(default_factory=dict)
    rng_state: dict | None = None

    def group(self, name: str) -> dict[str, np.ndarray]:
        return getattr(self, name)


def write_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    index = []
    payloads = []
    for group in _GROUPS:
        arrays = ckpt.group(group)
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8")
            index.append({"group": group, "name": name, "shape": list(arr.shape)})
            payloads.append(arr.tobytes())  # C order regardless of layout
    header = {
        "net_config": ckpt.net_config,
        "train_config": ckpt.train_config,
        "state": {
            "epoch": ckpt.epoch,
            "best_epoch": ckpt.best_epoch,
            "best_val_loss": ckpt.best_val_loss,
            "rng": ckpt.rng_state,
        },
        "opt_steps": {k: ckpt.opt_steps[k] for k in sorted(ckpt.opt_steps)},
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for chunk in payloads:
            f.write(chunk)


def read_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    fixed = 4 + struct.calcsize("<HI")
    if len(blob) < fixed or blob[:4] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    if len(blob) < fixed + header_len:
        raise ConfigError(f"{path}: truncated checkpoint header")
    header = json.loads(blob[fixed : fixed + header_len].decode("utf-8"))
    offset = fixed + header_len
    groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in _GROUPS}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 8 * count
        if len(blob) < end:
            raise ConfigError(f"{path}: truncated checkpoint payload")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        groups[entry["group"]][entry["name"]] = arr.reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise ConfigError(f"{path}: trailing bytes after payload")
    state = header["state"]
    return Checkpoint(
        net_config=header["net_config"],
        train_config=header["train_config"],
        epoch=state["epoch"],
        best_epoch=state["best_epoch"],
        best_val_loss=state["best_val_loss"],
        params=groups["params"],
        best_params=groups["best_params"],
        opt_m=groups["opt_m"],
        opt_v=groups["opt_v"],
        opt_steps={k: int(v) for k, v in header["opt_steps"].items()},
        rng_state=state["rng"],
    )


# ---------------------------------------------------------------------------
# Torch bridging
# ---------------------------------------------------------------------------

def arrays_from_state_dict(state_dict: dict[str, torch.Tensor]) -> dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().numpy().astype(np.float64)
        for name, tensor in state_dict.items()
    }


def load_arrays_into_model(model: SegmentationNet, arrays: dict[str, np.ndarray]) -> None:
    sd = model.state_dict()
    if set(sd) != set(arrays):
        missing = set(sd) - set(arrays)
        extra = set(arrays) - set(sd)
        raise ConfigError(
            f"checkpoint does not match model: missing {sorted(missing)}, "
            f"unexpected {sorted(extra)}"
        )
    with torch.no_grad():
        for name, tensor in sd.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise ConfigError(
                    f"shape mismatch for {name}: checkpoint {arr.shape} "
                    f"vs model {tuple(tensor.shape)}"
                )
            tensor.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(tensor.dtype))


def model_from_checkpoint(ckpt: Checkpoint, which: str = "best") -> SegmentationNet:
    """Rebuild the network from a checkpoint's config echo and weights.

    `which` selects "best" (validation-selected snapshot, falling back to
    the final weights when no validation ever ran) or "last".
    """
    cfg = NetworkConfig(**ckpt.net_config)
    model = SegmentationNet(cfg)
    arrays = ckpt.best_params if which == "best" and ckpt.best_params else ckpt.params
    if not arrays:
        raise ConfigError("checkpoint carries no parameters")
    load_arrays_into_model(model, arrays)
    return model
