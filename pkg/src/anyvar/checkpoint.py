"""Versioned binary checkpoint container.

Layout (little-endian):

    offset 0   magic bytes b"AVCK"
    offset 4   uint32 format version
    offset 8   uint64 header length H
    offset 16  header: UTF-8 JSON of H bytes
    offset 16+H  raw array payload, arrays back to back in manifest order

The header carries the model config echo, its SHA-256 hash, the step counter,
the numpy bit-generator state, scalar optimizer metadata, and an array
manifest (name, dtype, shape, nbytes). Tensors are stored as raw bytes in
their native dtype, so a save/load round trip is bit-exact. Loading verifies
the magic, the format version, the config hash, and that every manifest entry
fits inside the file; violations raise CheckpointError instead of crashing.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .model import AnyVariateEncoder, ModelConfig, config_hash

MAGIC = b"AVCK"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    config: ModelConfig
    model_state: dict[str, np.ndarray]
    step: int = 0
    optim_state: dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    optim_meta: dict[str, Any] = dataclasses.field(default_factory=dict)
    torch_rng: np.ndarray | None = None
    np_rng_state: dict | None = None
    format_version: int = FORMAT_VERSION

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def checkpoint_from_model(
    model: AnyVariateEncoder,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    np_rng: np.random.Generator | None = None,
) -> Checkpoint:
    model_state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
    optim_state: dict[str, np.ndarray] = {}
    optim_meta: dict[str, Any] = {}
    if optimizer is not None:
        sd = optimizer.state_dict()
        steps = {}
        for idx, st in sd["state"].items():
            for key, val in st.items():
                if isinstance(val, torch.Tensor) and val.ndim > 0:
                    optim_state[f"{idx}/{key}"] = val.detach().cpu().numpy().copy()
                else:
                    steps[f"{idx}/{key}"] = float(val)
        optim_meta = {"scalars": steps, "param_groups": sd["param_groups"]}
    return Checkpoint(
        config=model.config,
        model_state=model_state,
        step=step,
        optim_state=optim_state,
        optim_meta=optim_meta,
        torch_rng=torch.get_rng_state().numpy().copy(),
        np_rng_state=None if np_rng is None else np_rng.bit_generator.state,
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    arrays: list[tuple[str, np.ndarray]] = []
    for name, arr in ckpt.model_state.items():
        arrays.append((f"model/{name}", np.ascontiguousarray(arr)))
    for name, arr in ckpt.optim_state.items():
        arrays.append((f"optim/{name}", np.ascontiguousarray(arr)))
    if ckpt.torch_rng is not None:
        arrays.append(("rng/torch", np.ascontiguousarray(ckpt.torch_rng)))

    manifest = [
        {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "nbytes": int(arr.nbytes)}
        for name, arr in arrays
    ]
    header = {
        "config": dataclasses.asdict(ckpt.config),
        "config_hash": ckpt.config_hash,
        "step": int(ckpt.step),
        "optim_meta": ckpt.optim_meta,
        "np_rng_state": ckpt.np_rng_state,
        "arrays": manifest,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.format_version))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for _, arr in arrays:
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    if 16 + header_len > len(blob):
        raise CheckpointError(f"{path} is truncated: header extends past end of file")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc

    config = ModelConfig(**header["config"])
    if header.get("config_hash") != config_hash(config):
        raise CheckpointError(f"{path}: stored config hash does not match its config echo")
    if expected_config is not None and config_hash(expected_config) != config_hash(config):
        raise CheckpointError("checkpoint is incompatible with the expected model config")

    offset = 16 + header_len
    model_state: dict[str, np.ndarray] = {}
    optim_state: dict[str, np.ndarray] = {}
    torch_rng = None
    for entry in header["arrays"]:
        nbytes = int(entry["nbytes"])
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path} is truncated inside array {entry['name']!r}")
        arr = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]), count=-1 if nbytes == 0 else
                            int(np.prod(entry["shape"], dtype=np.int64)), offset=offset)
        arr = arr.reshape(entry["shape"]).copy()
        offset += nbytes
        name = entry["name"]
        if name.startswith("model/"):
            model_state[name[len("model/"):]] = arr
        elif name.startswith("optim/"):
            optim_state[name[len("optim/"):]] = arr
        elif name == "rng/torch":
            torch_rng = arr
    return Checkpoint(
        config=config,
        model_state=model_state,
        step=int(header["step"]),
        optim_state=optim_state,
        optim_meta=header.get("optim_meta") or {},
        torch_rng=torch_rng,
        np_rng_state=header.get("np_rng_state"),
        format_version=version,
    )


def restore_model(ckpt: Checkpoint, dtype: torch.dtype = torch.float32) -> AnyVariateEncoder:
    model = AnyVariateEncoder(ckpt.config, dtype=dtype)
    state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.model_state.items()}
    model.load_state_dict(state)
    return model.to(dtype)


def restore_optimizer(ckpt: Checkpoint, optimizer: torch.optim.Optimizer) -> None:
    """Load saved first/second moments and step counters into a fresh optimizer."""
    if not ckpt.optim_state and not ckpt.optim_meta:
        return
    state: dict[int, dict[str, Any]] = {}
    for key, arr in ckpt.optim_state.items():
        idx_str, field = key.split("/", 1)
        state.setdefault(int(idx_str), {})[field] = torch.from_numpy(arr.copy())
    for key, val in ckpt.optim_meta.get("scalars", {}).items():
        idx_str, field = key.split("/", 1)
        state.setdefault(int(idx_str), {})[field] = torch.tensor(val)
    optimizer.load_state_dict({
        "state": state,
        "param_groups": ckpt.optim_meta.get("param_groups", optimizer.state_dict()["param_groups"]),
    })
