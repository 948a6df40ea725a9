"""
Versioned checkpoint container.

Layout::

    b"MPCK" | uint32 version | uint64 header length | JSON header | float64 payloads

Payloads are little-endian doubles: every parameter in header order, then
the optimizer's first and second moments for every entry of the header's
optimizer state list.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .config import ModelConfig, RunConfig, config_hash, flatten, unflatten
from .models import CheckpointError, MaskplanError
from .planner import PlannerModel
from .tensor import AdamW, AdamWConfig, ParameterLabel

logger = logging.getLogger(__name__)

MAGIC = b"MPCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    model: PlannerModel
    optimizer: AdamW
    config: RunConfig
    progress: Dict[str, Any] = field(default_factory=dict)
    header: Dict[str, Any] = field(default_factory=dict)


def _payload(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=_DTYPE).tobytes()


def save_checkpoint(path: str, model: PlannerModel, optimizer: AdamW, cfg: RunConfig,
                    progress: Optional[Dict[str, Any]] = None) -> None:
    partition = model.parameter_partition()
    names = list(model.params)
    state_names = [name for name in names if name in optimizer.state]
    header = {
        "format_version": FORMAT_VERSION,
        "config": flatten(cfg),
        "config_hash": config_hash(cfg),
        "model_config": asdict(model.config),
        "refinement_ready": model.has_refinement,
        "params": [{"name": name, "shape": list(model.params[name].shape),
                    "label": partition.labels[name].value} for name in names],
        "optimizer": {
            "hyper": asdict(optimizer.hyper),
            "state": [{"name": name, "step": int(optimizer.state[name]["step"])} for name in state_names],
        },
        "progress": progress or {},
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(encoded)))
        f.write(encoded)
        for name in names:
            f.write(_payload(model.params[name].data))
        for name in state_names:
            f.write(_payload(optimizer.state[name]["m"]))
            f.write(_payload(optimizer.state[name]["v"]))
    logger.info("Checkpoint written to %s", path)


def _read_array(buffer: memoryview, offset: int, shape: List[int], path: str):
    count = int(np.prod(shape)) if shape else 1
    end = offset + count * _DTYPE.itemsize
    if end > len(buffer):
        raise CheckpointError(f"{path}: truncated payload")
    data = np.frombuffer(buffer[offset:end], dtype=_DTYPE).astype(np.float64).reshape(shape)
    return data, end


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a maskplan checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})")

    try:
        cfg = unflatten(header["config"])
        model_config = ModelConfig(**header["model_config"])
        model = PlannerModel(model_config)
    except (KeyError, TypeError, MaskplanError) as e:
        raise CheckpointError(f"{path}: incompatible header ({e})")

    buffer = memoryview(raw)
    offset = start + header_len
    state = {}
    for entry in header["params"]:
        state[entry["name"]], offset = _read_array(buffer, offset, entry["shape"], path)
    model.load_state_dict(state)
    if header.get("refinement_ready") and not model.has_refinement:
        model.init_refinement_from_generation()

    partition = model.parameter_partition()
    for entry in header["params"]:
        if partition.labels.get(entry["name"]) != ParameterLabel(entry["label"]):
            raise CheckpointError(f"{path}: label mismatch for parameter {entry['name']}")

    optimizer = AdamW(AdamWConfig(**header["optimizer"]["hyper"]))
    shapes = {entry["name"]: entry["shape"] for entry in header["params"]}
    for entry in header["optimizer"]["state"]:
        m, offset = _read_array(buffer, offset, shapes[entry["name"]], path)
        v, offset = _read_array(buffer, offset, shapes[entry["name"]], path)
        optimizer.state[entry["name"]] = {"m": m, "v": v, "step": entry["step"]}
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return Checkpoint(model=model, optimizer=optimizer, config=cfg,
                      progress=header.get("progress", {}), header=header)
