"""
Single-file checkpoint format:

    b"CURLIP01" | uint64 LE header length | UTF-8 JSON header | float32 LE data

The header holds the run config, a manifest (name, dtype, shape, byte offset,
trainable) for parameters and for AdamW moments, the step count and free-form
metadata. JSON is written with sorted keys so save -> load -> save is
byte-identical.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List

import numpy as np

from config.errors import CheckpointError, IoError
from neural.state import ModelState, Param
from neural.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"CURLIP01"
STORED_DTYPE = np.dtype("<f4")
_LEN_BYTES = 8


def _entry(name: str, array: np.ndarray, offset: int, **extra) -> Dict:
    return {"name": name, "dtype": "float32", "shape": list(array.shape), "offset": offset, **extra}


def encode_checkpoint(state: ModelState) -> bytes:
    blobs: List[bytes] = []
    offset = 0

    def push(array: np.ndarray) -> int:
        nonlocal offset
        start = offset
        raw = np.ascontiguousarray(array, dtype=STORED_DTYPE).tobytes()
        blobs.append(raw)
        offset += len(raw)
        return start

    manifest = []
    for p in state.params.values():
        manifest.append(_entry(p.name, p.value.data, push(p.value.data), trainable=p.trainable))
    moments = []
    for name in sorted(state.opt_moments):
        m, v = state.opt_moments[name]
        moments.append({"name": name, "m": _entry("m", m, push(m)), "v": _entry("v", v, push(v))})

    header = {
        "config": state.config,
        "manifest": manifest,
        "moments": moments,
        "step_count": state.step_count,
        "meta": state.meta,
        "data_bytes": offset,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + len(header_bytes).to_bytes(_LEN_BYTES, "little") + header_bytes + b"".join(blobs)


def decode_checkpoint(blob: bytes) -> ModelState:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    start = len(MAGIC) + _LEN_BYTES
    if len(blob) < start:
        raise CheckpointError("truncated checkpoint header")
    header_len = int.from_bytes(blob[len(MAGIC):start], "little")
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    data = memoryview(blob)[start + header_len:]
    if len(data) != header.get("data_bytes", -1):
        raise CheckpointError(f"checkpoint data is {len(data)} bytes, header says {header.get('data_bytes')}")

    def read(entry: Dict) -> np.ndarray:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        try:
            flat = np.frombuffer(data, dtype=STORED_DTYPE, count=count, offset=entry["offset"])
        except ValueError as e:
            raise CheckpointError(f"tensor {entry['name']!r} runs past the end of the file") from e
        return flat.reshape(entry["shape"]).astype(np.float32)

    state = ModelState(config=header["config"], step_count=int(header["step_count"]), meta=header["meta"])
    for entry in header["manifest"]:
        trainable = bool(entry["trainable"])
        state.params[entry["name"]] = Param(entry["name"], Tensor(read(entry), requires_grad=trainable), trainable)
    for item in header["moments"]:
        state.opt_moments[item["name"]] = (read(item["m"]), read(item["v"]))
    return state


def save_checkpoint(state: ModelState, path: str) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_checkpoint(state)
    out.write_bytes(blob)
    logger.info("Saved checkpoint %s (%d params, %.1f MB)", path, len(state.params), len(blob) / 1e6)


def load_checkpoint(path: str) -> ModelState:
    ckpt = Path(path)
    if not ckpt.exists():
        raise IoError(f"checkpoint not found: {path}")
    return decode_checkpoint(ckpt.read_bytes())
