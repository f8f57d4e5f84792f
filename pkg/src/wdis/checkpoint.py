"""Binary checkpoints of a training state.

Layout::

    magic    8 bytes  b"WDISCKPT"
    version  uint32 LE
    hlen     uint64 LE   length of the JSON header
    header   hlen bytes UTF-8 JSON (arrays index, rng state, iteration, history, config)
    payload  little-endian float64 arrays, concatenated in index order
    digest   32 bytes   sha256 over everything before it

Loading refuses unknown versions and checksum mismatches.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .models import ParamStore
from .trainer import AdamState, TrainConfig, TrainState

MAGIC = b"WDISCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _arrays(state: TrainState) -> dict[str, np.ndarray]:
    out = {f"param/{k}": v for k, v in state.params.arrays.items()}
    for group, st in sorted(state.optim.items()):
        for k in sorted(st.m):
            out[f"adam/{group}/m/{k}"] = st.m[k]
            out[f"adam/{group}/v/{k}"] = st.v[k]
    return out


def encode_checkpoint(state: TrainState, config: TrainConfig, extra: dict | None = None) -> bytes:
    arrays = _arrays(state)
    index, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": config.to_dict(),
        "iteration": state.iteration,
        "rng": state.rng.bit_generator.state,
        "adam_steps": {g: st.step for g, st in sorted(state.optim.items())},
        "arrays": index,
        "history": state.history,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(data: bytes) -> tuple[TrainState, TrainConfig, dict]:
    if len(data) < _PREFIX.size + 32:
        raise CheckpointError("checkpoint is truncated")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    start = _PREFIX.size
    header = json.loads(body[start : start + hlen].decode("utf-8"))
    payload = memoryview(body)[start + hlen :]
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    config = TrainConfig.from_dict(header["config"])
    params = ParamStore({k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")})
    optim = {}
    for group, step in header["adam_steps"].items():
        prefix = f"adam/{group}/"
        m = {k[len(prefix) + 2 :]: v for k, v in arrays.items() if k.startswith(prefix + "m/")}
        v = {k[len(prefix) + 2 :]: a for k, a in arrays.items() if k.startswith(prefix + "v/")}
        optim[group] = AdamState(m, v, step)
    rng_state = header["rng"]
    bitgen = getattr(np.random, rng_state["bit_generator"])()
    bitgen.state = rng_state
    state = TrainState(params, optim, np.random.Generator(bitgen), header["iteration"], header["history"])
    return state, config, header["extra"]


def save_checkpoint(path, state: TrainState, config: TrainConfig, extra: dict | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(state, config, extra))


def load_checkpoint(path) -> tuple[TrainState, TrainConfig, dict]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
