"""Checkpoint directory format, versioned "ELMCKPT 1".

A checkpoint is a directory of three files:

    manifest.txt   header, config hash, stage tag, epoch, tensor index,
                   and content digests of the other two files
    tensors.bin    raw little-endian IEEE-754 / integer tensor payloads,
                   concatenated in manifest order
    state.json     everything else (ffn dims, score history, optimizer
                   step counts, stage outputs)

Tensors round-trip bitwise: bytes are written little-endian regardless
of host order and converted back to native on load. The manifest is
written last and digests the payload files, so a checkpoint killed
mid-write is either the old complete one or detectably invalid, never
silently truncated.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataError

MAGIC = "ELMCKPT 1"
ALLOWED_DTYPES = ("float32", "float64", "int32", "int64")


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    config_hash: str
    arrays: dict
    state: dict


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _replace_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(path, stage: str, epoch: int, config_hash: str,
                    arrays: dict, state: dict) -> None:
    if any(" " in name or "\n" in name for name in arrays):
        raise ContractError("tensor names must not contain whitespace")
    os.makedirs(path, exist_ok=True)

    index = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d,
        # and tobytes() already emits C order for any layout
        arr = np.asarray(arrays[name])
        dtype = arr.dtype.name
        if dtype not in ALLOWED_DTYPES:
            raise ContractError(f"{name}: unsupported dtype {dtype}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        shape = ",".join(str(d) for d in arr.shape) or "-"
        index.append(f"tensor {name} {dtype} {shape} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)

    tensors_path = os.path.join(path, "tensors.bin")
    state_path = os.path.join(path, "state.json")
    _replace_write(tensors_path, b"".join(chunks))
    _replace_write(state_path,
                   json.dumps(state, sort_keys=True).encode("utf-8"))

    lines = [
        MAGIC,
        f"config_hash {config_hash}",
        f"stage {stage}",
        f"epoch {epoch}",
        f"payload {_digest(tensors_path)} {offset}",
        f"state {_digest(state_path)}",
    ]
    lines.extend(index)
    _replace_write(os.path.join(path, "manifest.txt"),
                   ("\n".join(lines) + "\n").encode("utf-8"))


def checkpoint_exists(path) -> bool:
    return os.path.isfile(os.path.join(path, "manifest.txt"))


def load_checkpoint(path, expect_hash: str = None,
                    force: bool = False) -> Checkpoint:
    manifest_path = os.path.join(path, "manifest.txt")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}")
    if not lines or lines[0] != MAGIC:
        raise DataError(f"{manifest_path}: bad header, expected {MAGIC!r}")

    meta = {}
    index = []
    for line in lines[1:]:
        if not line:
            continue
        kind, rest = line.split(" ", 1)
        if kind == "tensor":
            name, dtype, shape, off, nbytes = rest.split(" ")
            index.append((name, dtype, shape, int(off), int(nbytes)))
        else:
            meta[kind] = rest
    for want in ("config_hash", "stage", "epoch", "payload", "state"):
        if want not in meta:
            raise DataError(f"{manifest_path}: missing {want} line")

    if expect_hash is not None and meta["config_hash"] != expect_hash:
        if not force:
            raise ConfigError(
                f"checkpoint {path} was written under config hash "
                f"{meta['config_hash']}, current config hashes to "
                f"{expect_hash}; pass force to load anyway"
            )

    tensors_path = os.path.join(path, "tensors.bin")
    state_path = os.path.join(path, "state.json")
    payload_digest, payload_size = meta["payload"].split(" ")
    if _digest(tensors_path) != payload_digest:
        raise DataError(f"{tensors_path}: content digest mismatch; "
                        "checkpoint is incomplete or corrupt")
    if _digest(state_path) != meta["state"]:
        raise DataError(f"{state_path}: content digest mismatch; "
                        "checkpoint is incomplete or corrupt")

    with open(tensors_path, "rb") as fh:
        blob = fh.read()
    if len(blob) != int(payload_size):
        raise DataError(f"{tensors_path}: size {len(blob)} != recorded "
                        f"{payload_size}")

    arrays = {}
    for name, dtype, shape_s, off, nbytes in index:
        if dtype not in ALLOWED_DTYPES:
            raise DataError(f"{name}: unsupported dtype {dtype}")
        shape = () if shape_s == "-" else tuple(
            int(d) for d in shape_s.split(","))
        le = np.dtype(dtype).newbyteorder("<")
        flat = np.frombuffer(blob, dtype=le, count=nbytes // le.itemsize,
                             offset=off)
        arrays[name] = flat.astype(dtype, copy=True).reshape(shape)

    with open(state_path, encoding="utf-8") as fh:
        state = json.load(fh)
    return Checkpoint(stage=meta["stage"], epoch=int(meta["epoch"]),
                      config_hash=meta["config_hash"], arrays=arrays,
                      state=state)
