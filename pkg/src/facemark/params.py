"""Flat parameter store keyed by stable path strings, plus checkpoint I/O.

Parameters live in a plain dict mapping path -> float64 ndarray.  Gradients
use a second dict with the same keys; `accumulate` adds into it so a caller
can own one gradient buffer across a whole batch.
"""

from __future__ import annotations

import io

import numpy as np

from .errors import ConfigError

Params = dict[str, np.ndarray]
Grads = dict[str, np.ndarray]

CHECKPOINT_MAGIC = "facemark-ckpt v1"


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------

def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    """Glorot-uniform weight init; `shape` defaults to (fan_in, fan_out)."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


def subdict(params: Params, prefix: str) -> dict[str, np.ndarray]:
    """View of all entries under `prefix` with the prefix stripped."""
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def accumulate(grads: Grads, prefix: str, local: dict[str, np.ndarray]) -> None:
    """Add local gradients into the flat buffer under `prefix`."""
    for k, v in local.items():
        key = prefix + k
        if key in grads:
            grads[key] += v
        else:
            grads[key] = np.array(v, dtype=np.float64)


def zero_grads_like(params: Params) -> Grads:
    return {k: np.zeros_like(v) for k, v in params.items()}


def scale_grads(grads: Grads, factor: float) -> None:
    for v in grads.values():
        v *= factor


def add_grads(total: Grads, part: Grads) -> Grads:
    for k, v in part.items():
        if k in total:
            total[k] += v
        else:
            total[k] = np.array(v, dtype=np.float64)
    return total


# ---------------------------------------------------------------------------
# Counting
# ---------------------------------------------------------------------------

def count_parameters(params: Params) -> tuple[dict[str, int], int]:
    """Exact element count per parameter path and the total."""
    per_path = {k: int(v.size) for k, v in sorted(params.items())}
    return per_path, sum(per_path.values())


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------
# Text header followed by raw little-endian float64 bytes:
#
#   facemark-ckpt v1
#   meta <key> <value>          (zero or more lines)
#   params <count>
#   <path> <dim0,dim1,...>      (count lines, sorted by path)
#   data
#   <raw bytes in header order>
#
# Bit-exact and byte-deterministic by construction.

def save_checkpoint(path: str, params: Params, meta: dict[str, str] | None = None) -> None:
    buf = io.BytesIO()
    buf.write(f"{CHECKPOINT_MAGIC}\n".encode())
    for k, v in sorted((meta or {}).items()):
        if any(c.isspace() for c in k) or "\n" in str(v):
            raise ConfigError(f"invalid checkpoint meta entry: {k!r}")
        buf.write(f"meta {k} {v}\n".encode())
    keys = sorted(params)
    buf.write(f"params {len(keys)}\n".encode())
    for k in keys:
        arr = params[k]
        dims = ",".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        buf.write(f"{k} {dims}\n".encode())
    buf.write(b"data\n")
    for k in keys:
        buf.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str) -> tuple[Params, dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    head, sep, rest = blob.partition(b"\ndata\n")
    if not sep:
        raise ConfigError(f"not a checkpoint file: {path}")
    lines = head.decode().split("\n")
    if lines[0] != CHECKPOINT_MAGIC:
        raise ConfigError(f"unsupported checkpoint header in {path}: {lines[0]!r}")
    meta: dict[str, str] = {}
    i = 1
    while i < len(lines) and lines[i].startswith("meta "):
        _, key, value = lines[i].split(" ", 2)
        meta[key] = value
        i += 1
    if not lines[i].startswith("params "):
        raise ConfigError(f"malformed checkpoint header in {path}")
    count = int(lines[i].split(" ", 1)[1])
    entries = []
    for line in lines[i + 1 : i + 1 + count]:
        name, dims = line.rsplit(" ", 1)
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split(","))
        entries.append((name, shape))
    sizes = [int(np.prod(shape)) if shape else 1 for _, shape in entries]
    if sum(sizes) * 8 != len(rest):
        raise ConfigError(
            f"checkpoint payload size mismatch in {path}: header promises "
            f"{sum(sizes) * 8} bytes, found {len(rest)}"
        )
    params: Params = {}
    offset = 0
    for (name, shape), n in zip(entries, sizes):
        arr = np.frombuffer(rest, dtype="<f8", count=n, offset=offset).reshape(shape)
        params[name] = arr.astype(np.float64)  # writable copy
        offset += n * 8
    return params, meta
