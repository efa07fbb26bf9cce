"""Binary checkpoint: ``MOW1`` magic, u32 version, then tagged length-prefixed sections.

Each section is a 4-byte ASCII tag, a u64 payload length and the payload.
Integers and floats are little-endian; floats are 64-bit.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ParamVector
from .autoencoder import NetSpec
from .data import DataQueue
from .optimizer import AdamMoments, LatentBuffer, MowState

MAGIC = b"MOW1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.dtype.str, "data": [int(v) for v in obj.ravel()], "shape": list(obj.shape)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["data"], dtype=np.dtype(obj["__ndarray__"])).reshape(obj["shape"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _i64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<i8").tobytes()


@dataclass
class Checkpoint:
    spec: NetSpec
    state: MowState
    queue_state: dict
    digest: str

    def restore_queue(self, queue: DataQueue) -> DataQueue:
        queue.restore(self.queue_state)
        return queue


def encode_checkpoint(spec: NetSpec, state: MowState, queue: DataQueue, digest: str) -> bytes:
    theta = state.theta
    segs = [[name, off, list(shape)] for name, (off, shape) in theta.segments.items()]
    buf = state.buffer
    rows, dim = buf.vectors.shape
    mom = state.moments
    rng_json = {"prior": state.rng.bit_generator.state, "queue": queue.state()}
    sections = [
        (b"SPEC", json.dumps(spec.to_dict(), sort_keys=True).encode()),
        (b"SEGS", json.dumps(segs).encode()),
        (b"THET", _f64(theta.values)),
        (b"BUFV", struct.pack("<II", rows, dim) + _f64(buf.vectors)),
        (b"BUFT", _i64(buf.sources) + _i64(buf.generations)),
        (b"STEP", struct.pack("<Q", state.l)),
        (b"MOMS", b"" if mom is None else struct.pack("<Q", mom.t) + _f64(mom.m) + _f64(mom.v)),
        (b"RNGS", json.dumps(_jsonable(rng_json), sort_keys=True).encode()),
        (b"DGST", bytes.fromhex(digest)),
    ]
    out = [MAGIC, struct.pack("<I", VERSION)]
    for tag, payload in sections:
        out.append(tag + struct.pack("<Q", len(payload)) + payload)
    return b"".join(out)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a MoW checkpoint (bad magic)")
    if len(raw) < 8:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
    sections = {}
    pos = 8
    while pos < len(raw):
        if pos + 12 > len(raw):
            raise CheckpointError("truncated section header")
        tag = raw[pos:pos + 4].decode("ascii", "replace")
        (size,) = struct.unpack("<Q", raw[pos + 4:pos + 12])
        pos += 12
        if pos + size > len(raw):
            raise CheckpointError(f"section {tag} claims {size} bytes, {len(raw) - pos} remain")
        sections[tag] = raw[pos:pos + size]
        pos += size
    missing = {"SPEC", "SEGS", "THET", "BUFV", "BUFT", "STEP", "MOMS", "RNGS", "DGST"} - set(sections)
    if missing:
        raise CheckpointError(f"checkpoint lacks sections {sorted(missing)}")

    spec = NetSpec.from_dict(json.loads(sections["SPEC"]))
    segments = {name: (off, tuple(shape)) for name, off, shape in json.loads(sections["SEGS"])}
    theta = ParamVector(np.frombuffer(sections["THET"], "<f8").astype(np.float64), segments)
    rows, dim = struct.unpack("<II", sections["BUFV"][:8])
    vectors = np.frombuffer(sections["BUFV"][8:], "<f8").astype(np.float64).reshape(rows, dim)
    tags = np.frombuffer(sections["BUFT"], "<i8").astype(np.int64)
    if tags.size != 2 * rows:
        raise CheckpointError("buffer tags do not match buffer size")
    buffer = LatentBuffer(vectors, tags[:rows].copy(), tags[rows:].copy())
    (l,) = struct.unpack("<Q", sections["STEP"])
    moments = None
    if sections["MOMS"]:
        (t,) = struct.unpack("<Q", sections["MOMS"][:8])
        mv = np.frombuffer(sections["MOMS"][8:], "<f8").astype(np.float64)
        p = len(theta)
        if mv.size != 2 * p:
            raise CheckpointError("optimizer moments do not match parameter count")
        moments = AdamMoments(mv[:p].copy(), mv[p:].copy(), t)
    rngs = _from_jsonable(json.loads(sections["RNGS"]))
    gen = np.random.Generator(np.random.Philox())
    gen.bit_generator.state = rngs["prior"]
    state = MowState(theta, buffer, l, gen, moments)
    return Checkpoint(spec, state, rngs["queue"], sections["DGST"].hex())


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
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


def save_checkpoint(path, spec: NetSpec, state: MowState, queue: DataQueue, digest: str) -> None:
    atomic_write(path, encode_checkpoint(spec, state, queue, digest))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
