"""Binary checkpoints: magic, version, JSON header, raw row-major tensor payload.

Layout::

    b"VRLCKPT\\0"  uint32 version  uint64 header_len  header (UTF-8 JSON)  payload

The header lists every tensor as ``{name, dtype, shape, offset, nbytes}``
relative to the start of the payload, plus the model kind and its
hyperparameters.  Arrays are written in native little-endian byte order and
read back bit for bit.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VRLCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    hparams: dict
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix/`` with the prefix removed."""
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        a = np.ascontiguousarray(arr)
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": ckpt.kind, "hparams": ckpt.hparams, "meta": ckpt.meta,
                         "tensors": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    payload = memoryview(blob)[start + hlen:]
    tensors = {}
    for e in header["tensors"]:
        if e["offset"] + e["nbytes"] > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(payload[e["offset"]:e["offset"] + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return Checkpoint(header["kind"], header["hparams"], tensors, header.get("meta", {}))


# ---------------------------------------------------------------------------
# models


def _prefixed(prefix: str, state: dict) -> dict:
    return {f"{prefix}/{k}": np.asarray(v) for k, v in state.items()}


def save_model(path, model, kind: str, optimizer=None, extra_modules: dict | None = None,
               meta: dict | None = None) -> None:
    """Store ``model`` (plus optional optimizer state and auxiliary modules)."""
    tensors = _prefixed("model", model.state_dict())
    if optimizer is not None:
        tensors.update(_prefixed("optim", optimizer.state_dict()))
    for name, mod in (extra_modules or {}).items():
        tensors.update(_prefixed(name, mod.state_dict()))
    save_checkpoint(path, Checkpoint(kind, model.hparams(), tensors, meta or {}))


def load_generator(path, expect_vocab: int | None = None):
    from .generator import GeneratorConfig, GeneratorModel
    from . import tensor as T

    ck = load_checkpoint(path)
    if ck.kind != "generator":
        raise CheckpointError(f"{path}: expected a generator checkpoint, found {ck.kind!r}")
    if expect_vocab is not None and ck.hparams["vocab_size"] != expect_vocab:
        raise CheckpointError(f"{path}: vocabulary size {ck.hparams['vocab_size']} "
                              f"does not match {expect_vocab}")
    state = ck.section("model")
    with T.default_dtype(state["out_weight"].dtype):
        model = GeneratorModel(GeneratorConfig(**ck.hparams))
    model.load_state_dict(state)
    return model, ck


def load_predictor(path, expect_vocab: int | None = None):
    from .predictor import PredictorModel
    from . import tensor as T

    ck = load_checkpoint(path)
    if ck.kind != "predictor":
        raise CheckpointError(f"{path}: expected a predictor checkpoint, found {ck.kind!r}")
    if expect_vocab is not None and ck.hparams["vocab_size"] != expect_vocab:
        raise CheckpointError(f"{path}: vocabulary size {ck.hparams['vocab_size']} "
                              f"does not match {expect_vocab}")
    state = ck.section("model")
    with T.default_dtype(state["out.weight"].dtype):
        model = PredictorModel(**ck.hparams)
    model.load_state_dict(state)
    model.eval()
    return model, ck
