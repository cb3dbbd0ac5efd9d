"""Binary tensor container used for model checkpoints and item corpora.

Layout::

    SASSREC-CONTAINER\\n
    <header length in bytes, decimal>\\n
    <UTF-8 JSON header>\\n
    <tensor bytes: little-endian float64 / int64, back to back>

The header lists every tensor's name, dtype, shape, byte offset and size,
the container kind and format version, the model schema hash and a SHA-256
of the data section.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .core import Adagrad
from .model import SASSModel

MAGIC = b"SASSREC-CONTAINER\n"
FORMAT_VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class SchemaMismatchError(CheckpointError):
    pass


def write_container(path: str | Path, kind: str, tensors: dict[str, np.ndarray], header: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    body = b"".join(blobs)
    head = dict(header)
    head.update({"kind": kind, "version": FORMAT_VERSION, "tensors": entries, "sha256": hashlib.sha256(body).hexdigest()})
    head_bytes = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(head_bytes)}\n".encode())
        fh.write(head_bytes + b"\n")
        fh.write(body)


def read_container(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CorruptCheckpointError(f"{path}: not a container file (bad magic)")
    pos = len(MAGIC)
    nl = raw.find(b"\n", pos)
    try:
        n = int(raw[pos:nl])
        head = json.loads(raw[nl + 1 : nl + 1 + n])
    except (ValueError, json.JSONDecodeError):
        raise CorruptCheckpointError(f"{path}: unreadable header") from None
    if head.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {head.get('version')} (expected {FORMAT_VERSION})")
    if kind is not None and head.get("kind") != kind:
        raise CorruptCheckpointError(f"{path}: expected a {kind} container, found {head.get('kind')}")
    body = raw[nl + 1 + n + 1 :]
    expected = sum(t["nbytes"] for t in head["tensors"])
    if len(body) != expected:
        raise CorruptCheckpointError(f"{path}: data section has {len(body)} bytes, header promises {expected}")
    if hashlib.sha256(body).hexdigest() != head["sha256"]:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    tensors = {}
    for t in head["tensors"]:
        chunk = body[t["offset"] : t["offset"] + t["nbytes"]]
        tensors[t["name"]] = np.frombuffer(chunk, dtype=_DTYPES[t["dtype"]]).reshape(t["shape"]).copy()
    return head, tensors


def save_checkpoint(
    model: SASSModel,
    path: str | Path,
    optimizer: Adagrad | None = None,
    meta: dict | None = None,
) -> None:
    tensors = {f"param/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        tensors.update({f"adagrad/{k}": v for k, v in optimizer.accumulators.items()})
    header = {
        "schema_hash": model.schema_hash(),
        "architecture": model.architecture(),
        "seed": model.seed,
        "optimizer": None
        if optimizer is None
        else {"learning_rate": optimizer.learning_rate, "epsilon": optimizer.epsilon},
        "meta": meta or {},
    }
    write_container(path, "checkpoint", tensors, header)


def load_checkpoint(path: str | Path, expected_schema_hash: str | None = None):
    """Returns ``(model, optimizer_or_None, header)``."""
    head, tensors = read_container(path, "checkpoint")
    if expected_schema_hash is not None and head["schema_hash"] != expected_schema_hash:
        raise SchemaMismatchError(f"{path}: schema hash {head['schema_hash']} != expected {expected_schema_hash}")
    model = SASSModel.from_architecture(head["architecture"], seed=head.get("seed", 0))
    if model.schema_hash() != head["schema_hash"]:
        raise CorruptCheckpointError(f"{path}: architecture does not match its schema hash")
    model.load_state_dict({k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")})
    opt = None
    if head.get("optimizer"):
        opt = Adagrad(head["optimizer"]["learning_rate"], head["optimizer"]["epsilon"])
        opt.accumulators = {k[len("adagrad/") :]: v for k, v in tensors.items() if k.startswith("adagrad/")}
    return model, opt, head


def restore_from_pretrain(path: str | Path, model: SASSModel) -> SASSModel:
    """Copy embeddings and tower weights from a pretraining checkpoint into ``model``.

    The optimizer is not restored; fine-tuning starts with fresh accumulators.
    """
    head, tensors = read_container(path, "checkpoint")
    if head["schema_hash"] != model.schema_hash():
        raise SchemaMismatchError(f"{path}: pretrain schema {head['schema_hash']} != model schema {model.schema_hash()}")
    model.load_state_dict({k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")})
    return model
