"""Checkpoint format: a JSON text manifest next to one raw little-endian float64 blob.

``manifest.json`` records the format version, model config, layout, provenance and one
entry per tensor (name, shape, byte offset, byte length); ``tensors.bin`` is the
concatenation of every tensor in manifest order. Saving the same model twice produces
byte-identical files, and loading then saving reproduces them exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .model import HybridLayout, HybridLM, ModelConfig

FORMAT = "hybrid-distill-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Provenance:
    stage: str  # "teacher", "built", or the last distillation stage run
    step: int = 0
    seed: int = 0
    teacher_sha256: str | None = None  # blob digest of the teacher this model came from
    extra: dict = field(default_factory=dict)


def _tensor_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8").tobytes()


def save_checkpoint(model: HybridLM, path: str | Path, provenance: Provenance) -> str:
    """Write ``path/manifest.json`` and ``path/tensors.bin``; returns the blob's sha256."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        raw = _tensor_bytes(tensor)
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    digest = hashlib.sha256(blob).hexdigest()
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": "float64-le",
        "model": asdict(model.cfg),
        "layout": model.layout.to_lists(),
        "provenance": asdict(provenance),
        "blob_sha256": digest,
        "blob_nbytes": len(blob),
        "tensors": entries,
    }
    (path / BLOB).write_bytes(blob)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return digest


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path / MANIFEST}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: manifest version {manifest.get('version')!r}, this build reads {VERSION}")
    return manifest


def load_checkpoint(path: str | Path) -> tuple[HybridLM, dict]:
    """Rebuild the model from ``path``; raises :class:`CheckpointError` on any inconsistency."""
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / BLOB).read_bytes()
    if len(blob) != manifest["blob_nbytes"] or hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"{path / BLOB}: blob does not match its manifest (corrupt or truncated)")
    try:
        cfg = ModelConfig(**manifest["model"])
        layout = HybridLayout(tuple(tuple(r) for r in manifest["layout"]))
        model = HybridLM(cfg, layout)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model description ({exc})") from exc
    expected = model.state_dict()
    state, end = {}, 0
    for entry in manifest["tensors"]:
        name, shape, off, nbytes = entry["name"], tuple(entry["shape"]), entry["offset"], entry["nbytes"]
        if off != end:
            raise CheckpointError(f"{path}: tensor {name} at offset {off}, expected {end} (gap or overlap)")
        if name not in expected or tuple(expected[name].shape) != shape or nbytes != 8 * int(np.prod(shape)):
            raise CheckpointError(f"{path}: tensor {name} does not fit the model")
        arr = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float64))
        end = off + nbytes
    if end != len(blob) or set(state) != set(expected):
        raise CheckpointError(f"{path}: tensor table does not cover the blob / model exactly")
    model.load_state_dict(state)
    model.eval()
    return model, manifest


def blob_sha256(path: str | Path) -> str:
    return read_manifest(path)["blob_sha256"]
