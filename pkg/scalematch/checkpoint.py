"""Single-file checkpoints: length-prefixed JSON manifest followed by little-endian float32 arrays."""

import hashlib
import json
import logging
import os
import struct
import tempfile
from collections import OrderedDict
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch
from torch import nn

from scalematch.errors import (
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointVersionError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")


class CheckpointManager:
    """Writes and reads checkpoint containers."""

    def __init__(self, format_version: int = FORMAT_VERSION):
        self.format_version = format_version

    @contextmanager
    def atomic_write(self, path: str):
        """Yield a temp file next to ``path``; it replaces ``path`` only if the block succeeds."""
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
        try:
            with os.fdopen(fd, "wb") as handle:
                yield handle
                handle.flush()
                os.fsync(handle.fileno())
            os.replace(tmp_name, target)
        except BaseException:
            if os.path.exists(tmp_name):
                os.remove(tmp_name)
            raise

    def save(self, path: str, state: Dict[str, torch.Tensor], config: Dict[str, Any], step: int) -> None:
        arrays = []
        chunks = []
        for name, tensor in state.items():
            data = tensor.detach().cpu()
            arrays.append({"name": name, "shape": list(data.shape), "dtype": str(data.dtype).replace("torch.", "")})
            chunks.append(data.to(torch.float32).numpy().astype("<f4").tobytes())
        payload = b"".join(chunks)

        manifest = {
            "format_version": self.format_version,
            "config": config,
            "step": int(step),
            "arrays": arrays,
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        }
        header = json.dumps(manifest, sort_keys=True).encode("utf-8")
        with self.atomic_write(path) as handle:
            handle.write(_LENGTH.pack(len(header)))
            handle.write(header)
            handle.write(payload)
        logger.info("Saved checkpoint %s (step %d, %d arrays)", path, step, len(arrays))

    def read(self, path: str) -> Tuple[Dict[str, Any], "OrderedDict[str, torch.Tensor]"]:
        """Return (manifest, arrays) after version and integrity checks."""
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"Checkpoint not found: {path}")
        raw = path.read_bytes()
        if len(raw) < _LENGTH.size:
            raise CheckpointIntegrityError(f"{path}: truncated header")
        (header_len,) = _LENGTH.unpack_from(raw)
        header_end = _LENGTH.size + header_len
        if len(raw) < header_end:
            raise CheckpointIntegrityError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(raw[_LENGTH.size:header_end].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointIntegrityError(f"{path}: unreadable manifest ({e})") from e

        version = manifest.get("format_version")
        if version != self.format_version:
            raise CheckpointVersionError(f"{path}: format version {version}, expected {self.format_version}")

        payload = raw[header_end:]
        expected = sum(int(np.prod(a["shape"], dtype=np.int64)) for a in manifest["arrays"]) * 4
        if len(payload) != expected:
            raise CheckpointIntegrityError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
        if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
            raise CheckpointIntegrityError(f"{path}: payload checksum mismatch")

        arrays: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        offset = 0
        for entry in manifest["arrays"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            values = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
            offset += count * 4
            arrays[entry["name"]] = torch.from_numpy(values.astype(np.float32)).to(getattr(torch, entry["dtype"]))
        return manifest, arrays

    def load_into(self, path: str, model: nn.Module) -> Dict[str, Any]:
        """Load arrays into ``model``; every array is checked before any parameter is touched."""
        manifest, arrays = self.read(path)
        state = model.state_dict()
        for name, expected in state.items():
            if name not in arrays:
                raise ShapeMismatchError(f"Array {name} is missing from {path}")
            if tuple(arrays[name].shape) != tuple(expected.shape):
                raise ShapeMismatchError(
                    f"Array {name}: checkpoint shape {tuple(arrays[name].shape)}, model shape {tuple(expected.shape)}"
                )
        extra = [name for name in arrays if name not in state]
        if extra:
            raise ShapeMismatchError(f"Array {extra[0]} in {path} has no counterpart in the model")
        model.load_state_dict(arrays, strict=True)
        return manifest


# Global checkpoint manager instance
checkpoint_manager = CheckpointManager()


def save_checkpoint(path: str, model: nn.Module, config: Optional[Dict[str, Any]] = None, step: int = 0) -> None:
    checkpoint_manager.save(path, model.state_dict(), config or {}, step)


def load_checkpoint(path: str, model: nn.Module) -> Dict[str, Any]:
    return checkpoint_manager.load_into(path, model)
