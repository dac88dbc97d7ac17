"""Deterministic tensor containers.

Payloads are safetensors files: named tensors plus one JSON metadata string.
Identical content always produces identical bytes, which pickle-based
``torch.save`` does not guarantee.
"""
from __future__ import annotations

import json
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load as _load
from safetensors.torch import save as _save

META_KEY = "toolseg"


class FormatError(ValueError):
    pass


def pack(tensors: dict[str, torch.Tensor], meta: dict) -> bytes:
    flat = {k: v.detach().contiguous().clone() for k, v in tensors.items()}
    return _save(flat, metadata={META_KEY: json.dumps(meta, sort_keys=True)})


def unpack(data: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    try:
        tensors = _load(data)
        header_len = int.from_bytes(data[:8], "little")
        header = json.loads(data[8:8 + header_len])
        meta = json.loads(header["__metadata__"][META_KEY])
    except (SafetensorError, KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"unreadable container: {exc}") from exc
    return tensors, meta


def write_atomic(path, data: bytes) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def read_meta(path) -> dict:
    """Metadata only, without materializing tensors."""
    with Path(path).open("rb") as fh:
        try:
            n = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(n))
            return json.loads(header["__metadata__"][META_KEY])
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"unreadable container {path}: {exc}") from exc


def subtree(tensors: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    p = prefix + "/"
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def prefixed(tensors: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    return {f"{prefix}/{k}": v for k, v in tensors.items()}
