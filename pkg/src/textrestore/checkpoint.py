"""Versioned model checkpoints: format tag, kind, config snapshot + hash,
and the parameter blob in one torch file."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import torch

FORMAT_TAG = "textrestore-ckpt"
VERSION = 1


class CheckpointError(RuntimeError):
    """Missing, malformed, or mismatched checkpoint."""


def _hash_config(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path: str | Path, kind: str, config: dict, state_dict: dict[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": FORMAT_TAG,
        "version": VERSION,
        "kind": kind,
        "config": config,
        "config_hash": _hash_config(config),
        "state": state_dict,
    }, path)


def load_checkpoint(path: str | Path, expected_kind: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path} is not a {FORMAT_TAG} file")
    if blob.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {blob.get('version')}")
    if _hash_config(blob["config"]) != blob["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch (corrupt checkpoint)")
    if expected_kind is not None and blob.get("kind") != expected_kind:
        raise CheckpointError(f"{path}: kind {blob.get('kind')!r} != expected {expected_kind!r}")
    return blob


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
