"""Checkpoint archive: model tensors plus a metadata record.

Layout (a ``torch.save`` zip archive holding one dict)::

    format        "surds-checkpoint"
    version       1
    model_config  ModelConfig fields
    metadata      {"stage": "pretrain"|"finetune", "epoch": int, "seed": int,
                   "config_hash": str, ...}
    state_dict    tensors keyed by hierarchical module names,
                  e.g. "encoder.layer1.0.conv1.weight"

Only plain Python types and tensors are stored, so archives load with
``weights_only=True``.
"""
from __future__ import annotations

import hashlib
import json
import shutil
from pathlib import Path

import torch

from .model import ModelConfig, SurdsNet

FORMAT = "surds-checkpoint"
VERSION = 1


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path, model: SurdsNet, metadata: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": model.config.to_dict(),
        "metadata": json.loads(json.dumps(metadata, default=str)),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(archive, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    archive = torch.load(Path(path), map_location="cpu", weights_only=True)
    if not isinstance(archive, dict) or archive.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} archive")
    if archive.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {archive.get('version')}")
    return archive


def load_checkpoint(path) -> tuple[SurdsNet, dict]:
    """Rebuild the model (in eval mode) and return it with its metadata."""
    archive = read_checkpoint(path)
    model = SurdsNet(ModelConfig(**archive["model_config"]))
    model.load_state_dict(archive["state_dict"])
    return model.eval(), archive["metadata"]


def link_latest(path, alias) -> Path:
    """Point ``alias`` at ``path`` (a plain copy, so it survives moves)."""
    alias = Path(alias)
    shutil.copyfile(path, alias)
    return alias
