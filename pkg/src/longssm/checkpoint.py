"""Single-file checkpoints.

Layout is safetensors: an 8-byte little-endian header length, a JSON header
naming every tensor's dtype, shape and byte range, then raw little-endian
tensor bytes. The header metadata carries a format tag, a version number and
the serialized :class:`ModelConfig`.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch
from safetensors import safe_open
from safetensors.torch import save

from longssm.model import LmModel, ModelConfig

FORMAT = "longssm-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: LmModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    meta = {
        "format": FORMAT,
        "version": str(VERSION),
        "model_config": json.dumps(model.cfg.to_dict(), sort_keys=True),
    }
    if extra:
        meta["extra"] = json.dumps(extra, sort_keys=True)
    raw = save(tensors, metadata=meta)
    path.write_bytes(_canonical(raw))
    return path


def _canonical(raw: bytes) -> bytes:
    # the writer emits metadata in hash order; sorting keys makes files byte-stable
    n = int.from_bytes(raw[:8], "little")
    header = json.loads(raw[8:8 + n])
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    return len(text).to_bytes(8, "little") + text + raw[8 + n:]


def read_metadata(path) -> dict:
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if int(meta.get("version", -1)) > VERSION:
        raise CheckpointError(f"{path} has unsupported version {meta.get('version')}")
    return meta


def load_checkpoint(path) -> LmModel:
    meta = read_metadata(path)
    cfg = ModelConfig.from_dict(json.loads(meta["model_config"]))
    model = LmModel(cfg)
    tensors = {}
    with safe_open(str(path), framework="pt") as f:
        for k in f.keys():
            tensors[k] = f.get_tensor(k)
    if not cfg.tie_embeddings and model.lm_head is None:
        raise CheckpointError("config and model disagree on head tying")
    model.load_state_dict(tensors, strict=True)
    model.eval()
    return model
