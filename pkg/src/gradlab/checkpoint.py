"""Checkpoint files for the ASR model and the speaker encoder.

A checkpoint is a UTF-8 JSON document::

    {
      "format": "gradlab-checkpoint",
      "version": 1,
      "kind": "asr-model" | "speaker-encoder",
      "config": {...},            # ModelConfig / EncoderConfig fields
      "params": [float, ...]      # flat vector in canonical order
    }

Floats are written with Python's shortest round-trip repr, so a save/load
cycle reproduces the parameters bit for bit.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ConfigError
from .model import ModelConfig, ParamVector
from .speaker import Encoder, EncoderConfig

FORMAT = "gradlab-checkpoint"
VERSION = 1


def _dump(path: Path, kind: str, config: dict, flat: np.ndarray) -> None:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config,
        "params": [float(v) for v in flat],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def save_checkpoint(path: Union[str, Path], obj: Union[ParamVector, Encoder]) -> None:
    if isinstance(obj, ParamVector):
        _dump(Path(path), "asr-model", obj.config.to_dict(), obj.flatten())
    elif isinstance(obj, Encoder):
        _dump(Path(path), "speaker-encoder", obj.config.to_dict(), obj.flatten())
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def load_checkpoint(path: Union[str, Path]) -> Union[ParamVector, Encoder]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT:
        raise ConfigError(f"{path} is not a gradlab checkpoint")
    if doc.get("version") != VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    flat = np.array(doc["params"], dtype=np.float64)
    if doc["kind"] == "asr-model":
        return ParamVector.unflatten(ModelConfig.from_dict(doc["config"]), flat)
    if doc["kind"] == "speaker-encoder":
        return Encoder.unflatten(EncoderConfig.from_dict(doc["config"]), flat)
    raise ConfigError(f"unknown checkpoint kind {doc['kind']!r}")
