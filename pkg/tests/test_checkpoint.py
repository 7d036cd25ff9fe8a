import json

import numpy as np
import pytest

from gradlab.checkpoint import load_checkpoint, save_checkpoint
from gradlab.errors import ConfigError
from gradlab.model import ModelConfig, ParamVector, init_model
from gradlab.speaker import Encoder, EncoderConfig, init_encoder


def test_model_roundtrip_bit_exact(tmp_path):
    cfg = ModelConfig(4, (7, 3), 2, activation="tanh", recurrent_width=3, match_layers=(0, 2))
    p = init_model(cfg, 3)
    flat = p.flatten() + np.random.default_rng(0).normal(size=p.size) * 1e-3
    p = ParamVector.unflatten(cfg, flat)
    save_checkpoint(tmp_path / "m.json", p)
    back = load_checkpoint(tmp_path / "m.json")
    assert isinstance(back, ParamVector)
    assert back.config == cfg
    np.testing.assert_array_equal(back.flatten(), flat)


def test_encoder_roundtrip(tmp_path):
    enc = init_encoder(EncoderConfig(hidden=(5, 4), seed=2))
    save_checkpoint(tmp_path / "e.json", enc)
    back = load_checkpoint(tmp_path / "e.json")
    assert isinstance(back, Encoder)
    np.testing.assert_array_equal(back.flatten(), enc.flatten())


def test_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.json"
    path.write_text(json.dumps({"format": "other"}))
    with pytest.raises(ConfigError):
        load_checkpoint(path)
    path.write_text(json.dumps({"format": "gradlab-checkpoint", "version": 99}))
    with pytest.raises(ConfigError):
        load_checkpoint(path)
    with pytest.raises(TypeError):
        save_checkpoint(path, object())
