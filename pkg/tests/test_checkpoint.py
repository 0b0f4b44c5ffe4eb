"""Checkpoint container: round trips, determinism, model rebuild."""

import numpy as np
import pytest

from loopfit import checkpoint
from loopfit.autograd import Tensor
from loopfit.config import default_config
from loopfit.errors import FrameFormatError
from loopfit.features import PhonemeSequence
from loopfit.loop import teacher_forced_pass
from loopfit.training import build_models

RNG = np.random.default_rng(61)


def test_save_load_round_trip(tmp_path):
    path = tmp_path / "c.ckpt"
    tensors = {
        "w": RNG.normal(size=(3, 4)).astype(np.float32),
        "b": RNG.normal(size=7).astype(np.float32),
        "scalarish": np.array([2.5], dtype=np.float32),
    }
    record = {"alpha": 10.0, "name": "test", "count": 3}
    checkpoint.save_checkpoint(path, record, tensors)
    rec, loaded = checkpoint.load_checkpoint(path)
    assert rec["alpha"] == "10.0"
    assert rec["name"] == "test"
    for key in tensors:
        np.testing.assert_array_equal(loaded[key], tensors[key])
        assert loaded[key].dtype == np.float32


def test_identical_content_identical_bytes(tmp_path):
    tensors = {"x": np.arange(6, dtype=np.float32).reshape(2, 3)}
    record = {"k": "v"}
    a, b = tmp_path / "a", tmp_path / "b"
    checkpoint.save_checkpoint(a, record, tensors)
    checkpoint.save_checkpoint(b, dict(record), {k: v.copy() for k, v in tensors.items()})
    assert a.read_bytes() == b.read_bytes()
    assert checkpoint.file_sha256(a) == checkpoint.file_sha256(b)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(FrameFormatError):
        checkpoint.load_checkpoint(path)


def _micro_cfg():
    cfg = default_config()
    cfg.update(
        {
            "dtype": "float32",
            "model.n_phonemes": 5,
            "model.d_o": 6,
            "model.buffer_slots": 3,
            "model.d_b": 8,
            "model.d_p": 6,
            "model.d_z": 6,
            "model.components": 2,
            "model.hidden": 8,
            "encoder.channels": 2,
            "encoder.conv_layers": 2,
            "encoder.fc_width": 6,
            "encoder.fc_layers": 1,
        }
    )
    return cfg


def test_model_rebuild_reproduces_outputs(tmp_path):
    cfg = _micro_cfg()
    model, encoder = build_models(cfg, seed=4)
    path = tmp_path / "model.ckpt"
    checkpoint.save_model(path, cfg, model, encoder)

    loaded_model, loaded_encoder, loaded_cfg, record, _ = checkpoint.load_model(path)
    assert loaded_cfg["model.buffer_slots"] == 3
    assert record["model.has_encoder"] == "True"
    assert loaded_encoder is not None

    s = PhonemeSequence(np.array([0, 2, 4]), 5)
    y = RNG.normal(size=(5, 6)).astype(np.float32)
    zv = RNG.normal(size=(1, 6)).astype(np.float32)
    zv /= np.linalg.norm(zv)
    out_a = teacher_forced_pass(model, s, y, z=Tensor(zv)).data
    out_b = teacher_forced_pass(loaded_model, s, y, z=Tensor(zv)).data
    np.testing.assert_array_equal(out_a, out_b)

    frames = RNG.normal(size=(9, 6)).astype(np.float32)
    from loopfit.features import VocoderFrameSequence

    seq = VocoderFrameSequence(frames)
    np.testing.assert_array_equal(
        encoder.embed(seq).vector, loaded_encoder.embed(seq).vector
    )


def test_agnostic_model_round_trip(tmp_path):
    cfg = _micro_cfg()
    cfg["model.mode"] = "agnostic"
    model, encoder = build_models(cfg, seed=1)
    assert encoder is None
    path = tmp_path / "agn.ckpt"
    checkpoint.save_model(path, cfg, model, None)
    loaded_model, loaded_encoder, _, _, _ = checkpoint.load_model(path)
    assert loaded_encoder is None
    assert not loaded_model.is_embedded
