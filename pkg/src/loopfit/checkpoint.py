"""Self-describing checkpoint container.

Layout: magic "VLCK", u32 format version, a flat key = value config record,
then named tensors stored as little-endian 32-bit floats. Training state
(epoch counters, best validation loss) rides in the config record; optimizer
moments ride as tensors, so a run resumes bit-compatibly when the training
dtype is float32.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from . import config as config_mod
from .errors import FrameFormatError

MAGIC = b"VLCK"
VERSION = 1


def save_checkpoint(path, config_record, tensors):
    """Write a config record (dict of stringable values) and named float
    tensors; tensor order is sorted by name for byte determinism."""
    lines = []
    for key in sorted(config_record):
        lines.append(f"{key} = {config_record[key]}")
    blob = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read back (config record dict of strings, dict of float32 tensors)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise FrameFormatError(f"not a checkpoint file: {path!r}", 0)
    offset = 4
    version = struct.unpack_from("<I", data, offset)[0]
    offset += 4
    if version != VERSION:
        raise FrameFormatError(f"unsupported checkpoint version {version}", 4)
    (blob_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    record = {}
    for line in data[offset : offset + blob_len].decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        record[key.strip()] = value.strip()
    offset += blob_len
    (n_tensors,) = struct.unpack_from("<I", data, offset)
    offset += 4
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", data, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", data, offset) if ndim else ()
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        tensors[name] = arr.copy()
    return record, tensors


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# -- model-level helpers ---------------------------------------------------------


def gather_state(model, encoder=None, optimizer=None):
    tensors = {}
    for name, p in model.named_parameters():
        tensors[f"model.{name}"] = p.data
    if encoder is not None:
        for name, p in encoder.named_parameters():
            tensors[f"encoder.{name}"] = p.data
        for name, arr in encoder.state_arrays().items():
            tensors[f"encoder.{name}"] = arr
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
    return tensors


def restore_state(tensors, model, encoder=None, optimizer=None):
    dtype = model.config.np_dtype
    for name, p in model.named_parameters():
        p.data = np.asarray(tensors[f"model.{name}"], dtype=dtype).reshape(p.data.shape)
    if encoder is not None:
        enc_dtype = encoder.config.np_dtype
        for name, p in encoder.named_parameters():
            p.data = np.asarray(tensors[f"encoder.{name}"], dtype=enc_dtype).reshape(
                p.data.shape
            )
        encoder.load_state_arrays(
            {
                name[len("encoder.") :]: arr
                for name, arr in tensors.items()
                if name.startswith("encoder.bn")
            }
        )
    if optimizer is not None:
        optimizer.load_state_arrays(tensors)


def save_model(path, cfg, model, encoder=None, optimizer=None, extra_record=None):
    record = dict(cfg)
    record["format.version"] = VERSION
    record["model.has_encoder"] = encoder is not None
    if extra_record:
        record.update(extra_record)
    save_checkpoint(path, record, gather_state(model, encoder, optimizer))


def load_model(path, seed=0):
    """Rebuild (model, encoder or None, run config, raw record, tensors)."""
    from .encoder import SpeakerEncoder
    from .loop import LoopModel

    record, tensors = load_checkpoint(path)
    cfg = {}
    for key, (typ, default) in config_mod.SCHEMA.items():
        if key in record:
            cfg[key] = config_mod._parse_value(key, record[key])
        else:
            cfg[key] = default
    rng = np.random.default_rng(seed)
    model = LoopModel(config_mod.build_loop_config(cfg), rng)
    has_encoder = record.get("model.has_encoder", "False") == "True"
    encoder = (
        SpeakerEncoder(config_mod.build_encoder_config(cfg), rng) if has_encoder else None
    )
    restore_state(tensors, model, encoder)
    return model, encoder, cfg, record, tensors
