"""Flat key = value run configuration with a strict schema.

Configuration files are plain text, one `key = value` per line with `#`
comments. Unknown keys are hard errors; command-line flags override file
values. Two presets exist: the full-scale defaults and a shrunken "desk"
preset sized so the whole pipeline trains in minutes on a laptop CPU.
"""

from __future__ import annotations

import os

from .encoder import EncoderConfig
from .errors import ConfigError
from .loop import LoopConfig

_BOOL_TRUE = {"true", "1", "yes", "on"}
_BOOL_FALSE = {"false", "0", "no", "off"}

# key -> (type, default)
SCHEMA = {
    "seed": (int, 0),
    "dtype": (str, "float32"),
    "data.manifest": (str, ""),
    "data.train_speakers": (int, 0),  # 0 = every speaker trains
    "model.mode": (str, "embedded"),
    "model.n_phonemes": (int, 0),  # 0 = read from corpus.cfg
    "model.d_o": (int, 0),  # 0 = read from corpus.cfg (file default 63)
    "model.buffer_slots": (int, 100),
    "model.d_b": (int, 256),
    "model.d_p": (int, 128),
    "model.d_z": (int, 256),
    "model.components": (int, 10),
    "model.hidden": (int, 256),
    "model.shift_scale": (float, 1.0),
    "encoder.channels": (int, 32),
    "encoder.conv_layers": (int, 5),
    "encoder.fc_width": (int, 256),
    "encoder.fc_layers": (int, 2),
    "loss.alpha": (float, 10.0),
    "loss.beta": (float, 10.0),
    "loss.margin": (float, 1.0),
    "loss.cycle_free_run": (bool, False),
    "loss.encoder_input_noise": (bool, True),
    "optim.name": (str, "adam"),
    "optim.lr": (float, 1e-4),
    "optim.beta1": (float, 0.9),
    "optim.beta2": (float, 0.999),
    "optim.eps": (float, 1e-8),
    "optim.weight_decay": (float, 0.0),
    "phase1.noise_sd": (float, 4.0),
    "phase1.max_len": (int, 100),
    "phase1.batch_size": (int, 256),
    "phase1.epochs": (int, 90),
    "phase2.noise_sd": (float, 2.0),
    "phase2.max_len": (int, 1000),
    "phase2.batch_size": (int, 30),
    "phase2.epoch_cap": (int, 200),
    "phase2.improve_frac": (float, 0.005),
    "phase2.patience": (int, 10),
    "train.buckets": (int, 4),
}

DESK_OVERRIDES = {
    "dtype": "float32",
    "model.buffer_slots": 10,
    "model.d_b": 32,
    "model.d_p": 16,
    "model.d_z": 16,
    "model.components": 3,
    "model.hidden": 32,
    "model.shift_scale": 0.07,
    "encoder.channels": 6,
    "encoder.fc_width": 32,
    "optim.lr": 1e-3,
    "phase1.noise_sd": 0.75,
    "phase1.max_len": 80,
    "phase1.batch_size": 32,
    "phase1.epochs": 30,
    "phase2.noise_sd": 0.375,
    "phase2.max_len": 120,
    "phase2.batch_size": 24,
    "phase2.epoch_cap": 50,
    "data.train_speakers": 8,
}

PRESETS = {"full": {}, "desk": DESK_OVERRIDES}


def default_config():
    return {key: default for key, (_, default) in SCHEMA.items()}


def preset_config(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = default_config()
    cfg.update(PRESETS[name])
    return cfg


def _parse_value(key, raw):
    if key not in SCHEMA:
        raise ConfigError(f"unknown configuration key {key!r}")
    typ, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} (expected {typ.__name__})") from exc


def parse_config_text(text, source="<config>"):
    out = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{line_no}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        out[key.strip()] = _parse_value(key.strip(), raw)
    return out


def load_config_file(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def merge_config(*layers):
    """Later layers win; every key is schema-validated already."""
    cfg = default_config()
    for layer in layers:
        for key, value in layer.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown configuration key {key!r}")
            cfg[key] = value
    return cfg


def format_config(cfg):
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def write_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))


def resolve_corpus_fields(cfg, manifest_dir):
    """Fill n_phonemes / d_o from corpus.cfg when left at their sentinel 0."""
    from .features import read_corpus_config

    meta = read_corpus_config(manifest_dir)
    cfg = dict(cfg)
    if cfg["model.n_phonemes"] == 0:
        if "phoneme_inventory_size" not in meta:
            raise ConfigError(
                "model.n_phonemes not set and corpus.cfg missing next to manifest"
            )
        cfg["model.n_phonemes"] = int(meta["phoneme_inventory_size"])
    if cfg["model.d_o"] == 0:
        cfg["model.d_o"] = int(meta.get("d_o", 63))
    return cfg


def build_loop_config(cfg) -> LoopConfig:
    if cfg["model.n_phonemes"] <= 0:
        raise ConfigError("model.n_phonemes must be set (or resolvable from the corpus)")
    d_o = cfg["model.d_o"] if cfg["model.d_o"] > 0 else 63
    return LoopConfig(
        n_phonemes=cfg["model.n_phonemes"],
        d_o=d_o,
        buffer_slots=cfg["model.buffer_slots"],
        d_b=cfg["model.d_b"],
        d_p=cfg["model.d_p"],
        d_z=cfg["model.d_z"],
        n_components=cfg["model.components"],
        hidden=cfg["model.hidden"],
        mode=cfg["model.mode"],
        shift_scale=cfg["model.shift_scale"],
        dtype=cfg["dtype"],
    )


def build_encoder_config(cfg) -> EncoderConfig:
    d_o = cfg["model.d_o"] if cfg["model.d_o"] > 0 else 63
    return EncoderConfig(
        d_o=d_o,
        d_z=cfg["model.d_z"],
        channels=cfg["encoder.channels"],
        conv_layers=cfg["encoder.conv_layers"],
        fc_width=cfg["encoder.fc_width"],
        fc_layers=cfg["encoder.fc_layers"],
        dtype=cfg["dtype"],
    )


def env_default_seed():
    """LOOPFIT_SEED provides a default seed at the lowest precedence."""
    raw = os.environ.get("LOOPFIT_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"LOOPFIT_SEED must be an integer, got {raw!r}") from exc
