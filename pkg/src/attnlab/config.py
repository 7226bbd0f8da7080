"""Dotted-key experiment configuration.

File syntax is one ``key = value`` per line, values written as JSON
literals, ``#`` starting a comment. Serialization sorts keys, so equal
configs always produce the same bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    type: type
    default: Any
    nullable: bool = False
    help: str = ""


LM_WEIGHT_GRID = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5]

SCHEMA: dict[str, Key] = {
    "seed": Key(int, 0),
    # features
    "features.normalize": Key(str, "none", help="none | mean | meanvar, per utterance"),
    "features.num_filters": Key(int, 64),
    "features.preemphasis": Key(float, 0.97),
    # data
    "data.max_chars": Key(int, None, nullable=True, help="drop transcripts longer than this"),
    # bpe
    "bpe.merges": Key(int, 1000),
    # model
    "model.enc_layers": Key(int, 6),
    "model.enc_units": Key(int, 64),
    "model.final_red": Key(int, 8),
    "model.dec_units": Key(int, 128),
    "model.embed_dim": Key(int, 0, help="0 means dec_units"),
    "model.att_dim": Key(int, 0, help="0 means dec_units"),
    "model.enc_dropout": Key(float, 0.3),
    # pretraining schedule
    "schedule.pretrain": Key(bool, True),
    "schedule.epochs_per_stage": Key(int, 2),
    "schedule.dropout_off_stages": Key(int, 2),
    # losses
    "loss.label_smoothing": Key(float, 0.1),
    "loss.ctc_weight": Key(float, 0.5),
    # optimizer
    "optim.lr": Key(float, 1e-3),
    "optim.warmup_steps": Key(int, 20),
    "optim.beta1": Key(float, 0.9),
    "optim.beta2": Key(float, 0.999),
    "optim.eps": Key(float, 1e-8),
    "optim.clip_norm": Key(float, 5.0),
    "optim.newbob_threshold": Key(float, 0.01),
    "optim.newbob_decay": Key(float, 0.7),
    "optim.lr_floor": Key(float, 1e-6),
    # training loop
    "train.epochs": Key(int, 50),
    "train.batch_frames": Key(int, 500),
    "train.prefetch": Key(int, 4),
    # language models
    "lm.order": Key(int, 3),
    "lm.proj": Key(int, 32),
    "lm.layers": Key(int, 1),
    "lm.units": Key(int, 128),
    "lm.dropout": Key(float, 0.2),
    "lm.lr": Key(float, 1.0),
    "lm.clip_norm": Key(float, 5.0),
    "lm.epochs": Key(int, 10),
    "lm.batch_size": Key(int, 16),
    # search
    "search.beam": Key(int, 12),
    "search.lm_weight": Key(float, 0.0),
    "search.max_len_slack": Key(int, 10),
    "search.lm_weight_grid": Key(list, LM_WEIGHT_GRID),
}


def _check_type(key: str, value, spec: Key, where: str) -> Any:
    if value is None:
        if spec.nullable:
            return None
        raise ConfigError(f"{where}{key}: null is not allowed")
    if spec.type is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if spec.type is int and isinstance(value, bool):
        raise ConfigError(f"{where}{key}: expected int, got bool")
    if not isinstance(value, spec.type):
        raise ConfigError(f"{where}{key}: expected {spec.type.__name__}, got {type(value).__name__}")
    return value


def parse_text(text: str, source: str = "<string>") -> dict:
    """Parse ``key = value`` lines without any schema; duplicate keys are errors."""
    out: dict = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{n}: {key}: value is not a JSON literal ({exc.msg})") from None
    return out


def dump_text(values: dict) -> str:
    return "".join(f"{k} = {json.dumps(values[k], sort_keys=True)}\n" for k in sorted(values))


class Config(dict):
    """Fully resolved configuration: every schema key present."""

    @classmethod
    def defaults(cls) -> "Config":
        return cls({k: (list(s.default) if isinstance(s.default, list) else s.default)
                    for k, s in SCHEMA.items()})

    @classmethod
    def from_dict(cls, values: dict, source: str = "") -> "Config":
        cfg = cls.defaults()
        where = f"{source}: " if source else ""
        for key, value in values.items():
            if key not in SCHEMA:
                raise ConfigError(f"{where}unknown key {key!r}")
            cfg[key] = _check_type(key, value, SCHEMA[key], where)
        return cfg

    def override(self, **values) -> "Config":
        merged = dict(self)
        merged.update({k.replace("__", "."): v for k, v in values.items()})
        return Config.from_dict(merged)

    def serialize(self) -> str:
        return dump_text(self)


def parse_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    raw = parse_text(text, str(path))
    lines = {}
    for n, line in enumerate(text.splitlines(), 1):
        if "=" in line and not line.strip().startswith("#"):
            lines.setdefault(line.split("=", 1)[0].strip(), n)
    cfg = Config.defaults()
    for key, value in raw.items():
        where = f"{path}:{lines[key]}: "
        if key not in SCHEMA:
            raise ConfigError(f"{where}unknown key {key!r}")
        cfg[key] = _check_type(key, value, SCHEMA[key], where)
    return cfg
