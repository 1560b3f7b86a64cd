"""Run configuration: flat ``key = value`` files plus command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .generator import PROFILES, ModelDims
from .training import Stage1Config, Stage2Config


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    # paths
    corpus: Optional[str] = None
    triples: Optional[str] = None
    lexicon: Optional[str] = None
    out_dir: str = "run"
    # data
    vocab_cap: int = 50000
    topic_cap: int = 100
    min_weight: float = 0.0
    valid_fraction: float = 0.1
    # model overrides (None: profile value)
    d_word: Optional[int] = None
    d_senti: Optional[int] = None
    enc_hidden: Optional[int] = None
    d_z: Optional[int] = None
    dec_hidden: Optional[int] = None
    max_per_topic: Optional[int] = None
    enc_senti: bool = True
    dec_senti: bool = True
    use_tga: bool = True
    # stage 1
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    kl_anneal_steps: Optional[int] = None
    bow_weight: float = 1.0
    grad_clip_norm: float = 10.0
    dropout_rate: float = 0.2
    # stage 2
    adv_learning_rate: float = 1e-5
    d_learning_rate: float = 1e-3
    g_steps: int = 1
    d_steps: int = 1
    rounds: int = 30
    adv_batch_size: int = 32
    rollout_mode: str = "sequence_reward"
    baseline_decay: float = 0.95
    penalize_fake: bool = False
    stage1_mix: float = 0.0
    classifier_steps: int = 300
    # generation
    max_len: int = 20

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")

    def dims(self) -> ModelDims:
        base = PROFILES[self.profile]
        over = {k: getattr(self, k) for k in ("d_word", "d_senti", "enc_hidden", "d_z",
                                              "dec_hidden", "max_per_topic")
                if getattr(self, k) is not None}
        return dataclasses.replace(base, dropout=self.dropout_rate, enc_senti=self.enc_senti,
                                   dec_senti=self.dec_senti, use_tga=self.use_tga, **over)

    def stage1(self) -> Stage1Config:
        return Stage1Config(self.learning_rate, self.batch_size, self.epochs, self.kl_anneal_steps,
                            self.bow_weight, self.grad_clip_norm, self.dropout_rate, self.seed)

    def stage2(self) -> Stage2Config:
        return Stage2Config(learning_rate=self.adv_learning_rate,
                            d_learning_rate=self.d_learning_rate, g_steps=self.g_steps,
                            d_steps=self.d_steps, rounds=self.rounds,
                            batch_size=self.adv_batch_size, rollout_mode=self.rollout_mode,
                            baseline_decay=self.baseline_decay, penalize_fake=self.penalize_fake,
                            stage1_mix=self.stage1_mix, max_len=self.max_len)

    def resolve_paths(self, base: Path = Path(".")) -> "RunConfig":
        updates = {}
        for key in ("corpus", "triples", "lexicon", "out_dir"):
            v = getattr(self, key)
            if v is not None:
                updates[key] = str((base / v).resolve())
        return dataclasses.replace(self, **updates)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


def _field_types():
    hints = {"Optional[int]": int, "Optional[str]": str, "int": int, "float": float,
             "str": str, "bool": bool}
    return {f.name: hints[f.type if isinstance(f.type, str) else f.type.__name__]
            for f in fields(RunConfig)}


FIELD_TYPES = _field_types()


def parse_value(key: str, raw: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    kind = FIELD_TYPES[key]
    if raw == "" or raw.lower() == "none":
        default = RunConfig.__dataclass_fields__[key].default
        if default is not None and kind is not str:
            raise ConfigError(f"config key {key!r} needs a value")
        return None
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for config key {key!r}") from None


def read_config_file(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = parse_value(key, value)
    return out


def build_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """File values first, then overrides (flags win)."""
    values = read_config_file(path) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None
