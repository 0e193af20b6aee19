"""Run configuration merged from defaults, config file, env, and flags.

Config files use INI sections of key=value pairs; environment variables
use the ``QADAPT_`` prefix. Precedence: flags > env > file > defaults.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, asdict, fields
from pathlib import Path

from .adaptation import TrainConfig
from .errors import NotFoundError, ValidationError
from .text_encoding import (
    DEFAULT_CONTEXT_PHRASE,
    DEFAULT_EMBED_SCALE,
    DEFAULT_ENCODER_SEED,
    DEFAULT_HIDDEN_DIM,
    DEFAULT_OUT_DIM,
    DEFAULT_TOKEN_DIM,
)

ENV_PREFIX = "QADAPT_"

# env var -> (section, key); the two endpoint names are part of the wire
# contract, the rest follow the generic QADAPT_<SECTION>_<KEY> scheme.
_NAMED_ENV = {
    "QADAPT_TEXT_ENCODER_URL": ("encoder", "endpoint"),
    "QADAPT_LLM_URL": ("llm", "endpoint"),
}


@dataclass
class RunConfig:
    """Flat view of everything a command needs to be reproducible."""

    # [train]
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 0.0005
    tau: float = 0.01
    k: int = 8
    n_negatives: int = 100
    m_context: int = 4
    loss_kind: str = "ueo"
    use_negatives: bool = True
    use_topk: bool = True
    negative_source: str = "captions"
    detach_weights: bool = False
    seed: int = 0
    # [encoder]
    encoder_kind: str = "toy"  # toy | http
    encoder_seed: int = DEFAULT_ENCODER_SEED
    token_dim: int = DEFAULT_TOKEN_DIM
    hidden_dim: int = DEFAULT_HIDDEN_DIM
    out_dim: int = DEFAULT_OUT_DIM
    embed_scale: float = DEFAULT_EMBED_SCALE
    context_phrase: str = DEFAULT_CONTEXT_PHRASE
    encoder_endpoint: str = ""
    # [llm]
    llm_kind: str = "none"  # none | stub | http
    llm_endpoint: str = ""
    llm_model: str = ""
    llm_rules_path: str = ""
    # [selection]
    stopwords_path: str = ""

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            tau=self.tau,
            k=self.k,
            n_negatives=self.n_negatives,
            m_context=self.m_context,
            loss_kind=self.loss_kind,
            use_negatives=self.use_negatives,
            use_topk=self.use_topk,
            negative_source=self.negative_source,
            detach_weights=self.detach_weights,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)


_SECTION_OF = {
    "epochs": "train",
    "batch_size": "train",
    "learning_rate": "train",
    "tau": "train",
    "k": "train",
    "n_negatives": "train",
    "m_context": "train",
    "loss_kind": "train",
    "use_negatives": "train",
    "use_topk": "train",
    "negative_source": "train",
    "detach_weights": "train",
    "seed": "train",
    "encoder_kind": "encoder",
    "encoder_seed": "encoder",
    "token_dim": "encoder",
    "hidden_dim": "encoder",
    "out_dim": "encoder",
    "embed_scale": "encoder",
    "context_phrase": "encoder",
    "encoder_endpoint": "encoder",
    "llm_kind": "llm",
    "llm_endpoint": "llm",
    "llm_model": "llm",
    "llm_rules_path": "llm",
    "stopwords_path": "selection",
}

# keys are stored in files without their section prefix
_FILE_KEY = {
    "encoder_kind": "kind",
    "encoder_seed": "seed",
    "encoder_endpoint": "endpoint",
    "llm_kind": "kind",
    "llm_endpoint": "endpoint",
    "llm_model": "model",
    "llm_rules_path": "rules_path",
}


def _coerce(raw: str, target_type: type):
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"cannot parse boolean from {raw!r}")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw.strip().strip('"')


def load_run_config(
    path: Path | None = None,
    env: dict[str, str] | None = None,
    overrides: dict | None = None,
) -> RunConfig:
    """Build a RunConfig with flags > env > file > defaults precedence."""
    env = os.environ if env is None else env
    values: dict = {}
    types = {f.name: f.type for f in fields(RunConfig)}
    type_map = {"int": int, "float": float, "bool": bool, "str": str}

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise NotFoundError(f"config file {path} not found")
        parser = configparser.ConfigParser()
        parser.read(path, encoding="utf-8")
        for name, section in _SECTION_OF.items():
            key = _FILE_KEY.get(name, name)
            if parser.has_option(section, key):
                values[name] = _coerce(
                    parser.get(section, key), type_map.get(types[name], str)
                )

    for var, (section, key) in _NAMED_ENV.items():
        if var in env:
            name = next(
                n for n, s in _SECTION_OF.items() if s == section and _FILE_KEY.get(n, n) == key
            )
            values[name] = env[var]
    for name in _SECTION_OF:
        var = ENV_PREFIX + name.upper()
        if var in env:
            values[name] = _coerce(env[var], type_map.get(types[name], str))

    if overrides:
        for name, value in overrides.items():
            if value is not None:
                values[name] = value

    return RunConfig(**values)
