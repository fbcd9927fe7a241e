# run_config.py
"""
Flat ``key = value`` run configuration, CLI overrides and seeded RNG streams.
"""
import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from errors import ConfigError
from search_engine import TrainConfig
from supernet_controllers import SupernetConfig

logger = logging.getLogger(__name__)

# Keys that are not valid Python identifiers.
KEY_ALIASES = {'lambda': 'lambda_'}
FIELD_KEYS = {v: k for k, v in KEY_ALIASES.items()}

TRUE_VALUES = {'true', '1', 'yes', 'on'}
FALSE_VALUES = {'false', '0', 'no', 'off'}
PRECISIONS = ('float64', 'float32')
DATA_FORMATS = ('auto', 'tsv', 'csv', 'ml1m')
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


@dataclass(frozen=True)
class RunConfig:
    # data
    data_path: str = ''
    data_format: str = 'auto'
    synthetic: bool = False
    synthetic_users: int = 1000
    synthetic_items: int = 100
    synthetic_min_len: int = 10
    synthetic_max_len: int = 30
    # run
    out_dir: str = 'runs/default'
    seed: int = 42
    precision: str = 'float64'
    log_level: str = 'INFO'
    progress: bool = False
    # model
    hidden_size: int = 128
    inner_size: int = 256
    max_seq_len: int = 200
    num_layers: int = 4
    num_heads: int = 4
    gamma_hidden: Tuple[float, ...] = (0.0, 0.25, 0.5)
    gamma_inner: Tuple[float, ...] = (0.0, 0.25, 0.5)
    gate_layers: int = 2
    gate_hidden: int = 0
    gate_scale: float = 2.0
    retrain_gate_layers: int = -1
    # training
    lambda_: float = 0.1
    learning_rate: float = 0.001
    arch_learning_rate: float = 0.001
    dropout: float = 0.2
    search_batch_size: int = 1024
    retrain_batch_size: int = 2048
    top_k: int = 10
    search_epochs: int = 50
    retrain_epochs: int = 50
    patience: int = 10
    refresh_every: int = 100
    flops_scale: float = 0.0
    sliding_windows: bool = False
    exclude_history: bool = False
    layer_norm_eps: float = 1e-12
    # stage inputs and sweeps
    descriptor_path: str = ''
    checkpoint_path: str = ''
    sweep_values: Tuple[float, ...] = ()
    sweep_seeds: int = 1
    parallel: bool = False

    @property
    def effective_retrain_gate_layers(self):
        return self.gate_layers if self.retrain_gate_layers < 0 else self.retrain_gate_layers


CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def config_key(field_name):
    return FIELD_KEYS.get(field_name, field_name)


def _field_name(key):
    if key in KEY_ALIASES:
        return KEY_ALIASES[key]
    if key in CONFIG_FIELDS and key not in FIELD_KEYS:
        return key
    raise ConfigError(f"Unknown config key '{key}'")


def coerce_value(key, raw):
    """Convert a raw string to the type of the config field behind ``key``."""
    name = _field_name(key)
    kind = CONFIG_FIELDS[name].type
    text = str(raw).strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in TRUE_VALUES:
                return True
            if lowered in FALSE_VALUES:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == Tuple[float, ...]:
            return tuple(float(part) for part in text.split(',') if part.strip())
        return text
    except ValueError:
        raise ConfigError(f"Invalid value '{text}' for config key '{key}'") from None


def parse_config_text(text, source='<config>'):
    """Parse ``key = value`` lines; ``#`` starts a comment. Returns dict key -> raw string."""
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split('#', 1)[0].strip()
        if not stripped:
            continue
        if '=' not in stripped:
            raise ConfigError(f"{source}, line {number}: expected 'key = value', got '{stripped}'")
        key, value = (part.strip() for part in stripped.split('=', 1))
        if not key:
            raise ConfigError(f"{source}, line {number}: missing key")
        _field_name(key)
        if key in values:
            raise ConfigError(f"{source}, line {number}: duplicate key '{key}'")
        values[key] = value
    return values


def load_config_file(path):
    path = Path(path)
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {str(e)}") from e
    return parse_config_text(text, source=str(path))


def validate_config(cfg):
    """Cross-field checks; raises ConfigError naming the offending key."""
    positive = ('synthetic_users', 'synthetic_items', 'hidden_size', 'inner_size', 'max_seq_len',
                'num_layers', 'num_heads', 'search_batch_size', 'retrain_batch_size', 'top_k',
                'search_epochs', 'retrain_epochs', 'patience', 'refresh_every', 'sweep_seeds')
    for name in positive:
        if getattr(cfg, name) < 1:
            raise ConfigError(f"'{config_key(name)}' must be at least 1, got {getattr(cfg, name)}")
    if cfg.hidden_size % cfg.num_heads:
        raise ConfigError(f"'hidden_size' ({cfg.hidden_size}) must be divisible by 'num_heads' ({cfg.num_heads})")
    if len(cfg.gamma_hidden) != len(cfg.gamma_inner) or not cfg.gamma_hidden:
        raise ConfigError("'gamma_hidden' and 'gamma_inner' must list the same number of candidates")
    for name in ('gamma_hidden', 'gamma_inner'):
        for gamma in getattr(cfg, name):
            if not 0.0 <= gamma < 1.0:
                raise ConfigError(f"'{name}' entries must lie in [0, 1), got {gamma}")
    if not 0.0 <= cfg.dropout < 1.0:
        raise ConfigError(f"'dropout' must lie in [0, 1), got {cfg.dropout}")
    if cfg.lambda_ < 0:
        raise ConfigError(f"'lambda' must be non-negative, got {cfg.lambda_}")
    for name in ('learning_rate', 'arch_learning_rate', 'gate_scale', 'layer_norm_eps'):
        if getattr(cfg, name) <= 0:
            raise ConfigError(f"'{name}' must be positive, got {getattr(cfg, name)}")
    if not 0 <= cfg.gate_layers <= 4:
        raise ConfigError(f"'gate_layers' must lie in 0..4, got {cfg.gate_layers}")
    if cfg.retrain_gate_layers > 4:
        raise ConfigError(f"'retrain_gate_layers' must lie in 0..4 (or -1), got {cfg.retrain_gate_layers}")
    if cfg.gate_hidden < 0:
        raise ConfigError(f"'gate_hidden' must be non-negative, got {cfg.gate_hidden}")
    if cfg.flops_scale < 0:
        raise ConfigError(f"'flops_scale' must be non-negative, got {cfg.flops_scale}")
    if not 3 <= cfg.synthetic_min_len <= cfg.synthetic_max_len:
        raise ConfigError("'synthetic_min_len' and 'synthetic_max_len' must satisfy 3 <= min <= max")
    if cfg.precision not in PRECISIONS:
        raise ConfigError(f"'precision' must be one of {', '.join(PRECISIONS)}, got '{cfg.precision}'")
    if cfg.data_format not in DATA_FORMATS:
        raise ConfigError(f"'data_format' must be one of {', '.join(DATA_FORMATS)}, got '{cfg.data_format}'")
    if cfg.log_level.upper() not in LOG_LEVELS:
        raise ConfigError(f"'log_level' must be one of {', '.join(LOG_LEVELS)}, got '{cfg.log_level}'")
    return cfg


def resolve_config(config_path=None, overrides=None):
    """Defaults <- config file <- overrides (key -> raw string or typed value)."""
    raw = load_config_file(config_path) if config_path else {}
    raw.update(overrides or {})
    values = {}
    for key, value in raw.items():
        name = _field_name(key)
        values[name] = value if not isinstance(value, str) else coerce_value(key, value)
    return validate_config(RunConfig(**values))


def _format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, tuple):
        return ','.join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg):
    """The fully resolved config as ``key = value`` lines (re-readable by resolve_config)."""
    lines = [f"{config_key(name)} = {_format_value(getattr(cfg, name))}" for name in CONFIG_FIELDS]
    return '\n'.join(lines) + '\n'


def with_overrides(cfg, **changes):
    return validate_config(dataclasses.replace(cfg, **changes))


STREAM_IDS = {'init': 0, 'gumbel': 1, 'dropout': 2, 'shuffle': 3, 'synthetic': 4}


@dataclass
class RngStreams:
    """Independent generators derived from one seed, one per source of randomness."""
    seed: int
    init: np.random.Generator
    gumbel: np.random.Generator
    dropout: np.random.Generator
    shuffle: np.random.Generator
    synthetic: np.random.Generator

    @classmethod
    def from_seed(cls, seed):
        generators = {
            name: np.random.default_rng(np.random.SeedSequence([seed, stream_id]))
            for name, stream_id in STREAM_IDS.items()
        }
        return cls(seed=seed, **generators)


def synthetic_seed(seed):
    """Integer seed of the synthetic-data stream (the generator takes a plain seed)."""
    return int(np.random.SeedSequence([seed, STREAM_IDS['synthetic']]).generate_state(1)[0])


def supernet_config_from(cfg, num_items):
    return SupernetConfig(
        num_items=num_items,
        hidden_size=cfg.hidden_size,
        inner_size=cfg.inner_size,
        max_seq_len=cfg.max_seq_len,
        num_layers=cfg.num_layers,
        num_heads=cfg.num_heads,
        gamma_hidden=tuple(cfg.gamma_hidden),
        gamma_inner=tuple(cfg.gamma_inner),
        gate_layers=cfg.gate_layers,
        gate_hidden=cfg.gate_hidden,
        gate_scale=cfg.gate_scale,
        dropout=cfg.dropout,
        layer_norm_eps=cfg.layer_norm_eps,
    )


def train_config_from(cfg):
    return TrainConfig(
        learning_rate=cfg.learning_rate,
        arch_learning_rate=cfg.arch_learning_rate,
        lambda_=cfg.lambda_,
        search_batch_size=cfg.search_batch_size,
        retrain_batch_size=cfg.retrain_batch_size,
        search_epochs=cfg.search_epochs,
        retrain_epochs=cfg.retrain_epochs,
        patience=cfg.patience,
        refresh_every=cfg.refresh_every,
        top_k=cfg.top_k,
        flops_scale=cfg.flops_scale,
        sliding_windows=cfg.sliding_windows,
        exclude_history=cfg.exclude_history,
        progress=cfg.progress,
    )


def content_hash(*parts):
    """sha256 over the given byte or text parts, in order."""
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part.encode('utf-8') if isinstance(part, str) else part)
    return digest.hexdigest()


def file_hash(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()
