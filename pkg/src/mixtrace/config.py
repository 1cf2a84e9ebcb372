"""Run configuration: a typed dataclass loaded from flat ``key = value`` text."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields

from .errors import ValidationError
from .mixtag import Strategy


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    # transaction mapping
    value_dim: int = 128
    category_dim: int = 128
    noise_dim: int = 256
    time_dim: int = 16
    position_dim: int = 16
    max_positions: int = 512
    node_dim: int = 544
    sigma: float = 0.1
    pretrain_epochs: int = 5
    pretrain_lr: float = 0.02
    # encoder
    hidden_dim: int = 256
    out_dim: int = 64
    layers: int = 2
    head_hidden: int = 64
    dropout: float = 0.1
    # graph
    num_slices: int = 50
    strategy: str = "equal-time"
    anchor: str = "later"
    composition_ratio: float = 0.2
    negative_ratio: float = 1.0        # evaluation classification set
    train_negative_ratio: float = 5.0
    # optimisation
    lr: float = 0.02
    meta_lr: float = 0.008
    rho: float = 0.9
    delta: float = 1e-8
    keep_prob: float = 0.5
    window_combine: str = "meta"
    window: int = 5
    epochs: int = 50
    patience: int = 10
    # evaluation
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    mrr_candidates: int = 100
    threshold: float = 0.5
    similarity: str = "inner"
    similarity_scale: float = 1.0
    # ablations
    no_edge_aware: bool = False
    no_mapping: bool = False
    no_mixtag: bool = False
    no_intra: bool = False
    no_window: bool = False

    def validate(self) -> "RunConfig":
        validate_config(self)
        return self

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self)


ABLATIONS = ("no_edge_aware", "no_mapping", "no_mixtag", "no_intra", "no_window")


def _fail(key, msg):
    raise ValidationError(f"{key}: {msg}")


def validate_config(cfg: RunConfig) -> None:
    ints_pos = ("value_dim", "category_dim", "time_dim", "position_dim", "max_positions", "node_dim",
                "hidden_dim", "out_dim", "layers", "head_hidden", "num_slices", "window", "epochs",
                "patience", "mrr_candidates")
    for key in ints_pos:
        if getattr(cfg, key) < 1:
            _fail(key, "must be >= 1")
    for key in ("noise_dim", "pretrain_epochs"):
        if getattr(cfg, key) < 0:
            _fail(key, "must be >= 0")
    if cfg.time_dim % 2:
        _fail("time_dim", "must be even")
    total = cfg.value_dim + cfg.category_dim + cfg.noise_dim + cfg.time_dim + cfg.position_dim
    if cfg.node_dim != total:
        _fail("node_dim", f"must equal the sum of the mapping blocks ({total})")
    for key in ("dropout", "composition_ratio", "train_fraction", "val_fraction", "threshold"):
        if not 0.0 <= getattr(cfg, key) <= 1.0:
            _fail(key, "must be in [0, 1]")
    if cfg.dropout >= 1.0:
        _fail("dropout", "must be < 1")
    if not 0.0 < cfg.rho < 1.0:
        _fail("rho", "must be in (0, 1)")
    if not 0.0 <= cfg.keep_prob <= 1.0:
        _fail("keep_prob", "must be in [0, 1]")
    for key in ("delta", "negative_ratio", "train_negative_ratio"):
        if getattr(cfg, key) <= 0:
            _fail(key, "must be > 0")
    for key in ("lr", "meta_lr", "sigma", "pretrain_lr"):
        if getattr(cfg, key) < 0:
            _fail(key, "must be >= 0")
    if cfg.train_fraction <= 0 or cfg.train_fraction + cfg.val_fraction >= 1.0:
        _fail("train_fraction", "train_fraction > 0 and train_fraction + val_fraction < 1 required")
    if cfg.window > cfg.num_slices:
        _fail("window", f"exceeds num_slices ({cfg.num_slices})")
    try:
        Strategy(cfg.strategy)
    except ValueError:
        _fail("strategy", "must be equal-time or equal-count")
    if cfg.anchor not in ("later", "earlier"):
        _fail("anchor", "must be later or earlier")
    if cfg.window_combine not in ("ratio", "meta"):
        _fail("window_combine", "must be ratio or meta")
    if cfg.similarity not in ("inner", "cosine"):
        _fail("similarity", "must be inner or cosine")
    if cfg.no_mixtag and cfg.composition_ratio == 0:
        _fail("no_mixtag", "needs composition_ratio > 0: without association edges nothing is left to pass messages")


def config_hash(cfg) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ValidationError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, schema=RunConfig, base=None):
    """Parse ``key = value`` lines (``#`` comments, blank lines ignored) into
    ``schema``; unknown keys and unparsable values raise ValidationError."""
    base = base if base is not None else schema()
    defaults = {f.name: getattr(base, f.name) for f in fields(schema)}
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {line_no}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in defaults:
            raise ValidationError(f"{key}: unknown configuration key")
        values[key] = _coerce(key, raw, defaults[key])
    cfg = dataclasses.replace(base, **values)
    if hasattr(cfg, "validate"):
        cfg.validate()
    return cfg


def dump_config(cfg) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n"
                   for k, v in dataclasses.asdict(cfg).items())
