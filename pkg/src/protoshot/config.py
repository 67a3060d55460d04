"""Run configuration: one flat JSON document, flag overrides, stable hashes.

Two hashes are derived from a config. The feature hash covers only the
fields that change cached feature values; featurize uses it to decide
whether a cache is stale. The config hash additionally covers segment
width and model width, and is embedded in checkpoints so that inference
with an incompatible config is refused.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

from . import HOP, N_FFT, N_MELS, SAMPLE_RATE
from .augment import AugmentConfig
from .frontend import PCEN_ALPHA, PCEN_DELTA, PCEN_EPS, PCEN_R, PCEN_S
from .protonet import TrainConfig

CACHE_DIR_ENV = "PROTOSHOT_CACHE_DIR"


class BadConfig(ValueError):
    """Unknown key, wrong type, or out-of-range value in a config."""


@dataclass
class PipelineConfig:
    scaling: str = "pcen"  # "log" or "pcen"
    pcen_s: float = PCEN_S
    pcen_alpha: float = PCEN_ALPHA
    pcen_delta: float = PCEN_DELTA
    pcen_r: float = PCEN_R
    pcen_eps: float = PCEN_EPS
    augment: bool = True
    stretch_factors: list[float] = field(default_factory=lambda: [0.95, 1.05])
    max_time_mask: int = 20
    max_freq_mask: int = 16
    width: int = 17
    n_way: int = 5
    n_shot: int = 5
    n_query: int = 5
    epochs: int = 150
    episodes_per_epoch: int = 100
    val_episodes: int = 20
    learning_rate: float = 0.01
    momentum: float = 0.85
    patience: int = 5
    improvement_threshold: float = 0.01
    lr_factor: float = 0.5
    n_channels: int = 128
    iterations: int = 5
    threshold: float = 0.5
    seed: int = 0
    cache_dir: str = ""


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise BadConfig(message)


def validate(cfg: PipelineConfig) -> PipelineConfig:
    _check(cfg.scaling in ("log", "pcen"), f"scaling must be log or pcen, not {cfg.scaling!r}")
    _check(0 < cfg.pcen_s < 1, f"pcen_s {cfg.pcen_s} outside (0, 1)")
    _check(0 < cfg.pcen_alpha <= 1, f"pcen_alpha {cfg.pcen_alpha} outside (0, 1]")
    _check(cfg.pcen_delta > 0, "pcen_delta must be positive")
    _check(0 < cfg.pcen_r <= 1, f"pcen_r {cfg.pcen_r} outside (0, 1]")
    _check(cfg.pcen_eps > 0, "pcen_eps must be positive")
    for f in cfg.stretch_factors:
        _check(0.5 < f < 2.0, f"stretch factor {f} outside (0.5, 2.0)")
    _check(cfg.max_time_mask >= 0 and cfg.max_freq_mask >= 0, "mask widths must be >= 0")
    _check(cfg.width >= 8, f"width {cfg.width} too small for three poolings")
    _check(cfg.n_way >= 2, "n_way must be >= 2")
    _check(cfg.n_shot >= 1 and cfg.n_query >= 1, "n_shot and n_query must be >= 1")
    _check(
        cfg.epochs >= 1 and cfg.episodes_per_epoch >= 1 and cfg.val_episodes >= 1,
        "epochs, episodes_per_epoch and val_episodes must be >= 1",
    )
    _check(cfg.learning_rate > 0, "learning_rate must be positive")
    _check(0 <= cfg.momentum < 1, f"momentum {cfg.momentum} outside [0, 1)")
    _check(cfg.patience >= 1, "patience must be >= 1")
    _check(0 < cfg.improvement_threshold < 1, "improvement_threshold outside (0, 1)")
    _check(0 < cfg.lr_factor < 1, "lr_factor outside (0, 1)")
    _check(cfg.n_channels >= 1, "n_channels must be >= 1")
    _check(cfg.iterations >= 1, "iterations must be >= 1")
    _check(0 < cfg.threshold < 1, f"threshold {cfg.threshold} outside (0, 1)")
    _check(cfg.seed >= 0, "seed must be >= 0")
    return cfg


def _coerce(key: str, current, value):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise BadConfig(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise BadConfig(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise BadConfig(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        try:
            return [float(v) for v in value]
        except (TypeError, ValueError) as exc:
            raise BadConfig(f"{key}: expected a list of numbers, got {value!r}") from exc
    if not isinstance(value, str):
        raise BadConfig(f"{key}: expected a string, got {value!r}")
    return value


def load_config(path: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the JSON file, then flag overrides; flags win."""
    cfg = PipelineConfig()
    known = set(asdict(cfg))
    for source, data in (("config", _read_json(path)), ("flag", overrides or {})):
        for key, value in data.items():
            if key not in known:
                raise BadConfig(f"unknown {source} key {key!r}")
            if value is None:
                continue
            setattr(cfg, key, _coerce(key, getattr(cfg, key), value))
    return validate(cfg)


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        try:
            data = json.load(fh)
        except ValueError as exc:
            raise BadConfig(f"{path}: not valid JSON") from exc
    if not isinstance(data, dict):
        raise BadConfig(f"{path}: top level must be an object")
    return data


def save_config(path: str, cfg: PipelineConfig) -> None:
    with open(path, "w") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _digest(fields: dict) -> str:
    blob = json.dumps(fields, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def feature_hash(cfg: PipelineConfig) -> str:
    """Hash of everything that changes cached feature values."""
    fields = {
        "sample_rate": SAMPLE_RATE,
        "n_fft": N_FFT,
        "hop": HOP,
        "n_mels": N_MELS,
        "scaling": cfg.scaling,
    }
    if cfg.scaling == "pcen":
        fields["pcen"] = [cfg.pcen_s, cfg.pcen_alpha, cfg.pcen_delta, cfg.pcen_r, cfg.pcen_eps]
    return _digest(fields)


def config_hash(cfg: PipelineConfig) -> str:
    """Feature hash plus the fields a checkpoint must agree on."""
    fields = {
        "features": feature_hash(cfg),
        "width": cfg.width,
        "n_channels": cfg.n_channels,
    }
    return _digest(fields)


def cache_dir(cfg: PipelineConfig) -> str:
    """Cache directory override: environment beats config beats none."""
    return os.environ.get(CACHE_DIR_ENV) or cfg.cache_dir


def cache_path(manifest_cache: str, cfg: PipelineConfig) -> str:
    """Manifest cache path, redirected into the override dir if set."""
    override = cache_dir(cfg)
    if not override:
        return manifest_cache
    return os.path.join(override, os.path.basename(manifest_cache))


def augment_config(cfg: PipelineConfig) -> AugmentConfig:
    return AugmentConfig(
        stretch_factors=list(cfg.stretch_factors),
        max_time_mask=cfg.max_time_mask,
        max_freq_mask=cfg.max_freq_mask,
        rng_seed=cfg.seed,
    )


def train_config(cfg: PipelineConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs,
        episodes_per_epoch=cfg.episodes_per_epoch,
        val_episodes=cfg.val_episodes,
        n_way=cfg.n_way,
        n_shot=cfg.n_shot,
        n_query=cfg.n_query,
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        patience=cfg.patience,
        improvement_threshold=cfg.improvement_threshold,
        lr_factor=cfg.lr_factor,
        seed=cfg.seed,
        config_hash=config_hash(cfg),
    )
