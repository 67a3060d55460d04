"""Feature-matrix augmentation: time stretch plus time/frequency masking.

Masking operates on consecutive 10 s chunks with one band per chunk;
stretching resamples the time axis of the whole matrix. Variants are
kept independent (masks are never combined with stretches).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frontend import LOG_FLOOR, FeatureMatrix

# frames per 10 s chunk at hop 256 / 22050 Hz
CHUNK_FRAMES = 862

_TIME_STREAM = 0
_FREQ_STREAM = 1


@dataclass
class AugmentConfig:
    stretch_factors: list[float] = field(default_factory=lambda: [0.95, 1.05])
    max_time_mask: int = 20
    max_freq_mask: int = 16
    rng_seed: int = 0

    def __post_init__(self):
        for f in self.stretch_factors:
            if not 0.5 < f < 2.0:
                raise ValueError(f"stretch factor {f} outside (0.5, 2.0)")


def silence_value(scaling: str) -> float:
    """Fill level representing zero energy for a given scaling."""
    if scaling == "log":
        return float(np.log(LOG_FLOOR))
    return 0.0  # pcen and linear-power both map silence to 0


def time_stretch(m: FeatureMatrix, factor: float) -> FeatureMatrix:
    """Resample columns so output column j reads input position j*factor."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    n = m.values.shape[1]
    if n < 2:
        raise ValueError("need at least 2 frames to stretch")
    n_out = round(n / factor)
    pos = np.minimum(np.arange(n_out) * factor, n - 1.0)
    lo = pos.astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = pos - lo
    vals = m.values[:, lo] * (1.0 - w) + m.values[:, hi] * w
    return FeatureMatrix(vals, m.scaling, m.frame_hop_s)


def time_mask(
    m: FeatureMatrix, max_width: int, rng: np.random.Generator
) -> FeatureMatrix:
    """Silence one random band of consecutive frames, width ~ U{0..max_width}."""
    n = m.values.shape[1]
    if max_width >= n:
        raise ValueError(f"max_width {max_width} must be < frame count {n}")
    width = int(rng.integers(0, max_width + 1))
    start = int(rng.integers(0, n - width + 1))
    vals = m.values.copy()
    vals[:, start : start + width] = silence_value(m.scaling)
    return FeatureMatrix(vals, m.scaling, m.frame_hop_s)


def freq_mask(
    m: FeatureMatrix, max_width: int, rng: np.random.Generator
) -> FeatureMatrix:
    """Silence one random band of consecutive mel bins."""
    n = m.values.shape[0]
    if max_width >= n:
        raise ValueError(f"max_width {max_width} must be < bin count {n}")
    width = int(rng.integers(0, max_width + 1))
    start = int(rng.integers(0, n - width + 1))
    vals = m.values.copy()
    vals[start : start + width, :] = silence_value(m.scaling)
    return FeatureMatrix(vals, m.scaling, m.frame_hop_s)


def _chunk_bounds(n_frames: int):
    return [(lo, min(lo + CHUNK_FRAMES, n_frames)) for lo in range(0, n_frames, CHUNK_FRAMES)]


def _masked_variant(m: FeatureMatrix, kind: int, max_width: int, seed: int) -> FeatureMatrix:
    """One mask band per 10 s chunk, chunk generators split from the seed."""
    fn = time_mask if kind == _TIME_STREAM else freq_mask
    pieces = []
    for i, (lo, hi) in enumerate(_chunk_bounds(m.values.shape[1])):
        chunk = FeatureMatrix(m.values[:, lo:hi], m.scaling, m.frame_hop_s)
        rng = np.random.default_rng([seed, kind, i])
        width = max_width
        if kind == _TIME_STREAM:
            width = min(width, chunk.values.shape[1] - 1)  # short final chunk
        pieces.append(fn(chunk, width, rng).values)
    return FeatureMatrix(np.concatenate(pieces, axis=1), m.scaling, m.frame_hop_s)


def augment_chunked(m: FeatureMatrix, cfg: AugmentConfig) -> list[FeatureMatrix]:
    """All augmentation variants of one matrix.

    Returns [time-masked, freq-masked, stretched per factor]; every
    variant derives from the original, never from another variant.
    """
    out = [
        _masked_variant(m, _TIME_STREAM, cfg.max_time_mask, cfg.rng_seed),
        _masked_variant(m, _FREQ_STREAM, cfg.max_freq_mask, cfg.rng_seed),
    ]
    out.extend(time_stretch(m, f) for f in cfg.stretch_factors)
    return out
