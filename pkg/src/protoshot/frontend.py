"""Mel spectrogram front-end: STFT, triangular filterbank, log / PCEN scaling.

All transformations are pure functions over :class:`FeatureMatrix`. The
cache format at the bottom stores float32 and round-trips bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .audio_io import Waveform

SAMPLE_RATE = 22050
N_FFT = 1024
HOP = 256
N_MELS = 128
HOP_SECONDS = HOP / SAMPLE_RATE
LOG_FLOOR = 1e-10

PCEN_S = 0.025
PCEN_ALPHA = 0.98
PCEN_DELTA = 2.0
PCEN_R = 0.5
PCEN_EPS = 1e-6

_SCALING_TAGS = {"linear-power": 0, "log": 1, "pcen": 2}
_TAGS_SCALING = {v: k for k, v in _SCALING_TAGS.items()}

_CACHE_MAGIC = b"PSFC"
_CACHE_VERSION = 1


class EmptySignal(ValueError):
    """Waveform has no samples."""


class CacheFormatError(ValueError):
    """Feature cache file is corrupt or from an unknown version."""


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (n_mels, n_frames)
    scaling: str
    frame_hop_s: float = HOP_SECONDS

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)
    f_min: float
    f_max: float


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def stft_power(w: Waveform) -> np.ndarray:
    """Power spectrogram, (513, frames). Frame t is centred on sample t*256."""
    if len(w.samples) == 0:
        raise EmptySignal("cannot form frames from an empty signal")
    x = np.asarray(w.samples, dtype=np.float64)
    pad = N_FFT // 2
    if len(x) >= pad + 1:
        xp = np.pad(x, pad, mode="reflect")
    else:
        # reflect needs len > pad; tile the short signal symmetrically instead
        xp = np.pad(x, pad, mode="symmetric")
    n_frames = len(x) // HOP + 1
    window = np.hanning(N_FFT + 1)[:-1]  # periodic Hann
    idx = np.arange(N_FFT)[None, :] + HOP * np.arange(n_frames)[:, None]
    frames = xp[idx] * window
    return np.abs(np.fft.rfft(frames, axis=1).T) ** 2


def build_mel_filterbank(
    n_mels: int = N_MELS, n_fft: int = N_FFT, rate: int = SAMPLE_RATE
) -> MelFilterbank:
    """Triangular HTK-mel filters, area-normalised, f in [0, rate/2]."""
    f_min, f_max = 0.0, rate / 2.0
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    fft_hz = np.arange(n_fft // 2 + 1) * rate / n_fft
    lower, centre, upper = edges_hz[:-2], edges_hz[1:-1], edges_hz[2:]

    up = (fft_hz[None, :] - lower[:, None]) / (centre - lower)[:, None]
    down = (upper[:, None] - fft_hz[None, :]) / (upper - centre)[:, None]
    weights = np.maximum(0.0, np.minimum(up, down))
    # area normalisation: divide by half the filter bandwidth in Hz
    weights *= (2.0 / (upper - lower))[:, None]
    return MelFilterbank(weights=weights, f_min=f_min, f_max=f_max)


def mel_spectrogram(w: Waveform, fb: MelFilterbank | None = None) -> FeatureMatrix:
    if fb is None:
        fb = build_mel_filterbank()
    power = fb.weights @ stft_power(w)
    return FeatureMatrix(values=power, scaling="linear-power")


def log_scale(m: FeatureMatrix) -> FeatureMatrix:
    if m.scaling != "linear-power":
        raise ValueError(f"log_scale expects linear-power input, got {m.scaling}")
    return FeatureMatrix(np.log(m.values + LOG_FLOOR), "log", m.frame_hop_s)


def pcen(
    m: FeatureMatrix,
    s: float = PCEN_S,
    alpha: float = PCEN_ALPHA,
    delta: float = PCEN_DELTA,
    r: float = PCEN_R,
    eps: float = PCEN_EPS,
) -> FeatureMatrix:
    """Per-channel energy normalisation with a first-order IIR smoother.

    M(0) = E(0); M(t) = (1-s) M(t-1) + s E(t);
    out = (E / (eps + M)^alpha + delta)^r - delta^r.
    """
    if m.scaling != "linear-power":
        raise ValueError(f"pcen expects linear-power input, got {m.scaling}")
    e = m.values
    smooth = np.empty_like(e)
    smooth[:, 0] = e[:, 0]
    for t in range(1, e.shape[1]):
        smooth[:, t] = (1.0 - s) * smooth[:, t - 1] + s * e[:, t]
    out = (e / (eps + smooth) ** alpha + delta) ** r - delta**r
    return FeatureMatrix(out, "pcen", m.frame_hop_s)


def featurize(w: Waveform, scaling: str = "pcen", **pcen_kwargs) -> FeatureMatrix:
    """Waveform straight to a scaled 128-bin mel matrix."""
    m = mel_spectrogram(w)
    if scaling == "log":
        return log_scale(m)
    if scaling == "pcen":
        return pcen(m, **pcen_kwargs)
    if scaling == "linear-power":
        return m
    raise ValueError(f"unknown scaling {scaling!r}")


def save_cache(path: str, m: FeatureMatrix) -> None:
    """Serialise to the PSFC container (header + row-major LE float32)."""
    vals = np.ascontiguousarray(m.values, dtype="<f4")
    header = _CACHE_MAGIC + struct.pack(
        "<HIIB",
        _CACHE_VERSION,
        vals.shape[0],
        vals.shape[1],
        _SCALING_TAGS[m.scaling],
    )
    with open(path, "wb") as fh:
        fh.write(header + vals.tobytes())


def load_cache(path: str) -> FeatureMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    head = len(_CACHE_MAGIC) + struct.calcsize("<HIIB")
    if len(raw) < head or raw[:4] != _CACHE_MAGIC:
        raise CacheFormatError(f"{path}: not a feature cache")
    version, n_mels, n_frames, tag = struct.unpack_from("<HIIB", raw, 4)
    if version != _CACHE_VERSION:
        raise CacheFormatError(f"{path}: unknown cache version {version}")
    if tag not in _TAGS_SCALING:
        raise CacheFormatError(f"{path}: unknown scaling tag {tag}")
    need = n_mels * n_frames * 4
    body = raw[head:]
    if len(body) != need:
        raise CacheFormatError(f"{path}: expected {need} value bytes, got {len(body)}")
    vals = np.frombuffer(body, dtype="<f4").reshape(n_mels, n_frames)
    return FeatureMatrix(values=vals.astype(np.float32), scaling=_TAGS_SCALING[tag])
