"""WAV ingestion: RIFF parsing, rational resampling, peak normalisation.

Only uncompressed RIFF/WAVE is supported (16-bit PCM and 32-bit IEEE
float). Multi-channel audio is downmixed to mono at load time.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.signal import upfirdn

PIPELINE_RATE = 22050

# Kaiser beta ~ 90 dB stopband; 64 taps per polyphase branch plus a centre
# tap so the filter delay is an integer number of input samples.
_TAPS_PER_PHASE = 64
_KAISER_BETA = 8.6


class MalformedWav(ValueError):
    """File is not a structurally valid RIFF/WAVE stream."""


class UnsupportedEncoding(ValueError):
    """WAV codec other than PCM16 / IEEE float32."""


@dataclass
class Waveform:
    samples: np.ndarray  # float64 mono, |x| <= 1 after normalisation
    sample_rate: int
    source_path: str = ""

    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def load_wav(path: str, downmix: str = "mean") -> Waveform:
    """Read a WAV file as mono float64 in [-1, 1].

    ``downmix`` is "mean" (average channels) or "first".
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWav(f"{path}: missing RIFF/WAVE header")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise MalformedWav(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise MalformedWav(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise MalformedWav(f"{path}: missing fmt or data chunk")

    audio_format, n_channels, sample_rate, _, _, bits = fmt
    if n_channels < 1:
        raise MalformedWav(f"{path}: zero channels")
    if audio_format == 1 and bits == 16:
        usable = len(data) - len(data) % (2 * n_channels)
        x = np.frombuffer(data[:usable], dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        usable = len(data) - len(data) % (4 * n_channels)
        x = np.frombuffer(data[:usable], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedEncoding(
            f"{path}: format tag {audio_format} / {bits} bit not supported"
        )

    if n_channels > 1:
        x = x.reshape(-1, n_channels)
        x = x[:, 0] if downmix == "first" else x.mean(axis=1)
    return Waveform(samples=x, sample_rate=int(sample_rate), source_path=str(path))


def write_wav(path: str, w: Waveform, encoding: str = "pcm16") -> None:
    """Write a mono WAV file (PCM16 or IEEE float32)."""
    x = np.clip(np.asarray(w.samples, dtype=np.float64), -1.0, 1.0)
    if encoding == "pcm16":
        q = np.clip(np.round(x * 32768.0), -32768, 32767)
        payload = q.astype("<i2").tobytes()
        audio_format, bits = 1, 16
    elif encoding == "float32":
        payload = x.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        audio_format,
        1,
        w.sample_rate,
        w.sample_rate * block,
        block,
        bits,
        b"data",
        len(payload),
    )
    with open(path, "wb") as fh:
        fh.write(header + payload)


def _design_lowpass(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc for polyphase resampling by up/down.

    Cutoff is 0.95x the Nyquist of the lower of the two rates, expressed
    on the upsampled grid. DC gain is ``up`` so unit amplitude survives
    zero insertion.
    """
    taps = _TAPS_PER_PHASE * up + 1
    centre = (taps - 1) // 2
    # cycles per upsampled sample; min(1, up/down) is the lower-rate Nyquist
    fc = 0.475 * min(1.0, up / down) / up * 2.0
    n = np.arange(taps) - centre
    h = fc * np.sinc(fc * n) * np.kaiser(taps, _KAISER_BETA)
    return h * (up / h.sum())


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling to ``target_rate``."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if w.sample_rate == target_rate:
        return Waveform(w.samples.copy(), target_rate, w.source_path)

    g = math.gcd(w.sample_rate, target_rate)
    up = target_rate // g
    down = w.sample_rate // g
    n_out = round(len(w.samples) * target_rate / w.sample_rate)

    h = _design_lowpass(up, down)
    delay = (len(h) - 1) // 2
    pre = (-delay) % down  # zero-pad so the group delay lands on an output sample
    if pre:
        h = np.concatenate([np.zeros(pre), h])
    skip = (delay + pre) // down
    y = upfirdn(h, w.samples, up, down)[skip : skip + n_out]
    if len(y) < n_out:
        y = np.concatenate([y, np.zeros(n_out - len(y))])
    return Waveform(y, target_rate, w.source_path)


def peak_normalise(w: Waveform) -> Waveform:
    """Scale so max |sample| = 1; all-zero input passes through."""
    peak = np.max(np.abs(w.samples)) if len(w.samples) else 0.0
    if peak == 0.0:
        return Waveform(w.samples.copy(), w.sample_rate, w.source_path)
    return Waveform(w.samples / peak, w.sample_rate, w.source_path)


def ingest(path: str, downmix: str = "mean") -> Waveform:
    """Full ingestion chain: load, resample to 22050 Hz, peak-normalise."""
    return peak_normalise(resample(load_wav(path, downmix=downmix), PIPELINE_RATE))
