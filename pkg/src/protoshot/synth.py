"""Synthetic tone/chirp recordings with exact annotations.

Each file is a pink-noise background with non-overlapping band-limited
events (pure tones or linear chirps, raised-cosine fades) mixed in at a
requested SNR. Because event placement is decided before rendering, the
annotation CSV is exact by construction. Everything is driven by one
seed, so a rerun reproduces the WAV byte for byte.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np

from .audio_io import Waveform, write_wav
from .dataset import Annotation

FADE_S = 0.01
BACKGROUND_RMS = 0.05


@dataclass
class SynthSpec:
    class_name: str
    duration_s: float
    n_events: int
    freq_hz: float
    kind: str = "tone"  # or "chirp"
    snr_db: float = 12.0
    event_dur_s: tuple[float, float] = (0.25, 0.6)
    background_lfo_db: float = 0.0  # peak gain drift applied to the whole mix
    background_lfo_hz: float = 0.08
    dropout_rate_hz: float = 0.0  # expected brief recording dropouts per second
    dropout_db: float = 18.0
    seed: int = 0
    sample_rate: int = 22050

    def __post_init__(self):
        if self.kind not in ("tone", "chirp"):
            raise ValueError(f"kind must be tone or chirp, not {self.kind!r}")
        if self.n_events < 1 or self.duration_s <= 0:
            raise ValueError("need a positive duration and at least one event")
        lo, hi = self.event_dur_s
        if not 0 < lo <= hi:
            raise ValueError(f"bad event duration range {self.event_dur_s}")
        if not 0 < self.freq_hz < self.sample_rate / 2:
            raise ValueError(f"frequency {self.freq_hz} outside (0, Nyquist)")
        if self.background_lfo_db < 0 or self.background_lfo_hz <= 0:
            raise ValueError("gain drift needs depth >= 0 dB and a positive rate")
        if self.dropout_rate_hz < 0 or self.dropout_db <= 0:
            raise ValueError("dropouts need rate >= 0 and a positive attenuation")


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-RMS 1/f noise via spectral shaping of white noise."""
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    k = np.arange(len(spectrum), dtype=np.float64)
    k[0] = 1.0  # leave DC unamplified
    shaped = np.fft.irfft(spectrum / np.sqrt(k), n)
    return shaped / np.sqrt(np.mean(shaped**2))


def _faded(samples: np.ndarray, rate: int) -> np.ndarray:
    """Raised-cosine fade-in/out so events start and stop without clicks."""
    n_fade = min(int(FADE_S * rate), len(samples) // 2)
    if n_fade > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(n_fade) / n_fade)
        samples = samples.copy()
        samples[:n_fade] *= ramp
        samples[-n_fade:] *= ramp[::-1]
    return samples


def render_event(n: int, rate: int, freq_hz: float, kind: str) -> np.ndarray:
    """Unit-amplitude tone, or chirp sweeping 0.9f -> 1.1f, with fades."""
    t = np.arange(n) / rate
    if kind == "tone":
        phase = 2 * np.pi * freq_hz * t
    else:
        f0, f1 = 0.9 * freq_hz, 1.1 * freq_hz
        sweep = (f1 - f0) / (2 * t[-1]) if n > 1 else 0.0
        phase = 2 * np.pi * (f0 * t + sweep * t**2)
    return _faded(np.sin(phase), rate)


def place_events(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[float, float]]:
    """Non-overlapping (onset, offset) pairs, one event per equal slot.

    Each event gets a random duration from the configured range and a
    random onset within its slot, keeping one maximum-duration guard
    gap so neighbouring events never touch.
    """
    lo, hi = spec.event_dur_s
    slot = spec.duration_s / spec.n_events
    if slot < hi * 2:
        raise ValueError(
            f"{spec.n_events} events of up to {hi}s do not fit in {spec.duration_s}s"
        )
    out = []
    for i in range(spec.n_events):
        dur = rng.uniform(lo, hi)
        onset = i * slot + rng.uniform(0.0, slot - hi * 2)
        out.append((onset, onset + dur))
    return out


def synthesise(spec: SynthSpec) -> tuple[Waveform, list[Annotation]]:
    """Render one annotated file; amplitude chosen from the SNR."""
    rng = np.random.default_rng(spec.seed)
    rate = spec.sample_rate
    n = int(round(spec.duration_s * rate))
    signal = BACKGROUND_RMS * pink_noise(n, rng)

    # sine RMS is amp/sqrt(2); solve for amp at the requested SNR
    amp = BACKGROUND_RMS * 10.0 ** (spec.snr_db / 20.0) * np.sqrt(2.0)
    events = place_events(spec, rng)
    anns = []
    for onset, offset in events:
        a = int(round(onset * rate))
        b = min(int(round(offset * rate)), n)
        signal[a:b] += amp * render_event(b - a, rate, spec.freq_hz, spec.kind)
        anns.append(Annotation("", onset, offset, {spec.class_name: "POS"}))

    if spec.background_lfo_db > 0:
        # slow sinusoidal gain drift over the whole mix, as if the
        # recording chain's level wandered; random starting phase
        phase = rng.uniform(0.0, 2 * np.pi)
        t = np.arange(n) / rate
        swing = np.sin(2 * np.pi * spec.background_lfo_hz * t + phase)
        signal *= 10.0 ** (spec.background_lfo_db * swing / 20.0)

    if spec.dropout_rate_hz > 0:
        # brief attenuation dips, like momentary recording glitches;
        # they may land on events, whose annotations stay untouched
        attenuation = 10.0 ** (-spec.dropout_db / 20.0)
        for _ in range(int(round(spec.dropout_rate_hz * spec.duration_s))):
            length = int(rng.uniform(0.06, 0.15) * rate)
            at = int(rng.uniform(0.0, max(1, n - length)))
            signal[at : at + length] *= attenuation

    peak = np.abs(signal).max()
    if peak > 0.99:  # rescale everything so the mix never clips
        signal *= 0.99 / peak
    return Waveform(signal, rate), anns


def write_annotation_csv(path: str, audio_name: str, anns: list[Annotation]) -> None:
    """One POS row per event in the shared annotation format."""
    class_names = sorted({name for a in anns for name in a.labels})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Audiofilename", "Starttime", "Endtime"] + class_names)
        for a in anns:
            labels = [a.labels.get(name, "NEG") for name in class_names]
            writer.writerow([audio_name, f"{a.onset_s:.6f}", f"{a.offset_s:.6f}"] + labels)


def synth_file(wav_path: str, csv_path: str, spec: SynthSpec) -> list[Annotation]:
    """Render, write the WAV (float32) and its annotation CSV."""
    w, anns = synthesise(spec)
    name = os.path.basename(wav_path)
    for a in anns:
        a.audio_file = name
    write_wav(wav_path, w, encoding="float32")
    write_annotation_csv(csv_path, name, anns)
    return anns
