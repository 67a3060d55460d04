"""WAV parsing, resampling and normalisation tests."""

import struct

import numpy as np
import pytest

from protoshot.audio_io import (
    MalformedWav,
    UnsupportedEncoding,
    Waveform,
    ingest,
    load_wav,
    peak_normalise,
    resample,
    write_wav,
)


def make_wav_bytes(
    samples: np.ndarray,
    rate: int = 22050,
    n_channels: int = 1,
    audio_format: int = 1,
    bits: int = 16,
) -> bytes:
    """Hand-assembled WAV for parser tests. ``samples`` is interleaved."""
    if audio_format == 1:
        payload = np.asarray(samples, dtype="<i2").tobytes()
    else:
        payload = np.asarray(samples, dtype="<f4").tobytes()
    block = n_channels * bits // 8
    return struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        audio_format,
        n_channels,
        rate,
        rate * block,
        block,
        bits,
        b"data",
        len(payload),
    ) + payload


def test_pcm16_scaling(tmp_path):
    p = tmp_path / "a.wav"
    p.write_bytes(make_wav_bytes(np.array([0, 16384, -16384], dtype=np.int16)))
    w = load_wav(str(p))
    np.testing.assert_allclose(w.samples, [0.0, 0.5, -0.5], atol=1e-4)
    assert w.sample_rate == 22050


def test_float32_passthrough(tmp_path):
    p = tmp_path / "f.wav"
    vals = np.array([0.25, -0.75, 1.0], dtype=np.float32)
    p.write_bytes(make_wav_bytes(vals, audio_format=3, bits=32))
    w = load_wav(str(p))
    np.testing.assert_allclose(w.samples, vals, atol=1e-7)


def test_stereo_downmix_mean(tmp_path):
    p = tmp_path / "s.wav"
    interleaved = np.array([32767, 0], dtype=np.int16)  # L=~1.0, R=0.0
    p.write_bytes(make_wav_bytes(interleaved, n_channels=2))
    w = load_wav(str(p))
    assert len(w.samples) == 1
    np.testing.assert_allclose(w.samples, [0.5], atol=1e-4)


def test_stereo_downmix_first(tmp_path):
    p = tmp_path / "s.wav"
    interleaved = np.array([16384, -16384], dtype=np.int16)
    p.write_bytes(make_wav_bytes(interleaved, n_channels=2))
    w = load_wav(str(p), downmix="first")
    np.testing.assert_allclose(w.samples, [0.5], atol=1e-4)


def test_truncated_header_rejected(tmp_path):
    p = tmp_path / "bad.wav"
    p.write_bytes(b"RIFF\x00\x00")
    with pytest.raises(MalformedWav):
        load_wav(str(p))


def test_truncated_data_chunk_rejected(tmp_path):
    p = tmp_path / "bad.wav"
    whole = make_wav_bytes(np.array([1, 2, 3, 4], dtype=np.int16))
    p.write_bytes(whole[:-3])  # data chunk claims more bytes than present
    with pytest.raises(MalformedWav):
        load_wav(str(p))


def test_missing_data_chunk_rejected(tmp_path):
    p = tmp_path / "bad.wav"
    whole = make_wav_bytes(np.array([], dtype=np.int16))
    p.write_bytes(whole[:36])  # stop before the data chunk header
    with pytest.raises(MalformedWav):
        load_wav(str(p))


def test_alaw_rejected(tmp_path):
    p = tmp_path / "alaw.wav"
    p.write_bytes(make_wav_bytes(np.array([0], dtype=np.int16), audio_format=6))
    with pytest.raises(UnsupportedEncoding):
        load_wav(str(p))


def test_pcm24_rejected(tmp_path):
    p = tmp_path / "p24.wav"
    raw = make_wav_bytes(np.array([0, 0, 0], dtype=np.int16), bits=24)
    p.write_bytes(raw)
    with pytest.raises(UnsupportedEncoding):
        load_wav(str(p))


def test_write_load_round_trip(tmp_path):
    rng = np.random.default_rng(42)
    x = rng.uniform(-0.9, 0.9, size=2000)
    p = tmp_path / "rt.wav"
    write_wav(str(p), Waveform(x, 22050))
    back = load_wav(str(p))
    # one PCM16 quantisation step
    np.testing.assert_allclose(back.samples, x, atol=1.0 / 32768)


def test_write_load_float32_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    x = rng.uniform(-1.0, 1.0, size=500)
    p = tmp_path / "rt32.wav"
    write_wav(str(p), Waveform(x, 8000), encoding="float32")
    back = load_wav(str(p))
    np.testing.assert_allclose(back.samples, x, atol=1e-6)
    assert back.sample_rate == 8000


def test_resample_same_rate_identity():
    x = np.sin(np.linspace(0, 10, 1000))
    w = resample(Waveform(x, 22050), 22050)
    np.testing.assert_array_equal(w.samples, x)


def test_resample_output_length():
    w = Waveform(np.zeros(44100), 44100)
    assert len(resample(w, 22050).samples) == 22050
    w = Waveform(np.zeros(32000), 32000)
    assert len(resample(w, 22050).samples) == round(32000 * 22050 / 32000)


def test_resample_preserves_dc():
    w = Waveform(np.full(44100, 0.7), 44100)
    y = resample(w, 22050).samples
    # ignore filter edge transients
    core = y[500:-500]
    np.testing.assert_allclose(core, 0.7, atol=1e-3)


def test_resample_tone_frequency():
    rate_in, rate_out = 44100, 22050
    t = np.arange(rate_in) / rate_in
    w = Waveform(np.sin(2 * np.pi * 1000 * t), rate_in)
    y = resample(w, rate_out).samples
    spec = np.abs(np.fft.rfft(y * np.hanning(len(y))))
    peak_hz = np.argmax(spec) * rate_out / len(y)
    assert abs(peak_hz - 1000) < 2.0


def test_resample_down_up_round_trip():
    # band-limited content well below the target Nyquist survives a
    # down/up cycle
    rng = np.random.default_rng(42)
    for _ in range(5):
        f = rng.uniform(100, 22050 / 4)
        t = np.arange(44100) / 44100
        x = np.sin(2 * np.pi * f * t)
        w = Waveform(x, 44100)
        back = resample(resample(w, 22050), 44100).samples
        core = slice(2000, len(x) - 2000)
        rms = np.sqrt(np.mean((back[core] - x[core]) ** 2))
        assert rms <= 1e-2, f"{f:.1f} Hz round-trip rms {rms:.2e}"


def test_peak_normalise_basic():
    w = peak_normalise(Waveform(np.array([0.5, -0.25]), 22050))
    np.testing.assert_allclose(w.samples, [1.0, -0.5])


def test_peak_normalise_zeros_unchanged():
    w = peak_normalise(Waveform(np.zeros(10), 22050))
    np.testing.assert_array_equal(w.samples, np.zeros(10))


def test_peak_normalise_negative_peak():
    w = peak_normalise(Waveform(np.array([-0.1]), 22050))
    np.testing.assert_allclose(w.samples, [-1.0])


def test_peak_normalise_idempotent():
    rng = np.random.default_rng(3)
    x = rng.normal(size=256)
    once = peak_normalise(Waveform(x, 22050))
    twice = peak_normalise(once)
    np.testing.assert_allclose(twice.samples, once.samples)


def test_ingest_chain(tmp_path):
    t = np.arange(44100) / 44100
    x = 0.25 * np.sin(2 * np.pi * 440 * t)
    p = tmp_path / "in.wav"
    write_wav(str(p), Waveform(x, 44100))
    w = ingest(str(p))
    assert w.sample_rate == 22050
    assert len(w.samples) == 22050
    np.testing.assert_allclose(np.max(np.abs(w.samples)), 1.0)
