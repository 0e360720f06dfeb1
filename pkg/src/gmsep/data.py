"""Synthetic parallel corpus: C harmonic sources, their clean sum, and a
noisy copy at a controlled SNR.

Each source is a sum of a few harmonics of a fundamental drawn from a band
that is disjoint per source index, with slowly varying random amplitude
envelopes and harmonic amplitudes decaying with order, so the dominant
spectral peak of each source stays inside its band. This stands in for a
speech corpus at a scale where training takes minutes.

The clean mixture is literally the elementwise sum of the sources; the
noisy mixture adds white (or optionally low-pass filtered) Gaussian noise
scaled so the realized SNR equals a draw from N(snr_mean_db, snr_std_db^2).

Seeds: sample i of split s derives its stream from
SeedSequence(seed, spawn_key=(split_index, i)), so the three splits can
never collide and every sample is reproducible in isolation.
"""
from __future__ import annotations

import struct
import wave as wave_mod
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_arrays, save_arrays

SPLITS = ("train", "valid", "test")

# geometric fundamental bands, one per source index (Hz); comfortably below
# Nyquist at 8 kHz even with several harmonics
_BAND_BASE = 150.0
_BAND_RATIO = 1.35


def fundamental_band(source_id: int):
    lo = _BAND_BASE * _BAND_RATIO ** source_id
    return lo, lo * _BAND_RATIO


@dataclass
class DatasetSpec:
    """Sizes and statistics of one synthetic dataset."""

    num_train: int = 500
    num_valid: int = 50
    num_test: int = 50
    length: int = 1000            # samples per waveform
    sources: int = 2
    seed: int = 0
    snr_mean_db: float = -2.0
    snr_std_db: float = 3.6
    sample_rate: int = 8000
    noise_kind: str = "white"     # "white" or "lowpass"

    def split_size(self, split: str) -> int:
        return {"train": self.num_train, "valid": self.num_valid, "test": self.num_test}[split]


@dataclass
class MixtureSample:
    """One parallel training example.

    Invariants: x_c == sum(sources) exactly; x_n == x_c + noise exactly;
    all arrays share the same length.
    """

    x_n: np.ndarray
    x_c: np.ndarray
    sources: list = field(default_factory=list)
    noise: np.ndarray = None
    sample_rate: int = 8000
    snr_db: float = 0.0


def synth_source(seed, length: int, source_id: int, sample_rate: int = 8000) -> np.ndarray:
    """One harmonic pseudo-speaker, peak-normalized to 0.9.

    ``seed`` may be an int or a numpy SeedSequence; the same seed yields a
    bit-identical waveform.
    """
    if length < 256:
        raise ValueError(f"synth_source: length must be >= 256, got {length}")
    rng = np.random.default_rng(seed)
    lo, hi = fundamental_band(source_id)
    f0 = rng.uniform(lo, hi)
    n_harmonics = int(rng.integers(3, 7))
    t = np.arange(length) / sample_rate
    sig = np.zeros(length)
    n_keypoints = 6
    for h in range(1, n_harmonics + 1):
        freq = h * f0
        if freq >= 0.45 * sample_rate:
            break
        # slow 1/h decay keeps upper partials strong, so neighboring sources
        # overlap spectrally and cannot be split by fixed frequency bands
        amp = rng.uniform(0.6, 1.0) / h if h > 1 else rng.uniform(0.8, 1.2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        keys = rng.uniform(0.15, 1.0, size=n_keypoints)
        env = np.interp(np.linspace(0.0, n_keypoints - 1.0, length), np.arange(n_keypoints), keys)
        sig += amp * env * np.sin(2.0 * np.pi * freq * t + phase)
    peak = np.max(np.abs(sig))
    if peak > 0:
        sig *= 0.9 / peak
    return sig


def _shape_noise(noise, sample_rate, f_lo, f_hi):
    """Band-limit Gaussian noise in the frequency domain (soft edges)."""
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(len(noise), d=1.0 / sample_rate)
    gain = np.full(freqs.shape, 0.05)
    inside = (freqs >= f_lo) & (freqs <= f_hi)
    gain[inside] = 1.0
    edge = (freqs > f_hi) & (freqs <= 2.0 * f_hi)
    gain[edge] = np.linspace(1.0, 0.05, edge.sum()) if edge.any() else gain[edge]
    return np.fft.irfft(spectrum * gain, n=len(noise))


def _comb_filter_noise(noise, rng, sample_rate, f_lo=130.0, f_hi=1800.0):
    """Filter Gaussian noise through a random comb of narrow bands, then
    apply a slow random gain envelope.

    The result is a handful of faint, slowly breathing tones inside the
    speaker range; without the parallel clean reference they are hard to
    tell apart from genuine harmonic source content.
    """
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(len(noise), d=1.0 / sample_rate)
    gain = np.full(freqs.shape, 0.02)
    n_bands = int(rng.integers(8, 15))
    centers = rng.uniform(f_lo, f_hi, size=n_bands)
    widths = rng.uniform(3.0, 10.0, size=n_bands)
    for c, w in zip(centers, widths):
        gain += np.exp(-0.5 * ((freqs - c) / w) ** 2)
    shaped = np.fft.irfft(spectrum * np.minimum(gain, 1.0), n=len(noise))
    keys = rng.uniform(0.2, 1.0, size=6)
    env = np.interp(np.linspace(0.0, 5.0, len(noise)), np.arange(6), keys)
    return shaped * env


def make_sample(spec: DatasetSpec, seed, noise_scale=None) -> MixtureSample:
    """Sources + clean mixture + noisy mixture for one seed stream.

    ``noise_scale`` overrides the SNR-derived scale (0 gives x_n == x_c);
    it exists for tests and debugging.
    """
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = seq.spawn(spec.sources + 2)
    sources = []
    for k in range(spec.sources):
        child = children[k]
        s = synth_source(child, spec.length, k, spec.sample_rate)
        while not np.any(s):  # degenerate silence: retry on a fresh sub-seed
            child = child.spawn(1)[0]
            s = synth_source(child, spec.length, k, spec.sample_rate)
        sources.append(s)
    x_c = sources[0].copy()
    for s in sources[1:]:
        x_c = x_c + s
    snr_db = float(np.random.default_rng(children[-2]).normal(spec.snr_mean_db, spec.snr_std_db))
    noise_rng = np.random.default_rng(children[-1])
    noise = noise_rng.standard_normal(spec.length)
    if spec.noise_kind == "tonal":
        # Gaussian filtered through a per-sample random comb of narrow bands:
        # faint random tones inside the speaker range, easily mistaken for
        # harmonic source content
        noise = _comb_filter_noise(noise, noise_rng, spec.sample_rate)
    elif spec.noise_kind == "speech_shaped":
        # filtered Gaussian concentrated on the sources' harmonic range, so
        # the noise is spectrally confusable with speaker content instead of
        # spreading most of its energy where no source lives
        noise = _shape_noise(noise, spec.sample_rate, 120.0, 2200.0)
    elif spec.noise_kind == "lowpass":
        # simple moving-average FIR to mimic ambient, low-frequency-heavy noise
        width = 8
        noise = np.convolve(noise, np.ones(width) / width, mode="same")
    elif spec.noise_kind != "white":
        raise ValueError(f"unknown noise_kind {spec.noise_kind!r}")
    if noise_scale is None:
        clean_energy = float(np.dot(x_c, x_c))
        noise_energy = float(np.dot(noise, noise))
        noise_scale = np.sqrt(clean_energy / (noise_energy * 10.0 ** (snr_db / 10.0)))
    noise = noise * noise_scale
    x_n = x_c + noise
    return MixtureSample(x_n=x_n, x_c=x_c, sources=sources, noise=noise,
                         sample_rate=spec.sample_rate, snr_db=snr_db)


def make_split(spec: DatasetSpec, split: str) -> list:
    """All samples of one split, in index order."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    split_index = SPLITS.index(split)
    return [
        make_sample(spec, np.random.SeedSequence(spec.seed, spawn_key=(split_index, i)))
        for i in range(spec.split_size(split))
    ]


# ---------------------------------------------------------------------------
# on-disk cache and WAV I/O
# ---------------------------------------------------------------------------

def save_sample(path, sample: MixtureSample):
    arrays = {"x_n": sample.x_n, "x_c": sample.x_c, "noise": sample.noise,
              "snr_db": np.array(sample.snr_db),
              "sample_rate": np.array(float(sample.sample_rate))}
    for k, s in enumerate(sample.sources):
        arrays[f"source{k}"] = s
    save_arrays(path, arrays)


def load_sample(path) -> MixtureSample:
    arrays = load_arrays(path)
    sources = []
    k = 0
    while f"source{k}" in arrays:
        sources.append(arrays[f"source{k}"])
        k += 1
    return MixtureSample(
        x_n=arrays["x_n"], x_c=arrays["x_c"], sources=sources, noise=arrays["noise"],
        sample_rate=int(arrays["sample_rate"]), snr_db=float(arrays["snr_db"]))


class WavFormatError(ValueError):
    """Unsupported or malformed WAV input."""


def load_wav(path):
    """Read a RIFF/PCM 16-bit mono file, scaled to [-1, 1). Returns (x, rate)."""
    try:
        with wave_mod.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            frames = fh.readframes(fh.getnframes())
    except (wave_mod.Error, EOFError, struct.error) as exc:
        raise WavFormatError(f"{path}: malformed WAV file ({exc})") from exc
    if n_channels != 1:
        raise WavFormatError(f"{path}: unsupported channel count {n_channels} (mono required)")
    if width != 2:
        raise WavFormatError(f"{path}: unsupported sample width {8 * width} bit (16-bit PCM required)")
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def write_wav(path, x, sample_rate):
    """Write a waveform (clipped to [-1, 1)) as RIFF/PCM 16-bit mono."""
    x = np.asarray(x, dtype=np.float64)
    ints = np.clip(np.rint(x * 32768.0), -32768, 32767).astype("<i2")
    with wave_mod.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(ints.tobytes())
