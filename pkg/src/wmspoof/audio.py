"""Audio container, WAV I/O, preprocessing, spectral transforms and attacks.

All operations are pure: they never modify their inputs and take explicit
seeds wherever randomness is involved.
"""
from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import (
    InvalidInputError,
    UndefinedMetricError,
    UnsupportedFormatError,
    WavFormatError,
)

TARGET_RATE = 16000
TARGET_LENGTH = 64600

# half-width of the resampling kernel, in zero crossings of the lower rate
RESAMPLE_HALF_TAPS = 32

SNR_FLOOR_DB = -10.0
SNR_CEIL_DB = 80.0
SILENCE_ENERGY = 1e-10

DEFAULT_AUGMENT_SNR = (10.0, 40.0)

# stream tags keep generators with equal seeds statistically independent
_ATTACK_STREAM, _AUGMENT_STREAM, _TEST_SIGNAL_STREAM = 1, 2, 3
AUGMENT_FIR_TAPS = 10


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono PCM samples at a fixed sample rate.

    ``samples`` is stored as a read-only float64 array; operations return
    new buffers instead of writing into existing ones.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("audio samples must be finite")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise InvalidInputError(f"sample rate must be a positive integer, got {self.sample_rate}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)


@dataclass(frozen=True, eq=False)
class SpectralFrame:
    """One analysis frame of a short-time Fourier transform."""

    magnitudes: np.ndarray
    phases: np.ndarray
    frame_length: int
    hop: int

    @property
    def spectrum(self) -> np.ndarray:
        return self.magnitudes * np.exp(1j * self.phases)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

PathLike = Union[str, Path]


def read_wav(path: PathLike) -> AudioBuffer:
    """Read a 16-bit PCM or 32-bit float WAV file, downmixing to mono.

    Integer samples are scaled by 1/32768. Stereo is averaged across channels.
    """
    data = Path(path).read_bytes()
    if len(data) < 44:
        raise WavFormatError(f"{path}: file too short for a WAV header ({len(data)} bytes)")
    if data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: missing RIFF/WAVE signature")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == 0xFFFE:
                if len(body) < 26:
                    raise WavFormatError(f"{path}: truncated WAVE_FORMAT_EXTENSIBLE header")
                (sub,) = struct.unpack("<H", body[24:26])
                fmt = (sub,) + fmt[1:]
        elif chunk_id == b"data":
            payload = body
            break
        pos += 8 + size + (size & 1)

    if fmt is None:
        raise WavFormatError(f"{path}: no fmt chunk")
    if payload is None:
        raise WavFormatError(f"{path}: no data chunk")

    encoding, channels, rate, _, _, bits = fmt
    if channels not in (1, 2):
        raise UnsupportedFormatError(f"{path}: {channels} channels not supported")
    if (encoding, bits) == (1, 16):
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif (encoding, bits) == (3, 32):
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedFormatError(
            f"{path}: encoding {encoding} with {bits} bits per sample not supported"
        )
    if rate <= 0:
        raise WavFormatError(f"{path}: invalid sample rate {rate}")

    frame_bytes = dtype.itemsize * channels
    usable = len(payload) - len(payload) % frame_bytes
    raw = np.frombuffer(payload[:usable], dtype=dtype).astype(np.float64) * scale
    if channels == 2:
        raw = raw.reshape(-1, 2).mean(axis=1)
    if not np.all(np.isfinite(raw)):
        raise WavFormatError(f"{path}: non-finite float samples")
    return AudioBuffer(raw, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    """Quantize float samples to int16 with clamping (1.0 -> 32767)."""
    q = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(audio: AudioBuffer, path: PathLike) -> None:
    """Write ``audio`` as a mono 16-bit PCM WAV file."""
    try:
        with wave.open(str(path), "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(audio.sample_rate)
            fh.writeframes(to_pcm16(audio.samples).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _hann_taper(v: np.ndarray) -> np.ndarray:
    out = 0.5 * (1.0 + np.cos(np.pi * v))
    out[np.abs(v) >= 1.0] = 0.0
    return out


def resample(audio: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited resampling with a Hann-windowed sinc kernel.

    The kernel spans 64 zero crossings of the lower of the two rates, so the
    anti-aliasing cutoff sits at the lower Nyquist frequency.
    """
    if int(target_rate) != target_rate or target_rate <= 0:
        raise InvalidInputError(f"target rate must be a positive integer, got {target_rate}")
    target_rate = int(target_rate)
    src = audio.sample_rate
    if target_rate == src:
        return AudioBuffer(audio.samples.copy(), src)

    x = audio.samples
    n_out = _round_half_up(len(x) * target_rate / src)
    if len(x) == 0 or n_out == 0:
        return AudioBuffer(np.zeros(n_out), target_rate)

    cutoff = min(1.0, target_rate / src)  # relative to source Nyquist
    half_width = RESAMPLE_HALF_TAPS / cutoff  # in source samples
    reach = int(math.ceil(half_width))
    offsets = np.arange(-reach, reach + 1)
    step = src / target_rate

    out = np.empty(n_out)
    chunk = 4096
    for start in range(0, n_out, chunk):
        t = np.arange(start, min(start + chunk, n_out)) * step
        base = np.floor(t).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        u = t[:, None] - idx
        kernel = cutoff * np.sinc(cutoff * u) * _hann_taper(u / half_width)
        valid = (idx >= 0) & (idx < len(x))
        vals = np.where(valid, x[np.clip(idx, 0, len(x) - 1)], 0.0)
        out[start:start + len(t)] = np.sum(vals * kernel, axis=1)
    return AudioBuffer(out, target_rate)


def fix_length(audio: AudioBuffer, target_len: int = TARGET_LENGTH) -> AudioBuffer:
    """Truncate, or tile end-to-end, to exactly ``target_len`` samples."""
    if len(audio) == 0:
        raise InvalidInputError("cannot fix the length of an empty buffer")
    if target_len < 0:
        raise InvalidInputError(f"target length must be non-negative, got {target_len}")
    x = audio.samples
    if len(x) >= target_len:
        return AudioBuffer(x[:target_len].copy(), audio.sample_rate)
    reps = -(-target_len // len(x))
    return AudioBuffer(np.tile(x, reps)[:target_len], audio.sample_rate)


def preprocess(audio: AudioBuffer, rate: int = TARGET_RATE, length: int = TARGET_LENGTH) -> AudioBuffer:
    """Resample then normalise length, matching the detector front-end input."""
    return fix_length(resample(audio, rate), length)


# ---------------------------------------------------------------------------
# Short-time Fourier transform
# ---------------------------------------------------------------------------

def analysis_window(frame_length: int, window: str = "hann") -> np.ndarray:
    if window == "hann":
        n = np.arange(frame_length)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_length)
    if window == "boxcar":
        return np.ones(frame_length)
    raise InvalidInputError(f"unknown window {window!r}")


def frame_count(length: int, frame_length: int, hop: int) -> int:
    if length < frame_length:
        return 0
    return (length - frame_length) // hop + 1


def stft_matrix(x: np.ndarray, frame_length: int = 1024, hop: int = 512,
                window: str = "hann") -> np.ndarray:
    """Complex STFT as a ``(frames, bins)`` array. Frames start at sample 0."""
    if not 0 < hop <= frame_length <= len(x):
        raise InvalidInputError(
            f"need 0 < hop <= frame_length <= length, got hop={hop}, "
            f"frame_length={frame_length}, length={len(x)}"
        )
    n_frames = frame_count(len(x), frame_length, hop)
    idx = np.arange(frame_length)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(x[idx] * analysis_window(frame_length, window), axis=1)


def istft_matrix(spec: np.ndarray, frame_length: int, hop: int, length: int,
                 window: str = "hann") -> np.ndarray:
    """Least-squares overlap-add inverse of :func:`stft_matrix`.

    Samples not covered by any window weight are returned as zero.
    """
    w = analysis_window(frame_length, window)
    frames = np.fft.irfft(spec, n=frame_length, axis=1) * w
    out = np.zeros(length)
    norm = np.zeros(length)
    for i, frame in enumerate(frames):
        s = i * hop
        out[s:s + frame_length] += frame
        norm[s:s + frame_length] += w * w
    covered = norm > 1e-10
    out[covered] /= norm[covered]
    out[~covered] = 0.0
    return out


def stft(audio: AudioBuffer, frame_length: int = 1024, hop: int = 512) -> list[SpectralFrame]:
    """Hann-windowed short-time transform as a list of frames."""
    spec = stft_matrix(audio.samples, frame_length, hop)
    mags = np.abs(spec)
    phases = np.angle(spec)
    phases[phases <= -np.pi] = np.pi
    return [SpectralFrame(m, p, frame_length, hop) for m, p in zip(mags, phases)]


def istft(frames: Sequence[SpectralFrame], length: int, sample_rate: int) -> AudioBuffer:
    if not frames:
        return AudioBuffer(np.zeros(length), sample_rate)
    frame_length, hop = frames[0].frame_length, frames[0].hop
    spec = np.stack([f.spectrum for f in frames])
    return AudioBuffer(istft_matrix(spec, frame_length, hop, length), sample_rate)


# ---------------------------------------------------------------------------
# Quality metric
# ---------------------------------------------------------------------------

def segmental_snr(reference: AudioBuffer, test: AudioBuffer, segment: int = 512) -> float:
    """Mean per-segment SNR in dB, skipping silent reference segments.

    Each segment value is clamped to [-10, 80] dB before averaging.
    """
    if len(reference) != len(test) or reference.sample_rate != test.sample_rate:
        raise InvalidInputError("segmental SNR needs equal lengths and sample rates")
    ref = reference.samples
    err = ref - test.samples
    values = []
    for start in range(0, len(ref), segment):
        sig = float(np.sum(ref[start:start + segment] ** 2))
        if sig < SILENCE_ENERGY:
            continue
        noise = float(np.sum(err[start:start + segment] ** 2))
        snr = SNR_CEIL_DB if noise == 0.0 else 10.0 * math.log10(sig / noise)
        values.append(min(max(snr, SNR_FLOOR_DB), SNR_CEIL_DB))
    if not values:
        raise UndefinedMetricError("no valid segments: reference is silent")
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Attacks and augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdditiveNoise:
    snr_db: float
    seed: int = 0


@dataclass(frozen=True)
class ResampleChain:
    intermediate_rate: int


@dataclass(frozen=True)
class AmplitudeScale:
    gain: float


Attack = Union[AdditiveNoise, ResampleChain, AmplitudeScale]


def parse_attack(text: str, seed: int = 0) -> Attack:
    """Parse ``additive_noise:20``, ``resample_chain:8000`` or ``amplitude_scale:0.5``."""
    name, _, arg = text.partition(":")
    try:
        value = float(arg)
    except ValueError:
        raise InvalidInputError(f"attack {text!r} needs a numeric parameter") from None
    if name == "additive_noise":
        return AdditiveNoise(value, seed)
    if name == "resample_chain":
        return ResampleChain(int(value))
    if name == "amplitude_scale":
        return AmplitudeScale(value)
    raise InvalidInputError(f"unknown attack {name!r}")


def _scale_to_snr(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    p_sig = float(np.mean(signal ** 2))
    p_noise = float(np.mean(noise ** 2))
    if p_sig == 0.0 or p_noise == 0.0:
        return np.zeros_like(noise)
    return noise * math.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))


def attack(audio: AudioBuffer, kind: Attack) -> AudioBuffer:
    """Apply a signal-processing attack.

    Additive noise is scaled so the realised SNR is exact; with a fixed seed
    the same noise shape is reused at every SNR, only its level changes.
    """
    if isinstance(kind, AdditiveNoise):
        if not math.isfinite(kind.snr_db):
            raise InvalidInputError("noise SNR must be finite")
        if len(audio) == 0:
            return audio.with_samples(audio.samples.copy())
        noise = np.random.default_rng([kind.seed, _ATTACK_STREAM]).standard_normal(len(audio))
        return audio.with_samples(audio.samples + _scale_to_snr(audio.samples, noise, kind.snr_db))
    if isinstance(kind, ResampleChain):
        if kind.intermediate_rate <= 0:
            raise InvalidInputError("intermediate rate must be positive")
        there = resample(audio, kind.intermediate_rate)
        back = resample(there, audio.sample_rate)
        x = back.samples
        if len(x) != len(audio):
            x = np.pad(x, (0, max(0, len(audio) - len(x))))[:len(audio)]
        return audio.with_samples(x)
    if isinstance(kind, AmplitudeScale):
        if not math.isfinite(kind.gain):
            raise InvalidInputError("gain must be finite")
        return audio.with_samples(np.clip(audio.samples * kind.gain, -1.0, 1.0))
    raise InvalidInputError(f"unknown attack {kind!r}")


def colored_noise_augment(audio: AudioBuffer, snr_range=DEFAULT_AUGMENT_SNR, seed: int = 0) -> AudioBuffer:
    """Add FIR-shaped Gaussian noise at an SNR drawn uniformly from ``snr_range``.

    A stationary, signal-independent stand-in for RawBoost-style colored
    noise; the default range of 10-40 dB is an assumption.
    """
    lo, hi = (float(v) for v in snr_range)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        raise InvalidInputError(f"invalid SNR range {snr_range!r}")
    rng = np.random.default_rng([seed, _AUGMENT_STREAM])
    taps = rng.standard_normal(AUGMENT_FIR_TAPS)
    white = rng.standard_normal(len(audio) + AUGMENT_FIR_TAPS - 1)
    colored = np.convolve(white, taps, mode="valid")
    snr_db = rng.uniform(lo, hi) if hi > lo else lo
    if len(audio) == 0:
        return audio.with_samples(audio.samples.copy())
    return audio.with_samples(audio.samples + _scale_to_snr(audio.samples, colored, snr_db))


def measured_snr(clean: AudioBuffer, noisy: AudioBuffer) -> float:
    """Global SNR in dB of ``noisy`` against ``clean``."""
    diff = noisy.samples - clean.samples
    return 10.0 * math.log10(np.mean(clean.samples ** 2) / np.mean(diff ** 2))


def noise_plus_tones(seed: int, seconds: float = 4.0, sample_rate: int = TARGET_RATE,
                     rms: float = 0.1, noise_db: float = -20.0) -> AudioBuffer:
    """Seeded test signal: three low-band tones plus white noise.

    The tones sit between 100 and 900 Hz; the noise floor is ``noise_db``
    below the tone power and the whole signal is scaled to ``rms``.
    """
    rng = np.random.default_rng([seed, _TEST_SIGNAL_STREAM])
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    tones = np.zeros(n)
    for _ in range(3):
        freq = rng.uniform(100.0, 900.0)
        tones += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    noise = rng.standard_normal(n)
    noise *= math.sqrt(np.mean(tones ** 2) * 10 ** (noise_db / 10) / np.mean(noise ** 2))
    x = tones + noise
    return AudioBuffer(x * rms / math.sqrt(np.mean(x ** 2)), sample_rate)
