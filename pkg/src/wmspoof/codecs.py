"""Handcrafted audio watermark schemes behind one embed/detect interface.

Six blind schemes are provided:

``lsb``
    Payload bits written into the low bit-plane(s) of keyed 16-bit-quantised
    samples, 100 samples per bit, majority vote on detection.
``phase``
    Phase coding: keyed mid-band bins of the first frame are set to
    +/- ``strength`` radians; every later frame receives the same per-bin
    rotation so inter-frame phase differences are preserved.
``dsss``
    Direct-sequence spread spectrum, one keyed +/-1 chip sequence per segment.
``svd_qim``
    Quantisation of the largest singular value of 32x32 magnitude
    spectrogram blocks onto an even/odd lattice, filling low-frequency
    blocks first.
``patchwork``
    Two keyed disjoint sample sets per segment are shifted in opposite
    directions; the sign of their mean difference carries the bit.
``norm_space``
    Euclidean norms of consecutive blocks quantised onto an even/odd lattice
    by uniform block scaling.

Every sign decision maps an exactly-zero statistic to bit 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Iterable, Optional

import numpy as np

from .audio import AudioBuffer, frame_count, istft_matrix, stft_matrix
from .errors import CapacityError, ConfigError, InvalidInputError, ParseError

SCHEMES = ("lsb", "phase", "dsss", "svd_qim", "patchwork", "norm_space")

# per-scheme RNG stream tags so two schemes sharing a key stay independent
_TAGS = {name: i + 1 for i, name in enumerate(SCHEMES)}

_DEFAULTS = {
    # scheme: (strength, segment)
    "lsb": (1.0, 100),          # bit-plane count, samples per bit
    "phase": (math.pi / 2, 1024),  # target phase magnitude, frame length
    "dsss": (0.005, 4000),      # chip amplitude, segment length
    "svd_qim": (0.5, 1024),     # lattice step, STFT frame length
    "patchwork": (0.002, 4000),  # patch offset, segment length
    "norm_space": (0.05, 1000),  # lattice step, block length
}

SVD_ITERATIONS = 12
PHASE_BAND = (1 / 16, 1 / 4)  # keyed bins drawn from this fraction of the frame


@dataclass(frozen=True)
class WatermarkPayload:
    """An ordered, non-empty bit string."""

    bits: tuple

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits:
            raise InvalidInputError("payload must contain at least one bit")
        if any(b not in (0, 1) for b in bits):
            raise InvalidInputError("payload bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return len(self.bits)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.uint8)

    @classmethod
    def from_hex(cls, text: str) -> "WatermarkPayload":
        text = text.strip().lower().removeprefix("0x")
        try:
            value = int(text, 16)
        except ValueError:
            raise InvalidInputError(f"invalid hex payload {text!r}") from None
        n = 4 * len(text)
        return cls(tuple((value >> (n - 1 - i)) & 1 for i in range(n)))

    @classmethod
    def random(cls, n_bits: int, rng: np.random.Generator) -> "WatermarkPayload":
        return cls(tuple(rng.integers(0, 2, n_bits).tolist()))

    def to_hex(self) -> str:
        padded = self.bits + (0,) * (-len(self.bits) % 4)
        value = 0
        for b in padded:
            value = (value << 1) | b
        return format(value, "0{}X".format(len(padded) // 4))


@dataclass(frozen=True)
class CodecConfig:
    """Scheme name, key and strength/size parameters.

    ``strength`` and ``segment`` default per scheme when left as ``None``.
    ``segment`` is the per-bit sample span for lsb, dsss and patchwork, the
    block length for norm_space and the frame length for phase and svd_qim.
    ``patch`` is the patchwork set size and ``block`` the svd_qim block edge.
    A strength of exactly zero turns embedding into the identity.
    """

    scheme: str
    key: int = 0
    strength: Optional[float] = None
    segment: Optional[int] = None
    patch: int = 500
    block: int = 32

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; expected one of {', '.join(SCHEMES)}")
        strength, segment = _DEFAULTS[self.scheme]
        if self.strength is None:
            object.__setattr__(self, "strength", strength)
        if self.segment is None:
            object.__setattr__(self, "segment", segment)
        object.__setattr__(self, "strength", float(self.strength))
        for name in ("key", "segment", "patch", "block"):
            value = getattr(self, name)
            if int(value) != value:
                raise ConfigError(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        self._validate()

    def _validate(self):
        s = self.strength
        if not math.isfinite(s) or s < 0:
            raise ConfigError(f"strength must be finite and non-negative, got {s}")
        if self.key < 0:
            raise ConfigError("key must be a non-negative integer")
        seg = self.segment
        if self.scheme == "lsb":
            if s != int(s) or not 0 <= s <= 15:
                raise ConfigError("lsb strength is a bit-plane count in 1..15")
            if seg < 1:
                raise ConfigError("lsb spread factor must be >= 1")
        elif self.scheme == "phase":
            if s >= math.pi:
                raise ConfigError("phase strength must lie in (0, pi)")
            if seg < 64 or seg % 2:
                raise ConfigError("phase frame length must be even and >= 64")
        elif self.scheme == "dsss":
            if seg < 16:
                raise ConfigError("dsss segment must be >= 16 samples")
        elif self.scheme == "svd_qim":
            if seg % 2 or seg < 2 * self.block or self.block < 2:
                raise ConfigError("svd_qim needs an even frame length of at least two blocks")
        elif self.scheme == "patchwork":
            if self.patch < 1 or seg < 2 * self.patch:
                raise ConfigError("patchwork segment must hold two disjoint patches")
        elif self.scheme == "norm_space":
            if seg < 2:
                raise ConfigError("norm_space block must be >= 2 samples")

    def to_text(self) -> str:
        """Flat ``key=value`` block, e.g. ``scheme=dsss key=42 strength=0.005 ...``."""
        return " ".join(f"{f.name}={getattr(self, f.name)!r}".replace("'", "") for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "CodecConfig":
        values = {}
        for item in text.split():
            name, sep, value = item.partition("=")
            if not sep:
                raise ParseError(f"expected key=value, got {item!r}")
            values[name] = value
        if "scheme" not in values:
            raise ParseError("codec config is missing 'scheme'")
        kwargs = {"scheme": values.pop("scheme")}
        try:
            for name, value in values.items():
                if name == "strength":
                    kwargs[name] = float(value)
                elif name in ("key", "segment", "patch", "block"):
                    kwargs[name] = int(value)
                else:
                    raise ParseError(f"unknown codec field {name!r}")
        except ValueError as exc:
            raise ParseError(f"bad codec field value: {exc}") from None
        return cls(**kwargs)


@dataclass(frozen=True, eq=False)
class DetectionResult:
    bits: np.ndarray
    confidence: np.ndarray

    def payload(self) -> WatermarkPayload:
        return WatermarkPayload(tuple(self.bits.tolist()))


def _rng(config: CodecConfig, *extra: int) -> np.random.Generator:
    return np.random.default_rng([config.key, _TAGS[config.scheme], *extra])


def _sign_bits(stat: np.ndarray) -> np.ndarray:
    return (stat > 0).astype(np.uint8)


def _lattice_target(value: float, bit: int, step: float) -> float:
    """Nearest point of ``step * q`` with ``q % 2 == bit`` and ``q >= 1``."""
    q = math.floor(value / step + 0.5)
    if q % 2 != bit:
        q = q + 1 if value / step >= q else q - 1
    while q < 1:
        q += 2
    return q * step


def _lattice_decode(values: np.ndarray, step: float) -> tuple[np.ndarray, np.ndarray]:
    scaled = np.asarray(values) / step
    q = np.floor(scaled + 0.5)
    bits = (q.astype(np.int64) % 2).astype(np.uint8)
    confidence = step * (0.5 - np.abs(scaled - q))
    return bits, confidence


# ---------------------------------------------------------------------------
# capacity
# ---------------------------------------------------------------------------

def _phase_bins(frame_length: int) -> np.ndarray:
    lo = int(frame_length * PHASE_BAND[0])
    hi = int(frame_length * PHASE_BAND[1])
    return np.arange(max(lo, 1), min(hi, frame_length // 2))


def _svd_blocks(n_samples: int, config: CodecConfig) -> list[tuple[int, int]]:
    frame, b = config.segment, config.block
    n_frames = frame_count(n_samples, frame, frame // 2)
    # the first and last frames are left alone so the overlap-add
    # normalisation never divides by a vanishing window
    usable = max(n_frames - 2, 0)
    n_bins = frame // 2 + 1
    return [(1 + fi * b, ki * b) for fi in range(usable // b) for ki in range(n_bins // b)]


def _norm_threshold(config: CodecConfig) -> float:
    return config.strength / 2


def capacity(audio: AudioBuffer, config: CodecConfig) -> int:
    """Maximum number of payload bits ``embed`` accepts for this audio."""
    n = len(audio)
    seg = config.segment
    scheme = config.scheme
    if n == 0:
        return 0
    if scheme == "lsb":
        return (n * max(int(config.strength), 1)) // seg
    if scheme in ("dsss", "patchwork"):
        return n // seg
    if scheme == "phase":
        return len(_phase_bins(seg)) if n >= seg else 0
    if scheme == "svd_qim":
        return len(_svd_blocks(n, config))
    if scheme == "norm_space":
        if config.strength == 0:
            return n // seg
        blocks = audio.samples[: (n // seg) * seg].reshape(-1, seg)
        return int(np.sum(np.linalg.norm(blocks, axis=1) >= _norm_threshold(config)))
    raise ConfigError(f"unknown scheme {scheme!r}")


# ---------------------------------------------------------------------------
# per-scheme embed / detect
# ---------------------------------------------------------------------------

def _lsb_slots(config: CodecConfig, n_samples: int, n_bits: int):
    planes = int(config.strength)
    slots = _rng(config).permutation(n_samples * planes)[: n_bits * config.segment]
    return slots % n_samples, slots // n_samples


def _embed_lsb(x, bits, config):
    pos, plane = _lsb_slots(config, len(x), len(bits))
    owner = np.repeat(np.arange(len(bits)), config.segment)
    y = x.copy()
    q = np.clip(np.round(x * 32768.0), -32768, 32767).astype(np.int64)
    for p in np.unique(plane):
        sel = plane == p
        sp = pos[sel]
        q[sp] = (q[sp] & ~(1 << int(p))) | (bits[owner[sel]].astype(np.int64) << int(p))
    touched = np.unique(pos)
    y[touched] = q[touched] / 32768.0
    return y


def _detect_lsb(x, n_bits, config):
    pos, plane = _lsb_slots(config, len(x), n_bits)
    q = np.clip(np.round(x[pos] * 32768.0), -32768, 32767).astype(np.int64)
    votes = ((q >> plane) & 1).reshape(n_bits, config.segment).mean(axis=1)
    return (votes > 0.5).astype(np.uint8), np.abs(votes - 0.5) * 2


def _phase_layout(config, n_bits):
    return _rng(config).permutation(_phase_bins(config.segment))[:n_bits]


def _embed_phase(x, bits, config):
    frame = config.segment
    n_frames = len(x) // frame
    bins = _phase_layout(config, len(bits))
    spec = np.fft.rfft(x[: n_frames * frame].reshape(n_frames, frame), axis=1)
    target = np.where(bits == 1, config.strength, -config.strength)
    rotation = np.exp(1j * (target - np.angle(spec[0, bins])))
    spec[:, bins] *= rotation[None, :]
    y = x.copy()
    y[: n_frames * frame] = np.fft.irfft(spec, n=frame, axis=1).reshape(-1)
    return y


def _detect_phase(x, n_bits, config):
    frame = config.segment
    bins = _phase_layout(config, n_bits)
    first = np.fft.rfft(x[:frame])[bins]
    return _sign_bits(first.imag), np.abs(first.imag)


def _pn(config, seg_index, length):
    return _rng(config, seg_index).integers(0, 2, length).astype(np.float64) * 2 - 1


def _embed_dsss(x, bits, config):
    seg = config.segment
    y = x.copy()
    alpha = config.strength
    for i, b in enumerate(bits):
        part = y[i * seg:(i + 1) * seg]
        pn = _pn(config, i, seg)
        sign = 1.0 if b else -1.0
        corr = float(part @ pn) / seg
        # informed amplitude: the host's own correlation never erodes the
        # margin below alpha
        amp = max(alpha, alpha - sign * corr)
        part += sign * amp * pn
    return y


def _detect_dsss(x, n_bits, config):
    seg = config.segment
    stats = np.empty(n_bits)
    for i in range(n_bits):
        part = x[i * seg:(i + 1) * seg]
        pn = _pn(config, i, seg)
        denom = np.linalg.norm(part) * math.sqrt(seg)
        stats[i] = float(part @ pn) / denom if denom > 0 else 0.0
    return _sign_bits(stats), np.abs(stats)


def _patches(config, seg_index):
    idx = _rng(config, seg_index).permutation(config.segment)[: 2 * config.patch]
    return idx[: config.patch], idx[config.patch:]


def _embed_patchwork(x, bits, config):
    seg, d = config.segment, config.strength
    y = x.copy()
    for i, b in enumerate(bits):
        part = y[i * seg:(i + 1) * seg]
        a_idx, b_idx = _patches(config, i)
        sign = 1.0 if b else -1.0
        diff = part[a_idx].mean() - part[b_idx].mean()
        # informed offset: guarantees sign * (mean(A) - mean(B)) >= 2d
        offset = max(d, d - sign * diff / 2)
        part[a_idx] += sign * offset
        part[b_idx] -= sign * offset
    return y


def _detect_patchwork(x, n_bits, config):
    seg = config.segment
    stats = np.empty(n_bits)
    for i in range(n_bits):
        part = x[i * seg:(i + 1) * seg]
        a_idx, b_idx = _patches(config, i)
        stats[i] = part[a_idx].mean() - part[b_idx].mean()
    return _sign_bits(stats), np.abs(stats)


def _block_norms(x, block):
    n_blocks = len(x) // block
    return np.linalg.norm(x[: n_blocks * block].reshape(n_blocks, block), axis=1)


def _embed_norm_space(x, bits, config):
    block, step = config.segment, config.strength
    thr = _norm_threshold(config)
    y = x.copy()
    norms = _block_norms(x, block)
    k = 0
    for j, norm in enumerate(norms):
        if k == len(bits):
            break
        if norm < thr:
            continue
        y[j * block:(j + 1) * block] *= _lattice_target(norm, int(bits[k]), step) / norm
        k += 1
    return y


def _detect_norm_space(x, n_bits, config):
    norms = _block_norms(x, config.segment)
    used = norms[norms >= _norm_threshold(config)][:n_bits]
    return _lattice_decode(used, config.strength)


def _top_singular(block: np.ndarray):
    u, s, vt = np.linalg.svd(block)
    return s[0], u[:, 0], vt[0]


def _svd_layout(n_samples, config, n_bits):
    # low-frequency rows first: that is where speech-like hosts keep their energy
    blocks = sorted(_svd_blocks(n_samples, config), key=lambda fk: (fk[1], fk[0]))
    return blocks[:n_bits]


def _embed_svd_qim(x, bits, config):
    frame, b, step = config.segment, config.block, config.strength
    hop = frame // 2
    layout = _svd_layout(len(x), config, len(bits))
    spec = stft_matrix(x, frame, hop)
    mags = np.abs(spec)
    targets = [
        _lattice_target(_top_singular(mags[f:f + b, k:k + b])[0], int(bit), step)
        for (f, k), bit in zip(layout, bits)
    ]
    y = x.copy()
    # the STFT is redundant, so a magnitude edit is only partly kept after
    # resynthesis; iterate analysis/correction until every block lands
    for it in range(SVD_ITERATIONS):
        if it:
            spec = stft_matrix(y, frame, hop)
            mags = np.abs(spec)
        delta = np.zeros_like(spec)
        worst = 0.0
        for (f, k), target in zip(layout, targets):
            sigma, u, v = _top_singular(mags[f:f + b, k:k + b])
            err = target - sigma
            worst = max(worst, abs(err))
            phase = np.exp(1j * np.angle(spec[f:f + b, k:k + b]))
            delta[f:f + b, k:k + b] = err * np.outer(u, v) * phase
        if worst < step / 20:
            break
        y = y + istft_matrix(delta, frame, hop, len(y))
    return y


def _detect_svd_qim(x, n_bits, config):
    frame, b = config.segment, config.block
    layout = _svd_layout(len(x), config, n_bits)
    mags = np.abs(stft_matrix(x, frame, frame // 2))
    sigmas = np.array([_top_singular(mags[f:f + b, k:k + b])[0] for f, k in layout])
    return _lattice_decode(sigmas, config.strength)


_EMBED = {
    "lsb": _embed_lsb,
    "phase": _embed_phase,
    "dsss": _embed_dsss,
    "svd_qim": _embed_svd_qim,
    "patchwork": _embed_patchwork,
    "norm_space": _embed_norm_space,
}

_DETECT = {
    "lsb": _detect_lsb,
    "phase": _detect_phase,
    "dsss": _detect_dsss,
    "svd_qim": _detect_svd_qim,
    "patchwork": _detect_patchwork,
    "norm_space": _detect_norm_space,
}


# ---------------------------------------------------------------------------
# public interface
# ---------------------------------------------------------------------------

def embed(audio: AudioBuffer, payload: WatermarkPayload, config: CodecConfig) -> AudioBuffer:
    """Hide ``payload`` in ``audio``; the output has the same length and rate."""
    cap = capacity(audio, config)
    if len(payload) > cap:
        raise CapacityError(
            f"{config.scheme}: payload of {len(payload)} bits exceeds capacity {cap} "
            f"for {len(audio)} samples"
        )
    if config.strength == 0:
        return audio.with_samples(audio.samples.copy())
    y = _EMBED[config.scheme](audio.samples.copy(), payload.as_array(), config)
    return audio.with_samples(y)


def detect(audio: AudioBuffer, payload_length: int, config: CodecConfig) -> DetectionResult:
    """Blindly recover ``payload_length`` bits using the embedding config."""
    if payload_length < 1:
        raise InvalidInputError("payload length must be >= 1")
    if config.strength == 0:
        raise ConfigError("cannot detect with zero strength")
    cap = capacity(audio, config)
    if payload_length > cap:
        raise CapacityError(
            f"{config.scheme}: {len(audio)} samples hold at most {cap} bits, "
            f"{payload_length} requested"
        )
    bits, conf = _DETECT[config.scheme](audio.samples, payload_length, config)
    return DetectionResult(np.asarray(bits, dtype=np.uint8), np.asarray(conf, dtype=np.float64))


def _as_bits(value) -> np.ndarray:
    if isinstance(value, WatermarkPayload):
        return value.as_array()
    if isinstance(value, DetectionResult):
        return value.bits
    return np.asarray(value, dtype=np.uint8)


def bit_error_rate(sent, received) -> float:
    """Hamming distance between two equal-length bit strings, over length."""
    a, b = _as_bits(sent), _as_bits(received)
    if a.shape != b.shape or a.size == 0:
        raise InvalidInputError(f"payload lengths differ or are empty ({a.size} vs {b.size})")
    return float(np.count_nonzero(a != b)) / a.size


def default_configs(key: int = 0) -> list[CodecConfig]:
    return [CodecConfig(scheme, key=key) for scheme in SCHEMES]


def with_key(config: CodecConfig, key: int) -> CodecConfig:
    return replace(config, key=key)


def schemes_from(names: Iterable[str]) -> list[CodecConfig]:
    return [CodecConfig(name) for name in names]
