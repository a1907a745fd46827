"""Audio ingestion: WAV decoding, resampling, truncation, peak normalisation,
dataset loading and a seeded synthetic phonocardiogram generator."""
from __future__ import annotations

import dataclasses
import io
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import (ClipTooShortError, DataError, EmptyAudioError, UnsupportedCodecError,
                     WavFormatError)

logger = logging.getLogger(__name__)

TARGET_RATE = 2000
TARGET_DURATION = 1.125
CLASSES = ("AS", "MR", "MS", "MVP", "N")

KAISER_BETA = 8.6
TAPS_PER_PHASE = 64


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: str | None = None
    source_id: str = ""
    silent: bool = False

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise DataError(f"sample rate must be > 0, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def replace(self, **changes) -> "AudioClip":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# WAV

_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def decode_wav(data: bytes, source_id: str = "", label: str | None = None) -> AudioClip:
    """Decode a RIFF/WAVE byte string (PCM16 or float32; channels averaged)."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{source_id or 'input'}: not a RIFF/WAVE container")
    pos, fmt, payload = 12, None, None
    while pos + 8 <= len(data):
        chunk_id, size = struct.unpack("<4sI", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise WavFormatError("fmt chunk too short")
            tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", body[:16])
            if tag == _EXTENSIBLE and len(body) >= 26:
                (tag,) = struct.unpack("<H", body[24:26])
            fmt = (tag, channels, rate, block_align, bits)
        elif chunk_id == b"data":
            payload = body
            if len(body) < size:
                logger.warning("%s: data chunk truncated (%d of %d bytes)", source_id, len(body), size)
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavFormatError("missing fmt chunk")
    if payload is None:
        raise WavFormatError("missing data chunk")
    tag, channels, rate, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise WavFormatError(f"bad header: channels={channels} rate={rate}")
    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedCodecError(f"unsupported WAV codec: format tag {tag}, {bits} bits")
    frame = dtype.itemsize * channels
    n_frames = len(payload) // frame
    if n_frames == 0:
        raise EmptyAudioError(f"{source_id or 'input'}: zero-length audio data")
    raw = np.frombuffer(payload[:n_frames * frame], dtype=dtype).astype(np.float64) * scale
    samples = raw.reshape(n_frames, channels).mean(axis=1) if channels > 1 else raw
    return AudioClip(samples, rate, label, source_id)


def encode_wav(samples: np.ndarray, sample_rate: int, channels: int = 1) -> bytes:
    """PCM16 little-endian WAV. ``samples`` is ``(n,)`` or ``(n, channels)`` in [-1, 1]."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None].repeat(channels, axis=1) if channels > 1 else x[:, None]
    channels = x.shape[1]
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    payload = pcm.tobytes()
    header = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(payload), b"WAVE", b"fmt ", 16,
                         _PCM, channels, sample_rate, sample_rate * channels * 2, channels * 2, 16,
                         b"data", len(payload))
    return header + payload


def read_wav(path, label: str | None = None) -> AudioClip:
    return decode_wav(Path(path).read_bytes(), source_id=str(path), label=label)


def write_wav(path, clip: AudioClip) -> None:
    Path(path).write_bytes(encode_wav(clip.samples, clip.sample_rate))


# --------------------------------------------------------------------------
# preprocessing

def resample_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc low-pass for an ``up/down`` polyphase resampler.

    The filter spans ``64 * max(up, down) + 1`` taps, i.e. 64 taps in each
    polyphase branch, with cutoff at the lower of the two Nyquist rates.
    """
    factor = max(up, down)
    return sps.firwin(TAPS_PER_PHASE * factor + 1, 1.0 / factor, window=("kaiser", KAISER_BETA))


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Rational-ratio polyphase resampling; output length ``round(n * target / source)``."""
    if target_rate <= 0:
        raise DataError(f"target rate must be > 0, got {target_rate}")
    n = len(clip.samples)
    if n == 0:
        raise EmptyAudioError("cannot resample an empty clip")
    if target_rate == clip.sample_rate:
        return clip
    g = math.gcd(int(target_rate), int(clip.sample_rate))
    up, down = target_rate // g, clip.sample_rate // g
    y = sps.resample_poly(clip.samples, up, down, window=resample_filter(up, down))
    n_out = int(round(n * target_rate / clip.sample_rate))
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)))
    return clip.replace(samples=y[:n_out], sample_rate=int(target_rate))


def truncate(clip: AudioClip, duration: float) -> AudioClip:
    """Keep the first ``floor(duration * rate)`` samples."""
    n = int(math.floor(duration * clip.sample_rate + 1e-9))
    if len(clip.samples) < n:
        raise ClipTooShortError(
            f"clip shorter than target duration: {len(clip.samples)} samples < {n} "
            f"({clip.source_id or 'clip'})")
    return clip.replace(samples=clip.samples[:n])


def normalize_amplitude(clip: AudioClip) -> AudioClip:
    """Peak normalisation to max |x| = 1.

    The quotient is snapped to float32 precision. Without the snap, ``x`` and
    ``a * x`` would differ in the last bit after division for most gains.
    All-zero clips come back unchanged with ``silent=True``.
    """
    x = np.asarray(clip.samples, dtype=np.float64)
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak == 0.0:
        warnings.warn(f"all-zero clip {clip.source_id!r} left unnormalised", stacklevel=2)
        return clip.replace(silent=True)
    y = (x / peak).astype(np.float32).astype(np.float64)
    return clip.replace(samples=y, silent=False)


def preprocess(clip: AudioClip, rate: int = TARGET_RATE, duration: float = TARGET_DURATION) -> AudioClip:
    """resample -> truncate -> normalise."""
    return normalize_amplitude(truncate(resample(clip, rate), duration))


# --------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    clips: list[AudioClip]
    class_names: list[str]
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self.class_names = list(self.class_names)
        if self.class_names != sorted(self.class_names):
            raise DataError("class names must be sorted")
        known = set(self.class_names)
        for c in self.clips:
            if c.label not in known:
                raise DataError(f"clip {c.source_id!r} has unknown label {c.label!r}")

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def counts(self) -> dict[str, int]:
        out = {name: 0 for name in self.class_names}
        for c in self.clips:
            out[c.label] += 1
        return out

    @property
    def labels(self) -> np.ndarray:
        index = {name: i for i, name in enumerate(self.class_names)}
        return np.array([index[c.label] for c in self.clips], dtype=np.int64)

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.clips:
            raise DataError("empty dataset")
        lengths = {len(c.samples) for c in self.clips}
        if len(lengths) != 1:
            raise DataError(f"clips have differing lengths {sorted(lengths)}; preprocess first")
        return np.stack([c.samples for c in self.clips]), self.labels

    def subset(self, indices) -> "Dataset":
        return Dataset([self.clips[int(i)] for i in indices], self.class_names)


def load_dataset(root, expected_classes=None, rate: int = TARGET_RATE,
                 duration: float = TARGET_DURATION) -> Dataset:
    """Load ``<root>/<class>/*.wav``; every clip is preprocessed.

    Unreadable or too-short files are skipped with a warning and recorded in
    ``Dataset.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    dirs = sorted(p.name for p in root.iterdir() if p.is_dir())
    if expected_classes is not None:
        expected = sorted(expected_classes)
        unknown = sorted(set(dirs) - set(expected))
        if unknown:
            raise DataError(f"unexpected class directories: {', '.join(unknown)}")
        names = expected
    else:
        names = dirs
    if not names:
        raise DataError(f"no class directories under {root}")
    clips, skipped = [], []
    for name in names:
        files = sorted(p for p in (root / name).glob("*") if p.suffix.lower() == ".wav") \
            if (root / name).is_dir() else []
        if not files:
            warnings.warn(f"class {name!r} has no .wav files", stacklevel=2)
        for path in files:
            try:
                clips.append(preprocess(read_wav(path, label=name), rate, duration))
            except (DataError, OSError) as exc:
                warnings.warn(f"skipping {path}: {exc}", stacklevel=2)
                skipped.append((str(path), str(exc)))
    return Dataset(clips, names, skipped)


# --------------------------------------------------------------------------
# synthetic phonocardiograms

@dataclass(frozen=True)
class SynthEvent:
    kind: str  # S1, S2, systole, diastole, murmur, click
    start: float
    end: float


def _burst(n: int, fs: float, freq: float, start: float, dur: float, amp: float, rng) -> np.ndarray:
    out = np.zeros(n)
    i0 = int(round(start * fs))
    m = int(round(dur * fs))
    i1 = min(i0 + m, n)
    if i0 >= n or i1 <= i0:
        return out
    t = np.arange(m) / fs
    env = np.sin(np.pi * np.arange(m) / m) ** 2
    phase = rng.uniform(0, 2 * np.pi)
    out[i0:i1] = (amp * env * np.sin(2 * np.pi * freq * t + phase))[:i1 - i0]
    return out


def _band_noise(n: int, fs: float, lo: float, hi: float, rng) -> np.ndarray:
    sos = sps.butter(4, [lo, hi], btype="bandpass", fs=fs, output="sos")
    x = sps.sosfiltfilt(sos, rng.standard_normal(n))
    return x / (np.sqrt(np.mean(x * x)) + 1e-12)


def _envelope(n: int, fs: float, start: float, end: float, shape: str) -> np.ndarray:
    env = np.zeros(n)
    i0, i1 = max(int(round(start * fs)), 0), min(int(round(end * fs)), n)
    if i1 <= i0:
        return env
    u = np.linspace(0.0, 1.0, i1 - i0)
    if shape == "diamond":
        e = 1.0 - np.abs(2.0 * u - 1.0)
    elif shape == "crescendo":
        e = u
    elif shape == "decrescendo":
        e = 1.0 - 0.7 * u
    else:
        e = np.ones_like(u)
    taper = np.minimum(1.0, np.minimum(u, 1.0 - u) * (i1 - i0) / max(0.01 * fs, 1.0))
    env[i0:i1] = e * taper
    return env


def synth_pcg_events(class_id: str, seed: int, rate: int = 8000, duration: float = 3.0):
    """Generate a synthetic PCG clip plus its event timeline (seconds)."""
    if class_id not in CLASSES:
        raise DataError(f"unknown class {class_id!r}; expected one of {CLASSES}")
    if rate <= 0 or duration <= 0:
        raise DataError("rate and duration must be positive")
    rng = np.random.default_rng([int(seed), CLASSES.index(class_id)])
    fs = float(rate)
    n = int(round(duration * fs))
    period = rng.uniform(0.6, 1.0)
    systole = rng.uniform(0.26, 0.34) * min(1.0, period / 0.8) + 0.04
    f1, f2 = rng.uniform(30, 45), rng.uniform(50, 70)
    d1, d2 = 0.10, 0.08
    onset = rng.uniform(0.02, 0.15)

    heart = np.zeros(n)
    murmur = np.zeros(n)
    events: list[SynthEvent] = []
    hi_band = _band_noise(n, fs, 100, 250, rng)
    mr_band = _band_noise(n, fs, 250, 450, rng)
    low_band = _band_noise(n, fs, 25, 90, rng)
    mvp_band = _band_noise(n, fs, 150, 350, rng)
    murmur_amp = rng.uniform(0.35, 0.55)

    t = onset
    while t < duration:
        s1_end = t + d1
        s2 = t + systole
        s2_end = s2 + d2
        nxt = t + period
        heart += _burst(n, fs, f1, t, d1, rng.uniform(0.9, 1.1), rng)
        heart += _burst(n, fs, f2, s2, d2, rng.uniform(0.6, 0.8), rng)
        events += [SynthEvent("S1", t, s1_end), SynthEvent("systole", s1_end, s2),
                   SynthEvent("S2", s2, s2_end), SynthEvent("diastole", s2_end, nxt)]
        if class_id == "AS":
            murmur += murmur_amp * hi_band * _envelope(n, fs, s1_end + 0.01, s2 - 0.01, "diamond")
            events.append(SynthEvent("murmur", s1_end + 0.01, s2 - 0.01))
        elif class_id == "MR":
            murmur += murmur_amp * mr_band * _envelope(n, fs, s1_end, s2, "plateau")
            events.append(SynthEvent("murmur", s1_end, s2))
        elif class_id == "MS":
            start = s2_end + 0.06
            murmur += 1.3 * murmur_amp * low_band * _envelope(n, fs, start, nxt - 0.01, "decrescendo")
            events.append(SynthEvent("murmur", start, nxt - 0.01))
        elif class_id == "MVP":
            click = s1_end + 0.45 * (s2 - s1_end)
            murmur += _burst(n, fs, rng.uniform(120, 180), click, 0.015, 0.8, rng)
            murmur += murmur_amp * mvp_band * _envelope(n, fs, click + 0.02, s2, "crescendo")
            events += [SynthEvent("click", click, click + 0.015),
                       SynthEvent("murmur", click + 0.02, s2)]
        t = nxt

    clean = heart + murmur
    power = np.mean(clean * clean)
    noisy = clean + rng.standard_normal(n) * np.sqrt(power / 100.0)  # 20 dB SNR
    gain = rng.uniform(0.3, 0.9) / np.max(np.abs(noisy))
    clip = AudioClip(noisy * gain, int(rate), class_id, f"synth:{class_id}:{seed}")
    return clip, [e for e in events if e.start < duration]


def synth_pcg(class_id: str, seed: int, rate: int = 8000, duration: float = 3.0) -> AudioClip:
    """Deterministic synthetic PCG for ``(class_id, seed)``.

    S1/S2 tone bursts at a random cardiac period in [0.6, 1.0] s plus a class
    signature: AS diamond systolic noise, MR flat holosystolic noise, MS
    diastolic low-frequency rumble, MVP mid-systolic click and late systolic
    murmur, N none. Gaussian noise at 20 dB SNR.
    """
    return synth_pcg_events(class_id, seed, rate, duration)[0]


def synth_dataset(per_class: int, seed: int = 0, rate: int = 8000, duration: float = 3.0,
                  classes=CLASSES, preprocess_to: int | None = TARGET_RATE,
                  target_duration: float = TARGET_DURATION) -> Dataset:
    """In-memory synthetic dataset, preprocessed like files from disk."""
    clips = []
    for name in sorted(classes):
        for i in range(per_class):
            clip = synth_pcg(name, seed * 100_003 + i, rate, duration)
            if preprocess_to:
                # same route as a PCM16 file on disk
                clip = decode_wav(encode_wav(clip.samples, clip.sample_rate), clip.source_id, name)
                clip = preprocess(clip, preprocess_to, target_duration)
            clips.append(clip)
    return Dataset(clips, sorted(classes))
