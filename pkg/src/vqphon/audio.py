"""Waveform loading, log-mel analysis, Griffin-Lim resynthesis, and the
binary feature-file format.

All analysis parameters live in FrameParams so features are
bit-reproducible: periodic Hann window, end truncation (no padding),
HTK mel scale, log floor clamp.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class AudioError(Exception):
    """Base for audio and feature-file failures."""


class WavFormatError(AudioError):
    """Malformed RIFF/WAVE container."""


class UnsupportedWavError(AudioError):
    """Well-formed WAV using an encoding or layout we do not read."""


class FeatureFormatError(AudioError):
    """Malformed or incompatible feature file."""


FEATURE_MAGIC = b"VQPH"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class FrameParams:
    """STFT/mel analysis parameters; defaults suit 24 kHz speech."""

    sample_rate: int = 24000
    fft_size: int = 1024
    window: int = 1024
    hop: int = 256
    mel_bins: int = 80
    fmin: float = 80.0
    fmax: float = 11000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.window > self.fft_size:
            raise ValueError(f"window {self.window} exceeds fft_size {self.fft_size}")
        if self.hop > self.window:
            raise ValueError(f"hop {self.hop} exceeds window {self.window}")
        if not (0 <= self.fmin < self.fmax):
            raise ValueError(f"need 0 <= fmin < fmax, got {self.fmin}, {self.fmax}")
        if self.fmax > self.sample_rate / 2:
            raise ValueError(
                f"fmax {self.fmax} exceeds Nyquist {self.sample_rate / 2}"
            )
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")


@dataclass
class AudioBuffer:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # T x mel_bins, log energies
    params: FrameParams
    utterance_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != self.params.mel_bins:
            raise ValueError(
                f"frames must be T x {self.params.mel_bins}, got {self.frames.shape}"
            )

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


# -- WAV I/O ------------------------------------------------------------------


def load_wav(path) -> AudioBuffer:
    """Read a mono PCM16 or float32 WAV, scaling samples into [-1, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    if len(fmt) < 16:
        raise WavFormatError(f"{path}: fmt chunk too short")
    audio_format, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if channels != 1:
        raise UnsupportedWavError(f"{path}: {channels} channels; only mono is supported")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
        samples = np.clip(samples, -1.0, 1.0)
    else:
        raise UnsupportedWavError(
            f"{path}: unsupported encoding (format {audio_format}, {bits}-bit)"
        )
    return AudioBuffer(samples=samples, sample_rate=rate)


def write_wav(path, buf: AudioBuffer) -> None:
    """Write mono PCM16; values are clipped then rounded to integers."""
    ints = np.clip(np.round(buf.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    with open(path, "wb") as fh:
        fh.write(b"RIFF")
        fh.write(struct.pack("<I", 36 + len(payload)))
        fh.write(b"WAVE")
        fh.write(b"fmt ")
        fh.write(struct.pack("<IHHIIHH", 16, 1, 1, buf.sample_rate,
                             buf.sample_rate * 2, 2, 16))
        fh.write(b"data")
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)


# -- STFT and mel -------------------------------------------------------------


def _hann(n: int) -> np.ndarray:
    # periodic form, the STFT convention
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(num_samples: int, p: FrameParams) -> int:
    if num_samples < p.window:
        return 0
    return 1 + (num_samples - p.window) // p.hop


def stft_power(buf: AudioBuffer, p: FrameParams) -> np.ndarray:
    """Power spectrogram, T x (fft_size/2 + 1); frames truncated at the end."""
    n = len(buf.samples)
    T = frame_count(n, p)
    if T == 0:
        raise AudioError(
            f"buffer of {n} samples is shorter than one window ({p.window})"
        )
    win = _hann(p.window)
    idx = np.arange(p.window)[None, :] + p.hop * np.arange(T)[:, None]
    frames = buf.samples[idx] * win[None, :]
    spec = np.fft.rfft(frames, n=p.fft_size, axis=1)
    return (spec.real ** 2 + spec.imag ** 2)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(p: FrameParams, sample_rate: int | None = None) -> np.ndarray:
    """Triangular filters on the HTK mel scale, mel_bins x (fft_size/2 + 1)."""
    sr = p.sample_rate if sample_rate is None else sample_rate
    if p.fmax > sr / 2:
        raise ValueError(f"fmax {p.fmax} exceeds Nyquist {sr / 2}")
    n_bins = p.fft_size // 2 + 1
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(p.fmin), hz_to_mel(p.fmax), p.mel_bins + 2))
    bin_hz = np.arange(n_bins) * sr / p.fft_size
    fb = np.zeros((p.mel_bins, n_bins))
    for j in range(p.mel_bins):
        lo, mid, hi = edges_hz[j], edges_hz[j + 1], edges_hz[j + 2]
        rising = (bin_hz - lo) / (mid - lo)
        falling = (hi - bin_hz) / (hi - mid)
        fb[j] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def filter_center_frequencies(p: FrameParams) -> np.ndarray:
    """Center (peak) frequency of each mel band in Hz."""
    edges = mel_to_hz(np.linspace(hz_to_mel(p.fmin), hz_to_mel(p.fmax), p.mel_bins + 2))
    return edges[1:-1]


def mel_spectrogram(buf: AudioBuffer, p: FrameParams, utterance_id: str = "") -> MelSpectrogram:
    """Log-mel features, T x mel_bins, floored at log(log_floor)."""
    if buf.sample_rate != p.sample_rate:
        raise AudioError(
            f"sample rate {buf.sample_rate} does not match analysis rate "
            f"{p.sample_rate}; resampling is not supported"
        )
    power = stft_power(buf, p)
    fb = build_mel_filterbank(p)
    energy = power @ fb.T
    frames = np.log(np.maximum(energy, p.log_floor))
    return MelSpectrogram(frames=frames, params=p, utterance_id=utterance_id)


# -- Griffin-Lim --------------------------------------------------------------


def _istft(spec: np.ndarray, p: FrameParams, num_samples: int) -> np.ndarray:
    """Window-weighted overlap-add inverse of the analysis transform."""
    win = _hann(p.window)
    frames = np.fft.irfft(spec, n=p.fft_size, axis=1)[:, :p.window]
    out = np.zeros(num_samples)
    norm = np.zeros(num_samples)
    for t in range(frames.shape[0]):
        start = t * p.hop
        stop = min(start + p.window, num_samples)
        out[start:stop] += (frames[t] * win)[:stop - start]
        norm[start:stop] += (win ** 2)[:stop - start]
    return out / np.maximum(norm, 1e-12)


def griffin_lim_invert(mel: MelSpectrogram, iterations: int = 60) -> AudioBuffer:
    """Lossy waveform estimate from log-mel features.

    Mel energies are mapped back to a linear spectrum with the
    filterbank pseudo-inverse, then the phase is recovered by iterative
    analysis/resynthesis projection. Zero initial phase keeps the output
    deterministic.
    """
    p = mel.params
    fb = build_mel_filterbank(p)
    # cells at the log floor are silence, not tiny energy; the pseudo-inverse
    # would otherwise amplify the floor into audible noise
    energy = np.maximum(np.exp(mel.frames) - p.log_floor, 0.0)
    linear_power = np.maximum(energy @ np.linalg.pinv(fb).T, 0.0)
    mag = np.sqrt(linear_power)
    T = mag.shape[0]
    num_samples = T * p.hop
    total = (T - 1) * p.hop + p.window
    spec = mag.astype(np.complex128)
    for _ in range(max(iterations, 0)):
        wave = _istft(spec, p, total)
        reana = np.fft.rfft(
            wave[np.arange(p.window)[None, :] + p.hop * np.arange(T)[:, None]]
            * _hann(p.window)[None, :],
            n=p.fft_size, axis=1,
        )
        phase = np.angle(reana)
        spec = mag * np.exp(1j * phase)
    wave = _istft(spec, p, total)
    return AudioBuffer(samples=np.clip(wave[:num_samples], -1.0, 1.0),
                       sample_rate=p.sample_rate)


# -- feature files ------------------------------------------------------------

_PARAMS_FMT = "<IIIII" + "ddd"  # sample_rate, fft, window, hop, mel_bins, fmin, fmax, log_floor


def save_features(path, mel: MelSpectrogram) -> None:
    p = mel.params
    uid = mel.utterance_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", FEATURE_VERSION))
        fh.write(struct.pack("<II", mel.num_frames, p.mel_bins))
        fh.write(struct.pack(_PARAMS_FMT, p.sample_rate, p.fft_size, p.window,
                             p.hop, p.mel_bins, p.fmin, p.fmax, p.log_floor))
        fh.write(struct.pack("<I", len(uid)))
        fh.write(uid)
        fh.write(np.ascontiguousarray(mel.frames, dtype="<f8").tobytes())


def load_features(path) -> MelSpectrogram:
    with open(path, "rb") as fh:
        raw = fh.read()

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise FeatureFormatError(f"{path}: truncated while reading {what}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4, "magic") != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: bad magic, not a feature file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FEATURE_VERSION:
        raise FeatureFormatError(
            f"{path}: version {version} not supported (expected {FEATURE_VERSION})"
        )
    T, bins = struct.unpack("<II", take(8, "dimensions"))
    vals = struct.unpack(_PARAMS_FMT, take(struct.calcsize(_PARAMS_FMT), "params"))
    params = FrameParams(sample_rate=vals[0], fft_size=vals[1], window=vals[2],
                         hop=vals[3], mel_bins=vals[4], fmin=vals[5], fmax=vals[6],
                         log_floor=vals[7])
    if bins != params.mel_bins:
        raise FeatureFormatError(f"{path}: bin count {bins} disagrees with params {params.mel_bins}")
    (uid_len,) = struct.unpack("<I", take(4, "id length"))
    uid = take(uid_len, "utterance id").decode("utf-8")
    payload = take(T * bins * 8, "frame payload")
    frames = np.frombuffer(payload, dtype="<f8").reshape(T, bins).copy()
    return MelSpectrogram(frames=frames, params=params, utterance_id=uid)
