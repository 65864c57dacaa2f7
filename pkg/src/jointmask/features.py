"""Audio I/O, log-mel extraction, feature normalization and preview inversion."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly


class FeatureError(ValueError):
    """Raised for invalid audio or feature inputs."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise FeatureError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise FeatureError("audio contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 24000
    win_ms: float = 50.0
    hop_ms: float = 12.5
    n_mels: int = 80
    window: str = "hann"
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.win_ms < self.hop_ms:
            raise FeatureError("win_ms must be >= hop_ms")
        if self.n_mels <= 0:
            raise FeatureError("n_mels must be positive")
        hop = self.sample_rate * self.hop_ms / 1000
        if abs(hop - round(hop)) > 1e-9:
            raise FeatureError(f"hop of {self.hop_ms} ms is not an integer number of samples")

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def win_samples(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000))

    @property
    def n_fft(self) -> int:
        # smallest power of two covering the window
        return 1 << (self.win_samples - 1).bit_length()

    @property
    def frames_per_second(self) -> float:
        return self.sample_rate / self.hop_samples

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(**d)


@dataclass(frozen=True)
class LogMelSpectrogram:
    frames: np.ndarray
    config: FeatureConfig = field(default_factory=FeatureConfig)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def __len__(self):
        return self.num_frames


@dataclass(frozen=True)
class FeatureStats:
    """Per-bin mean and standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise FeatureError("mean and std must be 1-D arrays of equal length")
        if np.any(self.std <= 0):
            raise FeatureError("stddev must be positive in every bin")

    @classmethod
    def identity(cls, n_mels: int) -> "FeatureStats":
        return cls(np.zeros(n_mels), np.ones(n_mels))


# ---------------------------------------------------------------- audio I/O


def load_audio(path, target_sr: int = 24000) -> AudioClip:
    """Read a mono WAV file and resample it to ``target_sr``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"audio file not found: {path}")
    if path.stat().st_size == 0:
        raise FeatureError(f"zero-length audio: {path}")
    try:
        sr, data = wavfile.read(path)
    except ValueError as exc:
        raise FeatureError(f"corrupt or unreadable WAV header in {path}: {exc}") from exc
    if data.ndim != 1:
        raise FeatureError(f"expected mono audio, got {data.shape[1]} channels in {path}")
    if data.size == 0:
        raise FeatureError(f"zero-length audio: {path}")
    samples = _to_float(data)
    if sr != target_sr:
        g = math.gcd(sr, target_sr)
        samples = resample_poly(samples, target_sr // g, sr // g)
    return AudioClip(samples, target_sr)


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    return data.astype(np.float64)


def save_audio(path, clip: AudioClip) -> None:
    pcm = np.clip(clip.samples, -1.0, 1.0)
    wavfile.write(path, clip.sample_rate, (pcm * 32767).astype(np.int16))


# ----------------------------------------------------------------- mel scale


def hz_to_mel(freq):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    lin = freq / f_sp
    log = min_log_mel + np.log(np.maximum(freq, min_log_hz) / min_log_hz) / logstep
    return np.where(freq >= min_log_hz, log, lin)


def mel_to_hz(mel):
    mel = np.asarray(mel, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    lin = mel * f_sp
    log = min_log_hz * np.exp(logstep * (mel - min_log_mel))
    return np.where(mel >= min_log_mel, log, lin)


def mel_center_frequencies(cfg: FeatureConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular area-normalized filters, shape (n_mels, n_fft // 2 + 1)."""
    fft_freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


# ------------------------------------------------------------------- framing


def num_frames_for(num_samples: int, hop_samples: int) -> int:
    return 1 + num_samples // hop_samples


def _padded_window(cfg: FeatureConfig) -> np.ndarray:
    win = get_window(cfg.window, cfg.win_samples, fftbins=True)
    left = (cfg.n_fft - cfg.win_samples) // 2
    return np.pad(win, (left, cfg.n_fft - cfg.win_samples - left))


def frame_signal(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    """Centered, reflect-padded frames as a read-only strided view."""
    pad = n_fft // 2
    padded = np.pad(samples, pad, mode="reflect" if len(samples) > 1 else "edge")
    n = 1 + (len(padded) - n_fft) // hop
    return np.lib.stride_tricks.as_strided(
        padded,
        shape=(n, n_fft),
        strides=(padded.strides[0] * hop, padded.strides[0]),
        writeable=False,
    )


def stft(samples: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    frames = frame_signal(np.asarray(samples, dtype=np.float64), cfg.n_fft, cfg.hop_samples)
    return np.fft.rfft(frames * _padded_window(cfg), axis=1)


def istft(spec: np.ndarray, cfg: FeatureConfig, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    win = _padded_window(cfg)
    hop, n_fft = cfg.hop_samples, cfg.n_fft
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * win
    total = n_fft + hop * (len(spec) - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i, frame in enumerate(frames):
        out[i * hop : i * hop + n_fft] += frame
        norm[i * hop : i * hop + n_fft] += win**2
    out /= np.where(norm > 1e-8, norm, 1.0)
    pad = n_fft // 2
    out = out[pad : pad + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


# ------------------------------------------------------------------ features


def compute_log_mel(clip: AudioClip, cfg: FeatureConfig = FeatureConfig()) -> LogMelSpectrogram:
    """Log-mel power spectrogram with centered framing.

    Produces ``1 + len(samples) // hop_samples`` frames; every value is
    ``log(max(mel_energy, cfg.log_floor))``.
    """
    if clip.sample_rate != cfg.sample_rate:
        raise FeatureError(
            f"sample-rate mismatch: clip is {clip.sample_rate} Hz, config expects {cfg.sample_rate} Hz"
        )
    if len(clip.samples) == 0:
        raise FeatureError("cannot featurize an empty clip")
    power = np.abs(stft(clip.samples, cfg)) ** 2
    mel = power @ mel_filterbank(cfg).T
    return LogMelSpectrogram(np.log(np.maximum(mel, cfg.log_floor)), cfg)


def compute_stats(specs) -> FeatureStats:
    """Per-bin mean/std pooled over every frame of ``specs``."""
    stacked = np.concatenate([s.frames if isinstance(s, LogMelSpectrogram) else s for s in specs])
    std = stacked.std(axis=0)
    return FeatureStats(stacked.mean(axis=0), np.maximum(std, 1e-5))


def normalize_features(spec: LogMelSpectrogram, stats: FeatureStats) -> LogMelSpectrogram:
    _check_stats(spec, stats)
    return LogMelSpectrogram((spec.frames - stats.mean) / stats.std, spec.config)


def denormalize_features(spec: LogMelSpectrogram, stats: FeatureStats) -> LogMelSpectrogram:
    _check_stats(spec, stats)
    return LogMelSpectrogram(spec.frames * stats.std + stats.mean, spec.config)


def _check_stats(spec, stats):
    if spec.frames.shape[1] != len(stats.mean):
        raise FeatureError(
            f"dimension mismatch: spectrogram has {spec.frames.shape[1]} bins, stats have {len(stats.mean)}"
        )


def invert_mel_preview(spec: LogMelSpectrogram, iterations: int = 60, seed: int = 0) -> AudioClip:
    """Rough waveform from a log-mel spectrogram via Griffin-Lim.

    Mel power is mapped back to linear magnitude with the filterbank
    pseudo-inverse, then phase is estimated iteratively. Intended for
    listening previews only.
    """
    if iterations < 1:
        raise FeatureError("iterations must be >= 1")
    if not np.all(np.isfinite(spec.frames)):
        raise FeatureError("spectrogram contains non-finite values")
    cfg = spec.config
    length = (spec.num_frames - 1) * cfg.hop_samples
    mel_power = np.exp(spec.frames)
    lin_power = np.maximum(mel_power @ np.linalg.pinv(mel_filterbank(cfg)).T, 0.0)
    magnitude = np.sqrt(lin_power)

    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(magnitude.shape))
    wav = istft(magnitude * angles, cfg, length)
    for _ in range(iterations):
        rebuilt = stft(wav, cfg)
        angles = np.exp(1j * np.angle(rebuilt))
        wav = istft(magnitude * angles, cfg, length)
    return AudioClip(np.clip(wav, -1.0, 1.0), cfg.sample_rate)


# ------------------------------------------------------------- feature cache


def save_features(path, spec: LogMelSpectrogram) -> None:
    header = json.dumps(spec.config.to_dict(), sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, frames=spec.frames, header=np.array(header))


def load_features(path) -> LogMelSpectrogram:
    with np.load(path, allow_pickle=False) as data:
        cfg = FeatureConfig.from_dict(json.loads(str(data["header"])))
        return LogMelSpectrogram(data["frames"], cfg)


def save_stats(path, stats: FeatureStats) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, mean=stats.mean, std=stats.std)


def load_stats(path) -> FeatureStats:
    with np.load(path) as data:
        return FeatureStats(data["mean"], data["std"])
