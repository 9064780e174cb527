"""Audio I/O, log-mel spectrograms, pitch contours and random resampling."""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field
from math import gcd
from typing import Optional, Tuple

import librosa
import numpy as np
import scipy.io.wavfile
import scipy.signal

SAMPLE_RATE = 16000
MAX_FRAMES = 192


class SignalError(Exception):
    pass


class AudioFileNotFound(SignalError, FileNotFoundError):
    pass


class UnsupportedAudioError(SignalError):
    pass


class EmptyAudioError(SignalError):
    pass


class WaveformTooShort(SignalError):
    pass


class NonFiniteSpectrogram(SignalError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate: int = SAMPLE_RATE
    win_ms: float = 64.0
    hop_ms: float = 16.0
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    f0_min: float = 60.0
    f0_max: float = 400.0
    voicing_threshold: float = 0.45
    silence_db: float = -50.0
    pitch_std_floor: float = 0.05  # log-F0 spread below ~1 semitone counts as flat
    unvoiced_fill: float = 0.0
    griffin_lim_iters: int = 48

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def log_floor_value(self) -> float:
        return float(np.log(self.log_floor))

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            return 0
        return (n_samples - self.win_length) // self.hop_length + 1


@dataclass
class Spectrogram:
    """Time-major ``T x B`` log-mel matrix."""

    frames: np.ndarray
    config: SpectrogramConfig = field(default_factory=SpectrogramConfig)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValueError("spectrogram frames must be a T x B matrix")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bands(self) -> int:
        return self.frames.shape[1]


@dataclass
class PitchContour:
    f0: np.ndarray
    voiced: np.ndarray

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.f0.shape != self.voiced.shape:
            raise ValueError("f0 and voiced mask must have equal length")

    def __len__(self):
        return len(self.f0)

    def as_features(self) -> np.ndarray:
        """``T x 2`` matrix of (normalized log-F0, voicing flag)."""
        return np.stack([self.f0, self.voiced.astype(np.float64)], axis=1)


@dataclass(frozen=True)
class ResampleSpec:
    segment_len_range: Tuple[int, int] = (19, 32)
    rate_range: Tuple[float, float] = (0.5, 1.5)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.segment_len_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad segment_len_range {self.segment_len_range}")
        rlo, rhi = self.rate_range
        if not 0 < rlo <= rhi:
            raise ValueError(f"bad rate_range {self.rate_range}")

    def with_seed(self, seed: int) -> "ResampleSpec":
        return ResampleSpec(tuple(self.segment_len_range), tuple(self.rate_range), int(seed))


# --------------------------------------------------------------------------
# audio I/O
# --------------------------------------------------------------------------

def _pcm_to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype in (np.float32, np.float64):
        return np.clip(data.astype(np.float64), -1.0, 1.0)
    raise UnsupportedAudioError(f"unsupported sample type {data.dtype}")


def resample(samples: np.ndarray, orig_sr: int, target_sr: int = SAMPLE_RATE) -> np.ndarray:
    if orig_sr == target_sr:
        return np.asarray(samples, dtype=np.float64)
    g = gcd(int(orig_sr), int(target_sr))
    return scipy.signal.resample_poly(samples, target_sr // g, orig_sr // g)


def load_audio(path, target_sr: int = SAMPLE_RATE) -> Waveform:
    """Read a PCM WAV file as a mono waveform at ``target_sr``."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise AudioFileNotFound(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.io.wavfile.WavFileWarning)
            sr, data = scipy.io.wavfile.read(path)
    except Exception as exc:  # the reader raises several unrelated types on malformed files
        raise UnsupportedAudioError(f"{path}: {exc}") from exc
    x = _pcm_to_float(np.asarray(data))
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise EmptyAudioError(path)
    x = np.clip(resample(x, sr, target_sr), -1.0, 1.0)
    return Waveform(x, target_sr)


def save_audio(path, w: Waveform) -> None:
    """Write 16-bit PCM. Output bytes depend only on the samples."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    scipy.io.wavfile.write(os.fspath(path), int(w.sample_rate), pcm)


# --------------------------------------------------------------------------
# spectrograms
# --------------------------------------------------------------------------

def mel_basis(config: SpectrogramConfig) -> np.ndarray:
    return librosa.filters.mel(
        sr=config.sample_rate, n_fft=config.win_length, n_mels=config.n_mels,
        fmin=config.fmin, fmax=config.fmax)


def _magnitude(samples: np.ndarray, config: SpectrogramConfig) -> np.ndarray:
    return np.abs(librosa.stft(
        samples, n_fft=config.win_length, hop_length=config.hop_length,
        win_length=config.win_length, window="hann", center=False))


def compute_spectrogram(w: Waveform, config: Optional[SpectrogramConfig] = None) -> Spectrogram:
    config = config or SpectrogramConfig()
    if len(w) == 0:
        raise EmptyAudioError("empty waveform")
    if len(w) < config.win_length:
        raise WaveformTooShort(f"{len(w)} samples < window of {config.win_length}")
    if w.sample_rate != config.sample_rate:
        w = Waveform(resample(w.samples, w.sample_rate, config.sample_rate), config.sample_rate)
    mel = mel_basis(config) @ _magnitude(w.samples, config)
    frames = np.log(np.maximum(mel, config.log_floor)).T
    return Spectrogram(frames, config)


def invert_spectrogram(s: Spectrogram, seed: int = 0) -> Waveform:
    """Griffin-Lim reconstruction of a log-mel spectrogram."""
    if not np.all(np.isfinite(s.frames)):
        raise NonFiniteSpectrogram("spectrogram contains non-finite entries")
    config = s.config
    mel = np.exp(s.frames.T)
    mel[s.frames.T <= config.log_floor_value] = 0.0
    mag = librosa.feature.inverse.mel_to_stft(
        mel, sr=config.sample_rate, n_fft=config.win_length, power=1.0,
        fmin=config.fmin, fmax=config.fmax)
    y = librosa.griffinlim(
        mag, n_iter=config.griffin_lim_iters, hop_length=config.hop_length,
        win_length=config.win_length, n_fft=config.win_length, window="hann",
        center=False, random_state=np.random.RandomState(seed))
    n = (s.n_frames - 1) * config.hop_length + config.win_length
    if len(y) < n:
        y = np.pad(y, (0, n - len(y)))
    return Waveform(np.clip(y[:n], -1.0, 1.0), config.sample_rate)


def log_spectral_distance(a: Spectrogram, b: Spectrogram) -> float:
    """Mean absolute log-mel difference over the common frame range."""
    t = min(a.n_frames, b.n_frames)
    return float(np.mean(np.abs(a.frames[:t] - b.frames[:t])))


def save_spectrogram(path, s: Spectrogram) -> None:
    """Store as ``.npz`` with ``frames`` and a JSON ``header`` (shape + config)."""
    header = {"format": "cycleflow-spectrogram", "version": 1,
              "shape": list(s.frames.shape), "config": asdict(s.config)}
    with open(os.fspath(path), "wb") as fh:
        np.savez(fh, frames=s.frames, header=np.array(json.dumps(header)))


def load_spectrogram(path) -> Spectrogram:
    with np.load(os.fspath(path)) as data:
        header = json.loads(str(data["header"]))
        frames = data["frames"]
    if header.get("format") != "cycleflow-spectrogram" or list(frames.shape) != header["shape"]:
        raise SignalError(f"{path}: not a valid spectrogram container")
    return Spectrogram(frames, SpectrogramConfig(**header["config"]))


# --------------------------------------------------------------------------
# pitch
# --------------------------------------------------------------------------

def frame_signal(samples: np.ndarray, config: SpectrogramConfig) -> np.ndarray:
    n = config.n_frames(len(samples))
    win, hop = config.win_length, config.hop_length
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return samples[idx]


def _peak_lag(r: np.ndarray, lo: int, hi: int) -> Tuple[float, float]:
    seg = r[lo:hi + 1]
    is_peak = np.zeros_like(seg, dtype=bool)
    is_peak[1:-1] = (seg[1:-1] >= seg[:-2]) & (seg[1:-1] > seg[2:])
    if not is_peak.any():
        return 0.0, 0.0
    best = seg[is_peak].max()
    # smallest lag close to the best peak avoids octave-down errors
    cand = np.flatnonzero(is_peak & (seg >= 0.95 * best))[0]
    i = lo + cand
    a, b, c = r[i - 1], r[i], r[i + 1]
    denom = a - 2 * b + c
    shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
    return i + float(np.clip(shift, -0.5, 0.5)), float(b)


def extract_f0_hz(w: Waveform, config: Optional[SpectrogramConfig] = None):
    """Per-frame F0 in Hz (0 where unvoiced) and the voiced mask.

    Uses the window-corrected normalized autocorrelation, frames aligned
    with :func:`compute_spectrogram`.
    """
    config = config or SpectrogramConfig()
    if len(w) == 0:
        raise EmptyAudioError("empty waveform")
    if len(w) < config.win_length:
        raise WaveformTooShort(f"{len(w)} samples < window of {config.win_length}")
    x = w.samples
    if w.sample_rate != config.sample_rate:
        x = resample(x, w.sample_rate, config.sample_rate)
    frames = frame_signal(x, config)
    frames = frames - frames.mean(axis=1, keepdims=True)
    win = np.hanning(config.win_length)
    nfft = 2 * config.win_length
    r_w = np.fft.irfft(np.abs(np.fft.rfft(win, nfft)) ** 2)[:config.win_length]
    spec = np.fft.rfft(frames * win, nfft, axis=1)
    r_x = np.fft.irfft(np.abs(spec) ** 2, axis=1)[:, :config.win_length]

    lo = max(2, int(np.floor(config.sample_rate / config.f0_max)))
    hi = min(config.win_length // 2, int(np.ceil(config.sample_rate / config.f0_min)))
    global_peak = np.max(np.abs(x)) if len(x) else 0.0
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    level_db = 20 * np.log10(np.maximum(rms, 1e-12) / max(global_peak, 1e-12))

    f0 = np.zeros(len(frames))
    voiced = np.zeros(len(frames), dtype=bool)
    for t in range(len(frames)):
        if r_x[t, 0] <= 0 or level_db[t] < config.silence_db:
            continue
        r = (r_x[t] / r_x[t, 0]) / (r_w / r_w[0])
        lag, strength = _peak_lag(r, lo, hi)
        if lag > 0 and strength >= config.voicing_threshold:
            f0[t] = config.sample_rate / lag
            voiced[t] = True
    return f0, voiced


def normalize_pitch(f0_hz: np.ndarray, voiced: np.ndarray,
                    config: Optional[SpectrogramConfig] = None) -> PitchContour:
    config = config or SpectrogramConfig()
    out = np.full(len(f0_hz), config.unvoiced_fill, dtype=np.float64)
    if voiced.any():
        lf = np.log(f0_hz[voiced])
        out[voiced] = (lf - lf.mean()) / max(lf.std(), config.pitch_std_floor)
    return PitchContour(out, voiced)


def extract_pitch(w: Waveform, config: Optional[SpectrogramConfig] = None) -> PitchContour:
    """Normalized log-F0 contour, frame-aligned with the spectrogram.

    Voiced frames are z-normalized per utterance (the std is floored at
    ``pitch_std_floor`` so a flat contour stays near zero); unvoiced frames
    carry ``unvoiced_fill``.
    """
    config = config or SpectrogramConfig()
    f0, voiced = extract_f0_hz(w, config)
    return normalize_pitch(f0, voiced, config)


# --------------------------------------------------------------------------
# random resampling
# --------------------------------------------------------------------------

def resample_positions(n_frames: int, spec: ResampleSpec,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Fractional source positions of every output frame.

    The input is cut into contiguous segments with lengths drawn from
    ``segment_len_range``; each segment is linearly stretched by its own rate
    from ``rate_range``. Segment boundaries in the output are rounded
    cumulatively, so the total length stays within one frame of
    ``sum(len_i * rate_i)``.
    """
    if n_frames < 1:
        raise ValueError("random_resample needs at least one frame")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    lo, hi = spec.segment_len_range
    starts, lengths = [], []
    pos = 0
    while pos < n_frames:
        seg = int(rng.integers(lo, hi + 1))
        seg = min(seg, n_frames - pos)
        starts.append(pos)
        lengths.append(seg)
        pos += seg
    rates = rng.uniform(spec.rate_range[0], spec.rate_range[1], size=len(lengths))
    lengths = np.asarray(lengths)
    bounds = np.concatenate([[0], np.floor(np.cumsum(lengths * rates) + 0.5).astype(int)])
    out_lens = np.diff(bounds)

    pieces = []
    for start, seg, n_out in zip(starts, lengths, out_lens):
        if n_out <= 0:
            continue
        if n_out == 1:
            pieces.append(np.array([start + (seg - 1) / 2.0]))
        else:
            pieces.append(start + np.linspace(0.0, seg - 1, n_out))
    if not pieces:
        return np.array([(n_frames - 1) / 2.0])
    return np.concatenate(pieces)


def interpolation_matrix(positions: np.ndarray, n_frames: int) -> np.ndarray:
    """``len(positions) x n_frames`` linear-interpolation weights."""
    positions = np.clip(np.asarray(positions, dtype=np.float64), 0, n_frames - 1)
    left = np.floor(positions).astype(int)
    right = np.minimum(left + 1, n_frames - 1)
    frac = positions - left
    m = np.zeros((len(positions), n_frames))
    rows = np.arange(len(positions))
    np.add.at(m, (rows, left), 1.0 - frac)
    np.add.at(m, (rows, right), frac)
    return m


def apply_positions(seq: np.ndarray, positions: np.ndarray) -> np.ndarray:
    seq = np.asarray(seq)
    n = seq.shape[0]
    positions = np.clip(positions, 0, n - 1)
    left = np.floor(positions).astype(int)
    right = np.minimum(left + 1, n - 1)
    frac = (positions - left).reshape((-1,) + (1,) * (seq.ndim - 1))
    out = seq[left] * (1.0 - frac) + seq[right] * frac
    # exact copies where the position is integral
    exact = frac.reshape(-1) == 0
    out[exact] = seq[left[exact]]
    return out


def random_resample(seq: np.ndarray, spec: ResampleSpec) -> np.ndarray:
    """Segment-wise random time stretch of a time-major matrix."""
    seq = np.asarray(seq)
    if seq.ndim == 0 or seq.shape[0] < 1:
        raise ValueError("random_resample needs at least one frame")
    return apply_positions(seq, resample_positions(seq.shape[0], spec))
