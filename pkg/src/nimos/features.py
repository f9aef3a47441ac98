"""Log-mel spectrogram frontend.

All models consume fixed-shape inputs: 64 mel bands x ``t_fixed`` frames,
computed from 16 kHz mono audio with a 25 ms Hann window and 10 ms hop,
log-compressed with a 1e-10 floor.  The pipeline is deterministic: the same
clip always yields a bit-identical feature.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.signal import resample_poly

from nimos.corpus import AudioClip
from nimos.seeding import stable_hash

logger = logging.getLogger(__name__)

TARGET_RATE = 16000
N_MELS = 64
WIN_SAMPLES = 400   # 25 ms at 16 kHz
HOP_SAMPLES = 160   # 10 ms at 16 kHz
LOG_EPS = 1e-10

CACHE_VERSION = 1


class FeatureError(ValueError):
    """Invalid input to the feature frontend."""


def resample_to_16k(clip: AudioClip) -> AudioClip:
    """Band-limited polyphase resampling down to 16 kHz.

    Upsampling is refused: sources below 16 kHz carry no content above
    their own Nyquist and silently upsampling would hide that.
    """
    if clip.sample_rate < TARGET_RATE:
        raise FeatureError(
            f"source rate {clip.sample_rate} < {TARGET_RATE}; refusing to upsample")
    if clip.sample_rate == TARGET_RATE:
        return clip
    ratio = Fraction(TARGET_RATE, clip.sample_rate)
    out = resample_poly(clip.samples, ratio.numerator, ratio.denominator)
    return AudioClip(out, TARGET_RATE, clip.speaker_id, clip.sentence_id,
                     clip.source_path)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = WIN_SAMPLES,
                   sample_rate: int = TARGET_RATE,
                   f_min: float = 0.0, f_max: Optional[float] = None) -> np.ndarray:
    """Triangular mel filterbank on the HTK mel scale, shape (n_mels, n_fft//2+1)."""
    if f_max is None:
        f_max = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, bin_freqs.size))
    for m in range(n_mels):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - lo) / (center - lo)
        falling = (hi - bin_freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def frame_count(n_samples: int, win: int = WIN_SAMPLES, hop: int = HOP_SAMPLES) -> int:
    if n_samples < win:
        raise FeatureError(f"clip of {n_samples} samples shorter than one {win}-sample window")
    return (n_samples - win) // hop + 1


def log_mel(clip: AudioClip, n_mels: int = N_MELS) -> np.ndarray:
    """Log-mel spectrogram, shape (n_mels, frames), float64.

    STFT: Hann window of 400 samples, hop 160, no zero padding; power
    spectrum through the mel filterbank; elementwise log(x + 1e-10).
    """
    if clip.sample_rate != TARGET_RATE:
        raise FeatureError(f"log_mel expects {TARGET_RATE} Hz input, got {clip.sample_rate}")
    x = np.asarray(clip.samples, dtype=np.float64)
    n_frames = frame_count(x.size)
    idx = np.arange(WIN_SAMPLES)[None, :] + HOP_SAMPLES * np.arange(n_frames)[:, None]
    frames = x[idx] * _hann_window()
    power = np.abs(np.fft.rfft(frames, n=WIN_SAMPLES, axis=1)) ** 2
    mel = mel_filterbank(n_mels) @ power.T
    out = np.log(mel + LOG_EPS)
    if not np.all(np.isfinite(out)):
        raise FeatureError("non-finite values in log-mel output")
    return out


def _hann_window(n: int = WIN_SAMPLES) -> np.ndarray:
    # Periodic Hann, the standard analysis window for STFT.
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def fix_length(feature: np.ndarray, t_fixed: int) -> np.ndarray:
    """Center-crop or reflect-pad the time axis to exactly ``t_fixed`` frames."""
    if feature.ndim != 2 or feature.shape[1] < 1:
        raise FeatureError("feature must be a 2-D array with at least one frame")
    n = feature.shape[1]
    if n == t_fixed:
        return feature
    if n > t_fixed:
        start = (n - t_fixed) // 2
        return feature[:, start:start + t_fixed]
    pad = t_fixed - n
    left = pad // 2
    return np.pad(feature, ((0, 0), (left, pad - left)), mode="reflect")


@dataclass
class NormalizationStats:
    """Per-band affine normalization computed on training folds only.

    ``source_tag`` records which folds the statistics came from so the
    evaluation harness can assert there is no test-fold leakage.
    """

    mean: np.ndarray
    std: np.ndarray
    source_tag: str

    STD_FLOOR = 1e-6

    @classmethod
    def fit(cls, features: Sequence[np.ndarray], source_tag: str) -> "NormalizationStats":
        if not features:
            raise FeatureError("cannot fit normalization stats on an empty feature list")
        stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in features], axis=1)
        mean = stacked.mean(axis=1)
        std = np.maximum(stacked.std(axis=1), cls.STD_FLOOR)
        return cls(mean=mean, std=std, source_tag=source_tag)

    def apply(self, feature: np.ndarray) -> np.ndarray:
        return (feature - self.mean[:, None]) / self.std[:, None]


def extract_feature(clip: AudioClip, t_fixed: int, n_mels: int = N_MELS) -> np.ndarray:
    """Resample, log-mel, and fix length; float32 output of shape (n_mels, t_fixed)."""
    clip16 = resample_to_16k(clip)
    feat = fix_length(log_mel(clip16, n_mels=n_mels), t_fixed)
    return feat.astype(np.float32)


class FeatureCache:
    """On-disk feature cache: one raw little-endian float32 array per clip.

    Each ``<key>.f32`` array file carries a ``<key>.meta`` sidecar naming the
    cache version and frontend parameters; a parameter change invalidates the
    entry, and a corrupt entry is recomputed with a warning.
    """

    def __init__(self, cache_dir: Path | str, t_fixed: int, n_mels: int = N_MELS) -> None:
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.t_fixed = t_fixed
        self.n_mels = n_mels

    def _params_header(self) -> str:
        return (f"version={CACHE_VERSION}\nn_mels={self.n_mels}\nt_fixed={self.t_fixed}\n"
                f"sample_rate={TARGET_RATE}\nwin={WIN_SAMPLES}\nhop={HOP_SAMPLES}\n"
                f"log_eps={LOG_EPS!r}\ndtype=float32-le\n")

    def _paths(self, clip_path: str) -> Tuple[Path, Path]:
        key = f"{stable_hash(clip_path):08x}_{Path(clip_path).stem}"
        return self.cache_dir / f"{key}.f32", self.cache_dir / f"{key}.meta"

    def get(self, clip_path: str) -> Optional[np.ndarray]:
        """Cached feature for the clip, or None on miss/stale/corrupt entry."""
        arr_path, meta_path = self._paths(clip_path)
        if not arr_path.exists() or not meta_path.exists():
            return None
        if meta_path.read_text(encoding="utf-8") != self._params_header():
            logger.info("cache stale (parameters changed): %s", arr_path.name)
            return None
        raw = arr_path.read_bytes()
        expected = self.n_mels * self.t_fixed * 4
        if len(raw) != expected:
            logger.warning("corrupt cache entry (size %d != %d), recomputing: %s",
                           len(raw), expected, arr_path.name)
            return None
        return np.frombuffer(raw, dtype="<f4").reshape(self.n_mels, self.t_fixed).copy()

    def put(self, clip_path: str, feature: np.ndarray) -> None:
        if feature.shape != (self.n_mels, self.t_fixed):
            raise FeatureError(
                f"feature shape {feature.shape} != ({self.n_mels}, {self.t_fixed})")
        arr_path, meta_path = self._paths(clip_path)
        arr_path.write_bytes(np.ascontiguousarray(feature, dtype="<f4").tobytes())
        meta_path.write_text(self._params_header(), encoding="utf-8")

    def get_or_compute(self, clip_path: str, loader) -> Tuple[np.ndarray, bool]:
        """(feature, was_cache_hit); ``loader()`` must return the AudioClip."""
        cached = self.get(clip_path)
        if cached is not None:
            return cached, True
        feat = extract_feature(loader(), self.t_fixed, self.n_mels)
        self.put(clip_path, feat)
        return feat, False
