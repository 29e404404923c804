"""
Spectral front end: power STFT, Mel filterbank, log scaling and
multi-resolution 80x80 segment extraction with shared start offsets.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window

from _config import FFT_SIZES, FRAMES_PER_SEGMENT, LOG_EPS, MEL_BANDS, SAMPLE_RATE
from _errors import InsufficientInputError, ValidationError

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class ResolutionProfile:
    fft_size: int
    sample_rate: int = SAMPLE_RATE
    mel_bands: int = MEL_BANDS
    frames_per_segment: int = FRAMES_PER_SEGMENT

    def __post_init__(self):
        if self.fft_size < 2 or self.fft_size % 2:
            raise ValueError(f"fft_size must be even and >= 2, got {self.fft_size}")
        if self.mel_bands < 2 or self.frames_per_segment < 1:
            raise ValueError("mel_bands >= 2 and frames_per_segment >= 1 required")

    @property
    def hop(self):
        return self.fft_size // 2

    @property
    def span(self):
        """Samples covered by one segment."""
        return (self.frames_per_segment - 1) * self.hop + self.fft_size


def default_profiles(sample_rate=SAMPLE_RATE, fft_sizes=FFT_SIZES):
    return [ResolutionProfile(int(f), sample_rate) for f in fft_sizes]


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray
    edges_hz: np.ndarray
    sample_rate: int
    fft_size: int

    @property
    def centers_hz(self):
        return self.edges_hz[1:-1]


@dataclass
class MelSegment:
    values: np.ndarray
    resolution: ResolutionProfile
    source: object
    offset_samples: int
    class_label: str
    location_id: str
    augmentation: str = 'none'

    def __post_init__(self):
        shape = (self.resolution.mel_bands, self.resolution.frames_per_segment)
        if self.values.shape != shape:
            raise ValueError(f"segment shape {self.values.shape} != {shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("segment contains non-finite values")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def _hann(n):
    return get_window('hann', n, fftbins=True)


def _samples_of(clip):
    return np.asarray(getattr(clip, 'samples', clip), dtype=np.float64)


def stft_power(clip, fft_size, hop):
    """Squared-magnitude STFT, shape (fft_size/2 + 1, n_frames), frame t at t*hop."""
    x = _samples_of(clip)
    if x.size < fft_size:
        raise InsufficientInputError(f"need at least {fft_size} samples, got {x.size}")
    frames = sliding_window_view(x, fft_size)[::hop]
    spec = np.fft.rfft(frames * _hann(fft_size), axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


@lru_cache(maxsize=32)
def mel_filterbank(sample_rate, fft_size, mel_bands=MEL_BANDS):
    """Peak-normalized triangular filters, centers uniform in mel on (0, sr/2)."""
    if mel_bands < 2:
        raise ValidationError(f"mel_bands must be >= 2, got {mel_bands}")
    n_bins = fft_size // 2 + 1
    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), mel_bands + 2))
    pos = edges_hz * fft_size / sample_rate
    left, center, right = pos[:-2, None], pos[1:-1, None], pos[2:, None]
    # at least one bin of half-width so narrow low bands still catch a bin
    rise = np.maximum(center - left, 1.0)
    fall = np.maximum(right - center, 1.0)
    bins = np.arange(n_bins)[None, :]
    w = np.where(bins <= center, 1.0 - (center - bins) / rise, 1.0 - (bins - center) / fall)
    w = np.clip(w, 0.0, None)
    w /= w.max(axis=1, keepdims=True)
    w.setflags(write=False)
    return MelFilterbank(w, edges_hz, sample_rate, fft_size)


def log_mel(power, fb):
    if power.shape[1] < 1:
        raise InsufficientInputError("power matrix has no frames")
    return np.log(fb.weights @ power + LOG_EPS)


def segment_values(samples, offset, profile):
    x = samples[offset:offset + profile.span]
    fb = mel_filterbank(profile.sample_rate, profile.fft_size, profile.mel_bands)
    return log_mel(stft_power(x, profile.fft_size, profile.hop), fb)[:, :profile.frames_per_segment]


def extract_segments(clip, profiles, n_segments=10, seed=0, source=None,
                     class_label='', location_id='', augmentation='none'):
    """
    Draw `n_segments` start offsets and cut one segment per profile at each,
    so every tuple is co-registered across resolutions.
    """
    x = _samples_of(clip)
    widest = max(p.span for p in profiles)
    if x.size < widest:
        raise InsufficientInputError(
            f"clip has {x.size} samples, widest resolution needs {widest}")
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, x.size - widest, size=n_segments, endpoint=True)
    return [
        tuple(MelSegment(segment_values(x, int(off), p).astype(np.float32), p, source, int(off),
                         class_label, location_id, augmentation)
              for p in profiles)
        for off in offsets
    ]


@dataclass
class Standardizer:
    """Per-resolution scalar mean/std fitted on training cells."""
    stats: dict

    @classmethod
    def fit(cls, values_by_resolution):
        stats = {}
        for res, values in values_by_resolution.items():
            if len(values) < 2:
                raise ValidationError(f"resolution {res}: need >= 2 segments to standardize")
            flat = np.asarray(values, dtype=np.float64).reshape(-1)
            # numpy reduces pairwise, so the result does not depend on segment order blocks
            mean = float(np.mean(flat))
            std = float(np.sqrt(np.mean((flat - mean) ** 2)))
            stats[int(res)] = (mean, max(std, STD_FLOOR))
        return cls(stats)

    def transform(self, values_by_resolution):
        out = {}
        for res, values in values_by_resolution.items():
            mean, std = self.stats[int(res)]
            out[res] = ((np.asarray(values, dtype=np.float64) - mean) / std).astype(np.float32)
        return out

    def to_frame(self):
        return pd.DataFrame([(r, m, s) for r, (m, s) in sorted(self.stats.items())],
                            columns=['resolution_fft', 'mean', 'std'])

    def save(self, path):
        self.to_frame().to_csv(path, index=False, float_format='%.17g')

    @classmethod
    def load(cls, path):
        df = pd.read_csv(path)
        return cls({int(r.resolution_fft): (float(r.mean), float(r.std)) for r in df.itertuples()})


def standardize(values_by_resolution):
    """Fit on a training set and return (statistics, transformed training set)."""
    st = Standardizer.fit(values_by_resolution)
    return st, st.transform(values_by_resolution)
