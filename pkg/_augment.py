"""
Audio augmentation: split-shuffle-remix, place remixing, pitch shift and
time stretch in the time domain, Gaussian noise on standardized log-Mel cells.
"""
import logging
from dataclasses import dataclass
from itertools import combinations

import librosa
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import resample

from _config import DEFAULTS, derive_seed
from _corpus import AudioClip, normalize_peak, read_audio
from _errors import InsufficientInputError, ValidationError

logger = logging.getLogger(__name__)

RMS_FRAME = 2048
RMS_HOP = 512
MIN_INTERVAL_S = 0.100
VOCODER_FFT = 2048
VOCODER_HOP = 512
MIN_VOCODER_SAMPLES = 4096

TIME_DOMAIN_METHODS = ('stretch', 'shift')


@dataclass(frozen=True)
class NonSilentInterval:
    start_sample: int
    end_sample: int
    rms_db: float

    def __post_init__(self):
        if not self.start_sample < self.end_sample:
            raise ValueError(f"empty interval [{self.start_sample}, {self.end_sample})")

    def __len__(self):
        return self.end_sample - self.start_sample


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = DEFAULTS['aug.noise_sigma']

    def __post_init__(self):
        if self.sigma < 0:
            raise ValidationError(f"noise sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class RemixProvenance:
    class_label: str
    locations: tuple
    paths: tuple

    @property
    def location_id(self):
        return '+'.join(self.locations)

    @property
    def source(self):
        return 'remix:' + '|'.join(str(p) for p in self.paths)


def _guard_peak(samples, sample_rate):
    clip = AudioClip(samples, sample_rate)
    return normalize_peak(clip) if clip.peak > 1.0 else clip


# --- silence analysis -----------------------------------------------------

def frame_rms(samples):
    """RMS of 2048-sample frames at hop 512; the tail is zero-padded into a last frame."""
    n = samples.size
    n_frames = max(0, -(-(n - RMS_FRAME) // RMS_HOP)) + 1
    padded = np.zeros((n_frames - 1) * RMS_HOP + RMS_FRAME)
    padded[:n] = samples
    frames = sliding_window_view(padded, RMS_FRAME)[::RMS_HOP]
    return np.sqrt(np.mean(frames ** 2, axis=1))


def _merge_short(bounds, min_len):
    bounds = [list(b) for b in bounds]
    while len(bounds) > 1:
        lengths = [e - s for s, e in bounds]
        i = int(np.argmin(lengths))
        if lengths[i] >= min_len:
            break
        gap_prev = bounds[i][0] - bounds[i - 1][1] if i > 0 else np.inf
        gap_next = bounds[i + 1][0] - bounds[i][1] if i < len(bounds) - 1 else np.inf
        j = i - 1 if gap_prev <= gap_next else i + 1
        lo, hi = min(i, j), max(i, j)
        bounds[lo:hi + 1] = [[bounds[lo][0], bounds[hi][1]]]
    return bounds


def detect_nonsilent(clip, threshold_db):
    """
    Intervals whose analysis frames all sit above `threshold_db` relative to
    the loudest frame. Resolution is one hop (512 samples).
    """
    if threshold_db >= 0:
        raise ValidationError(f"threshold_db must be negative, got {threshold_db}")
    x = clip.samples
    rms = frame_rms(x)
    peak_rms = rms.max()
    if peak_rms == 0.0:
        return []
    with np.errstate(divide='ignore'):
        loud = 20.0 * np.log10(rms / peak_rms) > threshold_db

    # hop cell c is covered by frames c-3 .. c
    per_frame = RMS_FRAME // RMS_HOP
    n_cells = -(-x.size // RMS_HOP)
    padded = np.concatenate([np.ones(per_frame - 1, dtype=bool), loud,
                             np.ones(max(0, n_cells - loud.size), dtype=bool)])
    cells = sliding_window_view(padded, per_frame).all(axis=1)[:n_cells]

    edges = np.diff(np.concatenate([[0], cells.astype(np.int8), [0]]))
    starts, ends = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    bounds = [(s * RMS_HOP, min(e * RMS_HOP, x.size)) for s, e in zip(starts, ends)]
    bounds = _merge_short(bounds, int(round(MIN_INTERVAL_S * clip.sample_rate)))

    out = []
    for s, e in bounds:
        seg_rms = np.sqrt(np.mean(x[s:e] ** 2))
        db = 20.0 * np.log10(seg_rms / peak_rms) if seg_rms > 0 else -np.inf
        out.append(NonSilentInterval(int(s), int(e), float(db)))
    return out


# --- split-shuffle-remix --------------------------------------------------

def remix_intervals(clip, target_segments=DEFAULTS['aug.target_segments'],
                    start_db=DEFAULTS['aug.threshold_start_db'],
                    step_db=DEFAULTS['aug.threshold_step_db'],
                    cap_db=DEFAULTS['aug.threshold_cap_db']):
    """Raise the threshold until enough intervals appear; returns (intervals, threshold)."""
    threshold = start_db
    while True:
        intervals = detect_nonsilent(clip, threshold)
        if len(intervals) >= target_segments or threshold >= cap_db:
            break
        threshold = min(threshold + step_db, cap_db)
    if not intervals:
        logger.debug("no non-silent interval up to %.0f dB, using the whole clip", threshold)
        intervals = [NonSilentInterval(0, len(clip), 0.0)]
    return intervals, threshold


def crossfade_concat(pieces, crossfade):
    """Concatenate with linear crossfades of up to `crossfade` samples."""
    total = sum(p.size for p in pieces)
    out = np.empty(total)
    pos = 0
    for piece in pieces:
        n = min(crossfade, piece.size, pos)
        if n:
            ramp = (np.arange(n) + 0.5) / n
            out[pos - n:pos] = out[pos - n:pos] * (1.0 - ramp) + piece[:n] * ramp
        out[pos:pos + piece.size - n] = piece[n:]
        pos += piece.size - n
    return out[:pos]


def split_shuffle_remix(clip, target_segments=DEFAULTS['aug.target_segments'], seed=0,
                        copies=4, crossfade_ms=DEFAULTS['aug.crossfade_ms'], **ladder):
    intervals, threshold = remix_intervals(clip, target_segments, **ladder)
    pieces = [clip.samples[iv.start_sample:iv.end_sample] for iv in intervals] * copies
    order = np.random.default_rng(seed).permutation(len(pieces))
    xf = int(round(crossfade_ms * clip.sample_rate / 1000.0))
    out = crossfade_concat([pieces[i] for i in order], xf)
    logger.debug("split-shuffle-remix: %d intervals at %.0f dB -> %.2f s",
                 len(intervals), threshold, out.size / clip.sample_rate)
    return _guard_peak(out, clip.sample_rate)


# --- place remixing -------------------------------------------------------

def remix_places(files_by_location, seed=0, loader=read_audio, class_label=''):
    """
    Average one random file from each unordered pair of locations.
    Returns a list of (AudioClip, RemixProvenance).
    """
    locations = sorted(files_by_location)
    if len(locations) < 2:
        logger.warning("class '%s' has %d location(s); no place remix possible",
                       class_label, len(locations))
        return []
    rng = np.random.default_rng(seed)
    out = []
    for la, lb in combinations(locations, 2):
        pa = files_by_location[la][rng.integers(len(files_by_location[la]))]
        pb = files_by_location[lb][rng.integers(len(files_by_location[lb]))]
        a, b = normalize_peak(loader(pa)), normalize_peak(loader(pb))
        if a.sample_rate != b.sample_rate:
            raise ValidationError(f"cannot remix {pa} ({a.sample_rate} Hz) with {pb} ({b.sample_rate} Hz)")
        n = min(len(a), len(b))
        mixed = AudioClip(0.5 * (a.samples[:n] + b.samples[:n]), a.sample_rate)
        out.append((mixed, RemixProvenance(class_label, (la, lb), (pa, pb))))
    return out


# --- phase vocoder --------------------------------------------------------

def _check_vocoder_input(clip):
    if len(clip) < MIN_VOCODER_SAMPLES:
        raise InsufficientInputError(
            f"phase vocoder needs >= {MIN_VOCODER_SAMPLES} samples, got {len(clip)}")


def _draw(value, spread, seed):
    if value is not None:
        return float(value)
    return float(np.random.default_rng(seed).uniform(1.0 - spread, 1.0 + spread))


def _stretch(samples, rate):
    return librosa.effects.time_stretch(samples, rate=rate, n_fft=VOCODER_FFT,
                                        hop_length=VOCODER_HOP)


def time_stretch(clip, rate=None, seed=0, stretch_range=DEFAULTS['aug.stretch_range']):
    """Change tempo by `rate` (>1 is faster), keeping pitch; length becomes round(n / rate)."""
    _check_vocoder_input(clip)
    rate = _draw(rate, stretch_range, seed)
    if rate <= 0:
        raise ValidationError(f"stretch rate must be positive, got {rate}")
    return _guard_peak(_stretch(clip.samples, rate), clip.sample_rate)


def pitch_shift(clip, factor=None, seed=0, shift_range=DEFAULTS['aug.shift_range']):
    """Scale all frequencies by `factor`, keeping duration."""
    _check_vocoder_input(clip)
    factor = _draw(factor, shift_range, seed)
    if factor <= 0:
        raise ValidationError(f"pitch factor must be positive, got {factor}")
    stretched = _stretch(clip.samples, 1.0 / factor)
    if stretched.size != len(clip):
        stretched = resample(stretched, len(clip))
    return _guard_peak(stretched, clip.sample_rate)


def time_domain_variants(clip, path, methods, master_seed, stretch_range=DEFAULTS['aug.stretch_range'],
                         shift_range=DEFAULTS['aug.shift_range']):
    """One stretched and one shifted copy per file, each with its own derived seed."""
    out = {}
    for method in methods:
        seed = derive_seed(master_seed, path, method)
        if method == 'stretch':
            out[method] = time_stretch(clip, seed=seed, stretch_range=stretch_range)
        elif method == 'shift':
            out[method] = pitch_shift(clip, seed=seed, shift_range=shift_range)
        else:
            raise ValidationError(f"unknown time-domain augmentation '{method}'")
    return out


# --- spectrogram noise ----------------------------------------------------

def apply_noise(values, spec, seed, training=True):
    if not training or spec.sigma == 0:
        return values
    rng = np.random.default_rng(seed)
    return values + rng.normal(0.0, spec.sigma, size=np.shape(values)).astype(np.asarray(values).dtype)
