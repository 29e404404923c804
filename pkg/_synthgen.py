"""
Synthetic scene corpus: each class is a coloured-noise texture plus an
acoustic event grammar. Within a location the texture is fixed, so files
of one location are self-similar.
"""
import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.signal import chirp, welch

from _config import SAMPLE_RATE, TABLE1_LOCATIONS, THREADS, derive_seed
from _corpus import (AudioClip, RecordingMeta, load_manifest, read_audio, resolve_path, write_audio,
                     write_manifest)
from _dsp import ResolutionProfile, extract_segments, stft_power
from _errors import EXIT_OK, InsufficientInputError, ValidationError

logger = logging.getLogger(__name__)

PEAK_LEVEL = 0.891   # -1 dBFS
LOCATION_SPREAD = 0.10
IDENTIFIABILITY_MIN = 0.95
SELF_SIMILARITY_MARGIN = 0.05


@dataclass(frozen=True)
class TextureSpec:
    center_hz: float = 800.0
    width_octaves: float = 2.0
    slope_db_per_octave: float = 12.0
    hf_floor_db: float = None
    hf_corner_hz: float = 4000.0
    ripple_period_hz: float = None
    ripple_depth: float = 0.0
    level_db: float = -20.0

    def envelope_db(self, freqs):
        """Flat band of `width_octaves` around the center with sloped skirts."""
        octaves = np.abs(np.log2(np.maximum(freqs, 1.0) / self.center_hz))
        env = -self.slope_db_per_octave * np.maximum(0.0, octaves - self.width_octaves / 2)
        if self.hf_floor_db is not None:
            env = np.where(freqs >= self.hf_corner_hz, np.maximum(env, self.hf_floor_db), env)
        return env

    def amplitude(self, freqs):
        amp = 10.0 ** (self.envelope_db(freqs) / 20.0)
        if self.ripple_period_hz:
            ripple = 1.0 + self.ripple_depth * np.cos(2 * np.pi * freqs / self.ripple_period_hz)
            amp = np.where(freqs >= self.hf_corner_hz, amp * ripple / (1.0 + self.ripple_depth), amp)
        return amp

    def perturbed(self, rng, spread=LOCATION_SPREAD):
        scale = lambda v: v * rng.uniform(1.0 - spread, 1.0 + spread)
        return replace(self, center_hz=scale(self.center_hz), width_octaves=scale(self.width_octaves),
                       slope_db_per_octave=scale(self.slope_db_per_octave), level_db=scale(self.level_db))


@dataclass(frozen=True)
class EventSpec:
    kind: str = 'tone'
    duration_range: tuple = (0.08, 0.12)
    inter_onset_s: float = 0.3
    jitter_s: float = 0.03
    freq_range: tuple = (1500.0, 2500.0)
    level_db: float = 6.0

    def __post_init__(self):
        if self.kind not in ('tone', 'chirp', 'clicks'):
            raise ValidationError(f"unknown event type '{self.kind}'")
        if min(self.duration_range) <= 0 or self.inter_onset_s <= 0:
            raise ValidationError("event durations and inter-onset must be positive")


@dataclass(frozen=True)
class SceneSpec:
    name: str
    texture: TextureSpec
    events: tuple = ()
    locations: int = 8
    files_per_location: int = 4
    duration_s: float = 10.0

    def __post_init__(self):
        if self.duration_s <= 0 or self.locations < 1 or self.files_per_location < 1:
            raise ValidationError(f"{self.name}: durations and counts must be positive")

    @property
    def slug(self):
        return self.name.replace('/', '_')


SHORT_EVENTS = EventSpec(inter_onset_s=0.3, jitter_s=0.03)
LONG_EVENTS = EventSpec(inter_onset_s=3.0, jitter_s=0.3)
TEXTURE_B = TextureSpec()
TEXTURE_A = replace(TEXTURE_B, hf_floor_db=-20.0, ripple_period_hz=60.0, ripple_depth=0.8)


def default_specs(locations=8, files_per_location=4, duration_s=10.0):
    """A: fine-structure texture; B and C share a texture and differ in event rate."""
    common = dict(locations=locations, files_per_location=files_per_location, duration_s=duration_s)
    return [
        SceneSpec('texture-A', TEXTURE_A, (SHORT_EVENTS,), **common),
        SceneSpec('events-short', TEXTURE_B, (SHORT_EVENTS,), **common),
        SceneSpec('events-long', TEXTURE_B, (LONG_EVENTS,), **common),
    ]


def table1_specs(files_per_location=4, duration_s=10.0):
    """15 classes with the location counts of the real dataset."""
    kinds = ('tone', 'chirp', 'clicks')
    rates = (0.3, 1.0, 3.0)
    specs = []
    for i, (name, locations) in enumerate(sorted(TABLE1_LOCATIONS.items())):
        texture = TextureSpec(center_hz=250.0 * 2 ** (i * 0.25), width_octaves=1.5 + 0.1 * (i % 4))
        if i % 2:
            texture = replace(texture, hf_floor_db=-20.0, ripple_period_hz=40.0 + 10 * (i % 5), ripple_depth=0.8)
        event = EventSpec(kind=kinds[i % 3], inter_onset_s=rates[(i // 3) % 3],
                          jitter_s=rates[(i // 3) % 3] / 10,
                          freq_range=(1000.0 + 200 * (i % 5), 1800.0 + 200 * (i % 5)))
        specs.append(SceneSpec(name, texture, (event,), locations, files_per_location, duration_s))
    return specs


# --- rendering ------------------------------------------------------------

def render_texture(texture, n, sample_rate, rng):
    """Coloured noise with the texture's envelope and uniformly random phases."""
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spectrum = texture.amplitude(freqs) * np.exp(2j * np.pi * rng.random(freqs.size))
    spectrum[0] = 0.0
    x = np.fft.irfft(spectrum, n=n)
    rms = np.sqrt(np.mean(x ** 2))
    return x * (10.0 ** (texture.level_db / 20.0) / rms) if rms > 0 else x


def render_event(event, sample_rate, rng):
    d = rng.uniform(*event.duration_range)
    t = np.arange(int(d * sample_rate)) / sample_rate
    f0, f1 = sorted(rng.uniform(*event.freq_range, size=2))
    if event.kind == 'tone':
        y = np.sin(2 * np.pi * f0 * t)
    elif event.kind == 'chirp':
        y = chirp(t, f0=f0, t1=d, f1=f1, method='linear')
    else:
        y = np.zeros(t.size)
        period = max(1, int(0.01 * sample_rate))
        y[::period] = 1.0
        y = np.convolve(y, np.sin(2 * np.pi * f0 * t[:period]) * np.hanning(period), mode='same')
    y *= np.hanning(y.size)
    rms = np.sqrt(np.mean(y ** 2))
    return y / rms if rms > 0 else y


def render_events(event, n, sample_rate, texture_rms, rng):
    out = np.zeros(n)
    gain = texture_rms * 10.0 ** (event.level_db / 20.0)
    onset = rng.uniform(0.0, event.inter_onset_s)
    while onset < n / sample_rate:
        y = render_event(event, sample_rate, rng) * gain
        start = int(onset * sample_rate)
        stop = min(n, start + y.size)
        out[start:stop] += y[:stop - start]
        onset += max(event.inter_onset_s + rng.uniform(-event.jitter_s, event.jitter_s), 1.0 / sample_rate)
    return out


def render_file(spec, texture, seed, sample_rate=SAMPLE_RATE):
    rng = np.random.default_rng(seed)
    n = int(round(spec.duration_s * sample_rate))
    x = render_texture(texture, n, sample_rate, rng)
    rms = np.sqrt(np.mean(x ** 2))
    for event in spec.events:
        x = x + render_events(event, n, sample_rate, rms, rng)
    peak = np.max(np.abs(x))
    return AudioClip(x * (PEAK_LEVEL / peak) if peak > 0 else x, sample_rate)


def location_id(spec, index):
    return f"{spec.slug}-L{index:02d}"


def corpus_plan(specs, seed):
    """(spec, location id, location texture, file index, file seed) for every file."""
    jobs = []
    for spec in specs:
        for loc in range(spec.locations):
            texture = spec.texture.perturbed(np.random.default_rng(derive_seed(seed, spec.name, 'loc', loc)))
            for i in range(spec.files_per_location):
                jobs.append((spec, location_id(spec, loc), texture, i,
                             derive_seed(seed, spec.name, loc, i)))
    return jobs


def write_snapshot(path, specs, seed, sample_rate):
    lines = [f"seed = {seed}", f"sample_rate = {sample_rate}", f"classes = {len(specs)}"]
    for spec in specs:
        for key, value in sorted(_flatten(asdict(spec)).items()):
            lines.append(f"{spec.slug}.{key} = {value}")
    Path(path).write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return path


def _flatten(d, prefix=''):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + '.'))
        elif isinstance(v, (list, tuple)) and v and isinstance(v[0], dict):
            for i, item in enumerate(v):
                out.update(_flatten(item, f"{key}.{i}."))
        else:
            out[key] = ','.join(str(x) for x in v) if isinstance(v, (list, tuple)) else v
    return out


def generate_corpus(specs, seed, out_dir, sample_rate=SAMPLE_RATE, workers=THREADS):
    """Write WAVs, `manifest.csv` and `spec.snapshot`; returns the RecordingMeta list."""
    if len(specs) < 2:
        raise ValidationError(f"a corpus needs >= 2 scene specs, got {len(specs)}")
    if len({s.name for s in specs}) != len(specs):
        raise ValidationError("scene names must be unique")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = corpus_plan(specs, seed)

    def work(job):
        spec, loc, texture, i, file_seed = job
        rel = Path(spec.slug) / f"{loc}_{i:02d}.wav"
        clip = render_file(spec, texture, file_seed, sample_rate)
        write_audio(out_dir / rel, clip)
        return RecordingMeta(rel.as_posix(), spec.name, loc, clip.duration_s)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        metas = list(pool.map(work, jobs))
    write_manifest(metas, out_dir / 'manifest.csv')
    write_snapshot(out_dir / 'spec.snapshot', specs, seed, sample_rate)
    logger.info("corpus: %d files, %d classes -> %s", len(metas), len(specs), out_dir)
    return metas


# --- corpus checks --------------------------------------------------------

def describe_corpus(metas):
    """Per class: locations, total seconds and min/max/mean seconds per location, plus file lengths."""
    columns = ['class_label', 'locations', 'sum', 'min', 'max', 'mean',
               'files', 'file_min', 'file_max', 'file_mean']
    if not metas:
        return pd.DataFrame(columns=columns)
    df = pd.DataFrame([(m.class_label, m.location_id, m.duration_s) for m in metas],
                      columns=['class_label', 'location_id', 'duration_s'])
    per_loc = df.groupby(['class_label', 'location_id'])['duration_s'].sum().groupby(level=0)
    per_file = df.groupby('class_label')['duration_s']
    table = pd.DataFrame({
        'locations': per_loc.size(), 'sum': per_loc.sum(), 'min': per_loc.min(),
        'max': per_loc.max(), 'mean': per_loc.mean(),
        'files': per_file.size(), 'file_min': per_file.min(),
        'file_max': per_file.max(), 'file_mean': per_file.mean(),
    })
    return table.rename_axis('class_label').reset_index()[columns]


def _pair_accuracy_threshold(values, labels):
    """Best single-threshold accuracy on a 1-D feature for two classes."""
    order = np.argsort(values, kind='stable')
    y = (np.asarray(labels)[order] == labels[0]).astype(int)
    n = y.size
    # below split -> class 0 / class 1, both directions
    left_pos = np.concatenate([[0], np.cumsum(y)])
    right_pos = y.sum() - left_pos
    k = np.arange(n + 1)
    acc_a = (left_pos + (n - k - right_pos)) / n
    acc_b = ((k - left_pos) + right_pos) / n
    return float(max(acc_a.max(), acc_b.max()))


def _loo_1nn_accuracy(features, labels):
    X = np.asarray(features, dtype=np.float64)
    d = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    nearest = np.argmin(d, axis=1)
    labels = np.asarray(labels)
    return float(np.mean(labels[nearest] == labels))


def spectral_centroid(clip, fft_size=512):
    power = stft_power(clip, fft_size, fft_size // 2)
    freqs = np.fft.rfftfreq(fft_size, 1.0 / clip.sample_rate)
    frame_power = power.sum(axis=0)
    cent = (freqs[:, None] * power).sum(axis=0) / np.where(frame_power > 0, frame_power, 1.0)
    return float(np.mean(cent))


def mean_log_mel(clip, fft_size=8192, seed=0):
    profile = ResolutionProfile(fft_size, clip.sample_rate)
    try:
        (seg,), = extract_segments(clip, [profile], n_segments=1, seed=seed)
    except InsufficientInputError as e:
        raise ValidationError(f"files too short for the identifiability check: {e}") from e
    return seg.values.mean(axis=1)


def check_identifiability(metas, root, texture_pair=('texture-A', 'events-short'),
                          event_pair=('events-short', 'events-long'), minimum=IDENTIFIABILITY_MIN):
    """
    Texture pair must separate by spectral centroid at a 512 window, event
    pair by 1-NN on mean log-Mel at 8192. Raises ValidationError otherwise.
    """
    results = {}
    by_class = {}
    for m in metas:
        by_class.setdefault(m.class_label, []).append(m)
    for pair, kind in ((texture_pair, 'centroid@512'), (event_pair, '1nn@8192')):
        if not all(c in by_class for c in pair):
            continue
        files = [m for c in pair for m in by_class[c]]
        labels = [m.class_label for m in files]
        clips = [read_audio(resolve_path(m, root)) for m in files]
        if kind == 'centroid@512':
            acc = _pair_accuracy_threshold(np.array([spectral_centroid(c) for c in clips]), labels)
        else:
            acc = _loo_1nn_accuracy([mean_log_mel(c) for c in clips], labels)
        results[(pair, kind)] = acc
        logger.info("identifiability %s vs %s (%s): %.3f", pair[0], pair[1], kind, acc)
        if acc < minimum:
            raise ValidationError(f"corpus rejected: {pair[0]} vs {pair[1]} separable only "
                                  f"{acc:.1%} by {kind} (need {minimum:.0%})")
    return results


def ltas(clip, nperseg=4096):
    _, pxx = welch(clip.samples, fs=clip.sample_rate, nperseg=nperseg)
    return 10.0 * np.log10(pxx + 1e-20)


def self_similarity(metas, root):
    """
    Mean cosine similarity of class-centred long-term spectra within vs.
    across locations of the same class. Returns (within, across).
    """
    spectra = {m.path: ltas(read_audio(resolve_path(m, root))) for m in metas}
    within, across = [], []
    for label in sorted({m.class_label for m in metas}):
        group = [m for m in metas if m.class_label == label]
        X = np.array([spectra[m.path] for m in group])
        X = X - X.mean(axis=0)
        X /= np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
        sim = X @ X.T
        locs = np.array([m.location_id for m in group])
        same = locs[:, None] == locs[None, :]
        off = ~np.eye(len(group), dtype=bool)
        within += sim[same & off].tolist()
        across += sim[~same].tolist()
    return float(np.mean(within)) if within else np.nan, float(np.mean(across)) if across else np.nan


def check_corpus(metas, root, margin=SELF_SIMILARITY_MARGIN):
    """
    Gate a corpus before training: class identifiability plus within- vs.
    across-location self-similarity by at least `margin`. Returns a dict of
    the measured values; raises ValidationError on failure.
    """
    results = {f"{a} vs {b} ({kind})": acc for ((a, b), kind), acc in check_identifiability(metas, root).items()}
    within, across = self_similarity(metas, root)
    results.update({'within': within, 'across': across})
    if not within - across >= margin:
        raise ValidationError(f"corpus rejected: self-similarity within locations {within:.3f} vs "
                              f"across {across:.3f} (need a margin of {margin})")
    return results


def print_corpus_check(results):
    for name, value in results.items():
        print(f"  {name:<40} {value:.3f}")
    print("✓ corpus accepted")


def main(argv=None):
    parser = argparse.ArgumentParser(description='Check an existing synthetic corpus')
    parser.add_argument('manifest')
    args = parser.parse_args(argv)
    manifest = Path(args.manifest)
    print(f"\n{'='*60}")
    print(f"Corpus check: {manifest}")
    print(f"{'='*60}")
    try:
        results = check_corpus(load_manifest(manifest), manifest.parent)
    except ValidationError as e:
        print(f"✗ {e}")
        return e.exit_code
    print_corpus_check(results)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
