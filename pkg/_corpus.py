"""
Manifest-driven dataset handling: manifest CSV, WAV I/O, peak normalization
and grouped-stratified fold construction.
"""
import io
import logging
import re
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.io import wavfile

from _errors import (
    CorruptFileError, InfeasibleFoldsError, LabelError, ManifestParseError,
    UnsupportedFormatError, ValidationError,
)

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ['path', 'class_label', 'location_id', 'duration_s']

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE
SUPPORTED_CODECS = {(WAVE_FORMAT_PCM, 16), (WAVE_FORMAT_IEEE_FLOAT, 32)}


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise ValueError("AudioClip needs at least one sample")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioClip samples must be finite")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self):
        return self.samples.size / self.sample_rate

    @property
    def peak(self):
        return float(np.max(np.abs(self.samples)))


@dataclass(frozen=True)
class RecordingMeta:
    path: str
    class_label: str
    location_id: str
    duration_s: float


@dataclass
class FoldPlan:
    fold_count: int
    assignments: dict
    class_histograms: dict = field(default_factory=dict)

    def fold_of(self, location_id):
        return self.assignments[location_id]

    def locations_in(self, fold):
        return sorted(loc for loc, f in self.assignments.items() if f == fold)

    def split(self, test_fold, validation_offset=1):
        """Return (train, validation, test) location sets for one outer fold."""
        val_fold = (test_fold + validation_offset) % self.fold_count
        if val_fold == test_fold:
            raise ValidationError("validation fold coincides with the test fold")
        test = set(self.locations_in(test_fold))
        val = set(self.locations_in(val_fold))
        train = set(self.assignments) - test - val
        return train, val, test

    def to_frame(self):
        return pd.DataFrame(
            sorted(self.assignments.items()), columns=['location_id', 'fold'])

    def signature(self):
        """Compact identity used to check that models share folds."""
        return ';'.join(f"{loc}:{f}" for loc, f in sorted(self.assignments.items()))


# --- manifest -------------------------------------------------------------

def load_manifest(source, labels=None):
    """
    Parse a manifest CSV (`path,class_label,location_id,duration_s`).
    `source` is a path or a text stream; `labels` is an optional whitelist.
    """
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding='utf-8')
    else:
        text = source.read()

    try:
        df = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False,
                         skip_blank_lines=False, engine='python')
    except pd.errors.EmptyDataError:
        raise ManifestParseError(1, "missing header")
    except pd.errors.ParserError as e:
        m = re.search(r'line (\d+)', str(e))
        raise ManifestParseError(int(m.group(1)) if m else 0, str(e))

    if list(df.columns) != MANIFEST_COLUMNS:
        raise ManifestParseError(1, f"header must be {','.join(MANIFEST_COLUMNS)}, got {','.join(df.columns)}")

    whitelist = set(labels) if labels else None
    metas, seen_paths, location_class = [], set(), {}
    for idx, row in df.iterrows():
        line = idx + 2
        values = [row[c] for c in MANIFEST_COLUMNS]
        if all((v is None or (isinstance(v, float) and np.isnan(v)) or str(v).strip() == '') for v in values):
            continue
        path, label, location, duration = (None if v is None or (isinstance(v, float) and np.isnan(v))
                                           else str(v).strip() for v in values)
        if not path or not label or not location or duration is None:
            raise ManifestParseError(line, "row has empty fields")
        try:
            duration_s = float(duration)
        except ValueError:
            raise ManifestParseError(line, f"duration_s is not a number: {duration!r}")
        if not np.isfinite(duration_s) or duration_s <= 0:
            raise ManifestParseError(line, f"duration_s must be positive, got {duration!r}")
        if path in seen_paths:
            raise ManifestParseError(line, f"duplicate path {path}")
        if whitelist is not None and label not in whitelist:
            raise LabelError(f"manifest line {line}: unknown class '{label}'")
        if location_class.setdefault(location, label) != label:
            raise ManifestParseError(
                line, f"location {location} already belongs to class '{location_class[location]}'")
        seen_paths.add(path)
        metas.append(RecordingMeta(path, label, location, duration_s))
    return metas


def write_manifest(metas, path):
    df = pd.DataFrame([[m.path, m.class_label, m.location_id, m.duration_s] for m in metas],
                      columns=MANIFEST_COLUMNS)
    df.to_csv(path, index=False)
    return path


def resolve_path(meta, root):
    p = Path(meta.path)
    return p if p.is_absolute() else Path(root) / p


# --- WAV I/O --------------------------------------------------------------

def _read_wav_header(path):
    """Check RIFF structure and codec before handing the file to scipy."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b'RIFF' or raw[8:12] != b'WAVE':
        raise UnsupportedFormatError(f"{path}: not a RIFF/WAVE file")
    pos, fmt = 12, None
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        size = struct.unpack('<I', raw[pos + 4:pos + 8])[0]
        body = pos + 8
        if chunk_id == b'fmt ':
            if size < 16 or body + size > len(raw):
                raise CorruptFileError(f"{path}: truncated fmt chunk")
            tag, channels, _, _, block_align, bits = struct.unpack('<HHIIHH', raw[body:body + 16])
            if tag == WAVE_FORMAT_EXTENSIBLE and size >= 26:
                tag = struct.unpack('<H', raw[body + 24:body + 26])[0]
            if (tag, bits) not in SUPPORTED_CODECS:
                raise UnsupportedFormatError(f"{path}: unsupported codec tag={tag:#06x} bits={bits}")
            if channels not in (1, 2):
                raise UnsupportedFormatError(f"{path}: {channels} channels (only mono/stereo)")
            fmt = (tag, channels, block_align)
        elif chunk_id == b'data':
            if fmt is None:
                raise CorruptFileError(f"{path}: data chunk before fmt chunk")
            if body + size > len(raw):
                raise CorruptFileError(
                    f"{path}: data chunk declares {size} bytes, only {len(raw) - body} present")
            if size == 0 or size % fmt[2]:
                raise CorruptFileError(f"{path}: data chunk size {size} is not whole frames")
            return fmt
        pos = body + size + (size & 1)
    raise CorruptFileError(f"{path}: no data chunk")


def read_audio(path):
    """Read a PCM16 / FLOAT32 WAV as a mono AudioClip scaled to [-1, 1]."""
    _read_wav_header(path)
    try:
        rate, data = wavfile.read(path)
    except ValueError as e:
        raise CorruptFileError(f"{path}: {e}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedFormatError(f"{path}: decoded dtype {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise CorruptFileError(f"{path}: non-finite samples")
    return AudioClip(samples, rate)


def write_audio(path, clip):
    """Write a mono IEEE-float32 WAV."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))
    return path


def normalize_peak(clip):
    peak = clip.peak
    if peak == 0.0:
        return clip
    return AudioClip(clip.samples / peak, clip.sample_rate)


# --- folds ----------------------------------------------------------------

def grouped_stratified_folds(metas, fold_count=4, seed=0):
    """
    Assign whole locations to folds, class by class, always into the fold
    currently lightest (in files of that class); ties go to the lower index.
    """
    if fold_count < 2:
        raise ValidationError(f"fold_count must be >= 2, got {fold_count}")

    files_per_location = defaultdict(int)
    class_locations = defaultdict(set)
    for m in metas:
        files_per_location[m.location_id] += 1
        class_locations[m.class_label].add(m.location_id)

    for label in sorted(class_locations):
        if len(class_locations[label]) < fold_count:
            raise InfeasibleFoldsError(label, len(class_locations[label]), fold_count)

    rng = np.random.default_rng(seed)
    assignments, histograms = {}, {}
    for label in sorted(class_locations):
        locations = sorted(class_locations[label])
        locations = [locations[i] for i in rng.permutation(len(locations))]
        # heaviest first; stable sort keeps the seeded order among equals
        locations.sort(key=lambda loc: -files_per_location[loc])
        load = [0] * fold_count
        for loc in locations:
            fold = int(np.argmin(load))
            assignments[loc] = fold
            load[fold] += files_per_location[loc]
        histograms[label] = load

    logger.info("fold plan: %d locations in %d folds", len(assignments), fold_count)
    return FoldPlan(fold_count, assignments, histograms)
