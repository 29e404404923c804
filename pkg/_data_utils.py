"""
Binary containers for segments and model weights.

MRT1 tensor: b"MRT1", u32 rank, rank x u32 dims, float32 cells (row-major).
MRW1 checkpoint: b"MRW1", u32 count, then per parameter: u32 name length,
UTF-8 name, MRT1 value, MRT1 first moment, MRT1 second moment, u32 step.
All integers and cells are little-endian.
"""
import argparse
import hashlib
import logging
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from _errors import EXIT_OK, EXIT_VALIDATION, CorruptFileError, IncompleteStoreError, ValidationError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b'MRT1'
WEIGHTS_MAGIC = b'MRW1'

INDEX_FILE = 'index.csv'
INDEX_COLUMNS = ['segment_path', 'source_path', 'class_label', 'location_id',
                 'resolution_fft', 'offset_samples', 'augmentation']


# --- MRT1 -----------------------------------------------------------------

def encode_tensor(values):
    arr = np.ascontiguousarray(values, dtype='<f4')
    head = TENSOR_MAGIC + struct.pack(f'<I{arr.ndim}I', arr.ndim, *arr.shape)
    return head + arr.tobytes(order='C')


def decode_tensor(buf, pos=0):
    """Decode one tensor at `pos`; returns (array, position after it)."""
    if buf[pos:pos + 4] != TENSOR_MAGIC:
        raise CorruptFileError(f"bad tensor magic at byte {pos}")
    if pos + 8 > len(buf):
        raise CorruptFileError("truncated tensor header")
    rank = struct.unpack_from('<I', buf, pos + 4)[0]
    pos += 8
    if pos + 4 * rank > len(buf):
        raise CorruptFileError("truncated tensor dims")
    dims = struct.unpack_from(f'<{rank}I', buf, pos)
    pos += 4 * rank
    n = int(np.prod(dims, dtype=np.int64))
    if pos + 4 * n > len(buf):
        raise CorruptFileError(f"tensor {dims} needs {4 * n} bytes, {len(buf) - pos} present")
    arr = np.frombuffer(buf, dtype='<f4', count=n, offset=pos).reshape(dims).astype(np.float32)
    return arr, pos + 4 * n


def write_tensor(path, values):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_tensor(values))
    return path


def read_tensor(path):
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise CorruptFileError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


# --- segment sets ---------------------------------------------------------

@dataclass
class SegmentSet:
    """
    Co-registered segment tuples as arrays: `values[fft]` is (N, mel, frames)
    and row i of every resolution belongs to the same tuple.
    """
    values: dict
    labels: np.ndarray
    sources: np.ndarray
    locations: np.ndarray
    offsets: np.ndarray
    augmentation: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.labels)
        if self.augmentation is None:
            self.augmentation = np.full(n, 'none', dtype=object)
        for name in ('labels', 'sources', 'locations', 'augmentation'):
            setattr(self, name, np.asarray(getattr(self, name), dtype=object))
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        for res, v in self.values.items():
            if len(v) != n:
                raise ValidationError(f"resolution {res} holds {len(v)} rows, labels {n}")

    def __len__(self):
        return len(self.labels)

    @property
    def resolutions(self):
        return sorted(self.values)

    def subset(self, rows):
        """Rows given as a boolean mask or index array."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return SegmentSet({r: v[rows] for r, v in self.values.items()},
                          self.labels[rows], self.sources[rows], self.locations[rows],
                          self.offsets[rows], self.augmentation[rows])

    def select(self, resolutions):
        missing = [r for r in resolutions if r not in self.values]
        if missing:
            raise ValidationError(f"segment set has no resolution {missing}")
        return SegmentSet({r: self.values[r] for r in resolutions}, self.labels,
                          self.sources, self.locations, self.offsets, self.augmentation)

    def with_values(self, values):
        return SegmentSet(values, self.labels, self.sources, self.locations,
                          self.offsets, self.augmentation)

    def source_locations(self):
        """Locations a row depends on; a place remix depends on two."""
        return [str(loc).split('+') for loc in self.locations]


# --- segment store --------------------------------------------------------

def segment_file(store_dir, source, augmentation, fft_size):
    key = hashlib.sha1(str(source).encode('utf-8')).hexdigest()[:16]
    return Path(store_dir) / str(fft_size) / f"{key}_{augmentation}.mrt"


def save_segments(store_dir, tuples):
    """
    Write the tuples of one (file, method) as one rank-3 tensor per
    resolution; returns the index rows describing them.
    """
    if not tuples:
        return []
    store_dir = Path(store_dir)
    head = tuples[0][0]
    rows = []
    for i, seg in enumerate(tuples[0]):
        fft = seg.resolution.fft_size
        path = segment_file(store_dir, head.source, head.augmentation, fft)
        write_tensor(path, np.stack([t[i].values for t in tuples]))
        rel = path.relative_to(store_dir).as_posix()
        rows += [[rel, str(t[i].source), t[i].class_label, t[i].location_id, fft,
                  t[i].offset_samples, t[i].augmentation] for t in tuples]
    return rows


def write_index(store_dir, rows):
    df = pd.DataFrame(rows, columns=INDEX_COLUMNS)
    path = Path(store_dir) / INDEX_FILE
    df.to_csv(path, index=False)
    return path


def read_index(store_dir):
    path = Path(store_dir) / INDEX_FILE
    if not path.exists():
        raise ValidationError(f"no segment index at {path}")
    df = pd.read_csv(path, dtype={'source_path': str, 'class_label': str, 'location_id': str,
                                  'augmentation': str, 'segment_path': str},
                     keep_default_na=False)
    if list(df.columns) != INDEX_COLUMNS:
        raise ValidationError(f"{path}: unexpected columns {list(df.columns)}")
    return df


def load_segment_store(store_dir, resolutions=None):
    """
    Load every tuple of the store as a SegmentSet. Each (source, method,
    offset, position) must be present at every requested resolution.
    """
    store_dir = Path(store_dir)
    df = read_index(store_dir)
    available = sorted(int(r) for r in df['resolution_fft'].unique())
    resolutions = [int(r) for r in (resolutions or available)]

    df = df.assign(position=df.groupby(['source_path', 'augmentation', 'resolution_fft']).cumcount())
    keys = ['source_path', 'augmentation', 'position']
    wide = df.pivot_table(index=keys, columns='resolution_fft', values='offset_samples', aggfunc='first')

    missing = []
    for res in resolutions:
        col = wide[res] if res in wide.columns else pd.Series(np.nan, index=wide.index)
        for src, aug, pos in col[col.isna()].index:
            missing.append(f"{src} [{aug}] #{pos} @ fft {res}")
    if missing:
        raise IncompleteStoreError(missing)
    # offsets must agree across resolutions within a tuple
    if wide[resolutions].nunique(axis=1).max() > 1:
        raise ValidationError(f"{store_dir}: tuples with differing offsets across resolutions")

    meta = (df[df['resolution_fft'] == resolutions[0]]
            .sort_values(['source_path', 'augmentation', 'position'], kind='stable'))
    tensors = {}
    values = {}
    for res in resolutions:
        part = df[df['resolution_fft'] == res].sort_values(
            ['source_path', 'augmentation', 'position'], kind='stable')
        blocks = []
        for seg_path, rows in part.groupby('segment_path', sort=False):
            if seg_path not in tensors:
                tensors[seg_path] = read_tensor(store_dir / seg_path)
            arr = tensors[seg_path]
            if len(arr) < rows['position'].max() + 1:
                raise CorruptFileError(f"{seg_path}: holds {len(arr)} segments, index expects more")
            blocks.append(arr[rows['position'].to_numpy()])
        values[res] = np.concatenate(blocks)
        tensors.clear()

    logger.info("loaded %d tuples x %d resolutions from %s", len(meta), len(resolutions), store_dir)
    return SegmentSet(values, meta['class_label'].to_numpy(), meta['source_path'].to_numpy(),
                      meta['location_id'].to_numpy(), meta['offset_samples'].to_numpy(),
                      meta['augmentation'].to_numpy())


def verify_store(store_dir, resolutions=None):
    """Print per-resolution availability of a segment store."""
    store_dir = Path(store_dir)
    print(f"\n{'='*60}")
    print(f"Segment store: {store_dir}")
    print(f"{'='*60}")
    try:
        df = read_index(store_dir)
    except ValidationError as e:
        print(f"✗ {e}")
        return {}
    counts = df.groupby('resolution_fft').size().to_dict()
    for res in resolutions or sorted(counts):
        n = counts.get(int(res), 0)
        mark = '✓' if n else '✗'
        print(f"{mark} fft {int(res):5d}: {n} segments")
    methods = df.drop_duplicates(['source_path', 'augmentation'])['augmentation'].value_counts()
    for method, n in methods.items():
        print(f"  {method:8s}: {n} files")
    return counts


# --- MRW1 checkpoints -----------------------------------------------------

def save_checkpoint(path, named_params):
    """`named_params` is an iterable of (name, Parameter)."""
    named_params = list(named_params)
    out = [WEIGHTS_MAGIC, struct.pack('<I', len(named_params))]
    for name, p in named_params:
        raw = name.encode('utf-8')
        out += [struct.pack('<I', len(raw)), raw,
                encode_tensor(p.value), encode_tensor(p.m), encode_tensor(p.v),
                struct.pack('<I', int(p.t))]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b''.join(out))
    return path


def load_checkpoint(path):
    """Returns {name: (value, m, v, t)} in file order."""
    buf = Path(path).read_bytes()
    if buf[:4] != WEIGHTS_MAGIC:
        raise CorruptFileError(f"{path}: not an MRW1 checkpoint")
    try:
        count = struct.unpack_from('<I', buf, 4)[0]
        pos, state = 8, {}
        for _ in range(count):
            n = struct.unpack_from('<I', buf, pos)[0]
            name = buf[pos + 4:pos + 4 + n].decode('utf-8')
            pos += 4 + n
            value, pos = decode_tensor(buf, pos)
            m, pos = decode_tensor(buf, pos)
            v, pos = decode_tensor(buf, pos)
            t = struct.unpack_from('<I', buf, pos)[0]
            pos += 4
            state[name] = (value, m, v, t)
    except struct.error as e:
        raise CorruptFileError(f"{path}: truncated checkpoint ({e})")
    if pos != len(buf):
        raise CorruptFileError(f"{path}: {len(buf) - pos} trailing bytes")
    return state


def main(argv=None):
    parser = argparse.ArgumentParser(description='Check a segment store')
    parser.add_argument('store')
    parser.add_argument('--resolutions', help='comma-separated fft sizes that must be present')
    args = parser.parse_args(argv)
    wanted = [int(r) for r in args.resolutions.split(',') if r.strip()] if args.resolutions else None
    counts = verify_store(args.store, wanted)
    complete = bool(counts) and all(counts.get(r, 0) for r in wanted or counts)
    return EXIT_OK if complete else EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
