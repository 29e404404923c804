import struct

import numpy as np
import pytest

from _archmodel import MultiResConfig, build_multires
from _data_utils import (INDEX_COLUMNS, SegmentSet, decode_tensor, encode_tensor, load_checkpoint,
                         load_segment_store, main, read_index, read_tensor, save_checkpoint, save_segments,
                         verify_store, write_index, write_tensor)
from _dsp import extract_segments
from _errors import EXIT_OK, EXIT_VALIDATION, CorruptFileError, IncompleteStoreError, ValidationError
from _neuralcore import nadam_step
from conftest import TINY_STACK


def store_from(tmp_path, noise_clip, tiny_profiles, sources=('a.wav', 'b.wav')):
    rows = []
    for i, src in enumerate(sources):
        tuples = extract_segments(noise_clip, tiny_profiles, n_segments=3, seed=i, source=src,
                                  class_label=f'k{i}', location_id=f'loc{i}')
        rows += save_segments(tmp_path, tuples)
    write_index(tmp_path, rows)
    return rows


# --- MRT1 -----------------------------------------------------------------

def test_tensor_layout():
    buf = encode_tensor(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b'MRT1'
    assert struct.unpack('<III', buf[4:16]) == (2, 1, 3)
    assert len(buf) == 16 + 12
    arr, end = decode_tensor(buf)
    assert end == len(buf)
    assert arr.dtype == np.float32
    np.testing.assert_array_equal(arr, [[1.0, 2.0, 3.0]])


def test_tensor_file(tmp_path, rng):
    values = rng.normal(size=(2, 3, 4)).astype(np.float32)
    np.testing.assert_array_equal(read_tensor(write_tensor(tmp_path / 'x.mrt', values)), values)


@pytest.mark.parametrize('cut', [3, 10, 20])
def test_truncated_tensor(cut):
    buf = encode_tensor(np.ones((2, 3)))
    with pytest.raises(CorruptFileError):
        decode_tensor(buf[:-cut])


def test_trailing_bytes(tmp_path):
    path = tmp_path / 'x.mrt'
    path.write_bytes(encode_tensor(np.ones(3)) + b'\0')
    with pytest.raises(CorruptFileError):
        read_tensor(path)


def test_bad_magic():
    with pytest.raises(CorruptFileError):
        decode_tensor(b'MRT2' + bytes(8))


# --- segment store --------------------------------------------------------

def test_store_round_trip(tmp_path, noise_clip, tiny_profiles):
    store_from(tmp_path, noise_clip, tiny_profiles)
    segs = load_segment_store(tmp_path)
    assert len(segs) == 6
    assert segs.resolutions == [64, 128]
    assert segs.values[64].shape == (6, 8, 8)
    assert sorted(set(segs.sources)) == ['a.wav', 'b.wav']
    assert set(segs.augmentation) == {'none'}
    (seg64, seg128), = extract_segments(noise_clip, tiny_profiles, n_segments=3, seed=0)[:1]
    first = np.flatnonzero(segs.sources == 'a.wav')[0]
    np.testing.assert_allclose(segs.values[64][first], seg64.values, rtol=1e-6)
    np.testing.assert_allclose(segs.values[128][first], seg128.values, rtol=1e-6)
    assert segs.offsets[first] == seg64.offset_samples


def test_store_subset_of_resolutions(tmp_path, noise_clip, tiny_profiles):
    store_from(tmp_path, noise_clip, tiny_profiles)
    assert load_segment_store(tmp_path, [128]).resolutions == [128]


def test_missing_resolution_file_is_reported(tmp_path, noise_clip, tiny_profiles):
    store_from(tmp_path, noise_clip, tiny_profiles)
    index = read_index(tmp_path)
    drop = (index['resolution_fft'] == 128) & (index['source_path'] == 'b.wav')
    write_index(tmp_path, index[~drop].values.tolist())
    with pytest.raises(IncompleteStoreError) as e:
        load_segment_store(tmp_path)
    assert 'b.wav' in str(e.value)


def test_store_without_index(tmp_path):
    with pytest.raises(ValidationError):
        load_segment_store(tmp_path)


def test_index_columns(tmp_path, noise_clip, tiny_profiles):
    store_from(tmp_path, noise_clip, tiny_profiles)
    assert list(read_index(tmp_path).columns) == INDEX_COLUMNS


def test_verify_store(tmp_path, noise_clip, tiny_profiles, capsys):
    store_from(tmp_path, noise_clip, tiny_profiles)
    counts = verify_store(tmp_path, [64, 128, 256])
    assert counts == {64: 6, 128: 6}
    out = capsys.readouterr().out
    assert '✓ fft    64' in out
    assert '✗ fft   256' in out


def test_store_check_entry(tmp_path, noise_clip, tiny_profiles, capsys):
    store_from(tmp_path, noise_clip, tiny_profiles)
    assert main([str(tmp_path), '--resolutions', '64,128']) == EXIT_OK
    assert main([str(tmp_path), '--resolutions', '64,256']) == EXIT_VALIDATION
    assert main([str(tmp_path / 'absent')]) == EXIT_VALIDATION
    assert '✗' in capsys.readouterr().out


# --- segment sets ---------------------------------------------------------

def test_segment_set_rows_must_agree():
    with pytest.raises(ValidationError):
        SegmentSet({64: np.zeros((3, 2, 2))}, ['a', 'b'], ['s', 's'], ['l', 'l'], [0, 0])


def test_source_locations_and_subset():
    values = np.concatenate([np.zeros((2, 2, 2)), np.ones((1, 2, 2))])
    joined = SegmentSet({64: values}, ['a', 'a', 'b'], ['s1', 's1', 's2'], ['l1', 'l1', 'l2+l3'], [0, 5, 7],
                        ['none', 'none', 'remix'])
    assert joined.source_locations() == [['l1'], ['l1'], ['l2', 'l3']]
    sub = joined.subset(joined.augmentation == 'remix')
    assert sub.labels.tolist() == ['b']
    assert sub.values[64].sum() == 4
    assert len(joined.subset(np.zeros(3, dtype=bool))) == 0


# --- MRW1 -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    model = build_multires(MultiResConfig(resolutions=(64,), fusion_units=4, n_classes=2, stack=TINY_STACK))
    for _, p in model.parameters():
        p.grad = rng.normal(size=p.shape).astype(np.float32)
    nadam_step([p for _, p in model.parameters()], lr=1e-3)
    path = save_checkpoint(tmp_path / 'fold0.mrw', model.parameters())
    state = load_checkpoint(path)
    assert list(state) == [name for name, _ in model.parameters()]
    for name, p in model.parameters():
        value, m, v, t = state[name]
        np.testing.assert_array_equal(value, p.value)
        np.testing.assert_array_equal(m, p.m)
        np.testing.assert_array_equal(v, p.v)
        assert t == 1


def test_checkpoint_truncated(tmp_path):
    model = build_multires(MultiResConfig(resolutions=(64,), fusion_units=4, n_classes=2, stack=TINY_STACK))
    path = save_checkpoint(tmp_path / 'w.mrw', model.parameters())
    path.write_bytes(path.read_bytes()[:-2])
    with pytest.raises(CorruptFileError):
        load_checkpoint(path)


def test_checkpoint_magic(tmp_path):
    path = tmp_path / 'w.mrw'
    path.write_bytes(b'MRW0' + bytes(4))
    with pytest.raises(CorruptFileError):
        load_checkpoint(path)
