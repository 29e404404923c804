import io
from collections import Counter

import numpy as np
import pytest
from scipy.io import wavfile

from _config import TABLE1_LOCATIONS
from _corpus import (AudioClip, FoldPlan, RecordingMeta, grouped_stratified_folds, load_manifest,
                     normalize_peak, read_audio, write_audio, write_manifest)
from _errors import (CorruptFileError, InfeasibleFoldsError, LabelError, ManifestParseError,
                     UnsupportedFormatError, ValidationError)
from conftest import make_metas

HEADER = 'path,class_label,location_id,duration_s\n'


# --- manifest -------------------------------------------------------------

def test_manifest_two_rows():
    metas = load_manifest(io.StringIO(HEADER + 'a.wav,beach,b1,10.0\nb.wav,bus,u1,9.5\n'))
    assert [m.path for m in metas] == ['a.wav', 'b.wav']
    assert metas[1] == RecordingMeta('b.wav', 'bus', 'u1', 9.5)


def test_manifest_header_only_is_empty():
    assert load_manifest(io.StringIO(HEADER)) == []


def test_manifest_bad_duration_names_line():
    with pytest.raises(ManifestParseError) as e:
        load_manifest(io.StringIO(HEADER + 'a.wav,beach,b1,10\nb.wav,beach,b1,abc\n'))
    assert e.value.line == 3
    assert 'line 3' in str(e.value)


def test_manifest_duplicate_path():
    with pytest.raises(ManifestParseError):
        load_manifest(io.StringIO(HEADER + 'a.wav,beach,b1,10\na.wav,beach,b1,10\n'))


def test_manifest_location_in_two_classes():
    with pytest.raises(ManifestParseError):
        load_manifest(io.StringIO(HEADER + 'a.wav,beach,x,10\nb.wav,bus,x,10\n'))


def test_manifest_label_whitelist():
    with pytest.raises(LabelError):
        load_manifest(io.StringIO(HEADER + 'a.wav,beach,b1,10\n'), labels=['bus'])


def test_manifest_wrong_header():
    with pytest.raises(ManifestParseError):
        load_manifest(io.StringIO('file,label\na.wav,beach\n'))


def test_manifest_write_then_load(tmp_path):
    metas = make_metas(2, 2, 2)
    path = write_manifest(metas, tmp_path / 'manifest.csv')
    assert load_manifest(path) == metas


# --- WAV I/O --------------------------------------------------------------

def test_read_pcm16_scaling(tmp_path):
    path = tmp_path / 'one.wav'
    wavfile.write(path, 8000, np.array([16384, -32768, 0], dtype=np.int16))
    clip = read_audio(path)
    assert clip.samples[0] == 0.5
    assert clip.samples[1] == -1.0
    assert clip.sample_rate == 8000


def test_read_stereo_downmix(tmp_path):
    path = tmp_path / 'stereo.wav'
    wavfile.write(path, 8000, np.array([[0.2, 0.6], [0.0, -0.5]], dtype=np.float32))
    clip = read_audio(path)
    assert clip.samples[0] == pytest.approx(0.4, abs=1e-7)
    assert clip.samples[1] == pytest.approx(-0.25, abs=1e-7)


def test_duration_from_sample_count(tmp_path):
    path = tmp_path / 'long.wav'
    wavfile.write(path, 44100, np.zeros(441000, dtype=np.int16))
    assert read_audio(path).duration_s == 10.0


def test_float32_round_trip_is_exact(tmp_path, rng):
    samples = rng.uniform(-1, 1, 1000).astype(np.float32)
    path = write_audio(tmp_path / 'f.wav', AudioClip(samples, 16000))
    back = read_audio(path)
    assert np.array_equal(back.samples.astype(np.float32), samples)


def test_unsupported_codec(tmp_path):
    path = tmp_path / 'pcm32.wav'
    wavfile.write(path, 8000, np.zeros(10, dtype=np.int32))
    with pytest.raises(UnsupportedFormatError):
        read_audio(path)


def test_not_a_wav(tmp_path):
    path = tmp_path / 'x.wav'
    path.write_bytes(b'hello world, definitely not riff')
    with pytest.raises(UnsupportedFormatError):
        read_audio(path)


def test_truncated_data_chunk(tmp_path):
    path = tmp_path / 'cut.wav'
    wavfile.write(path, 8000, np.zeros(100, dtype=np.int16))
    path.write_bytes(path.read_bytes()[:-50])
    with pytest.raises(CorruptFileError):
        read_audio(path)


# --- normalization --------------------------------------------------------

@pytest.mark.parametrize('samples, expected', [
    ([0.5, -0.25], [1.0, -0.5]),
    ([-2.0, 1.0], [-1.0, 0.5]),
    ([0.0, 0.0], [0.0, 0.0]),
])
def test_normalize_peak(samples, expected):
    out = normalize_peak(AudioClip(samples, 8000))
    np.testing.assert_allclose(out.samples, expected)


def test_clip_rejects_empty_and_nan():
    with pytest.raises(ValueError):
        AudioClip([], 8000)
    with pytest.raises(ValueError):
        AudioClip([0.1, np.nan], 8000)


# --- folds ----------------------------------------------------------------

def test_one_location_per_class_per_fold():
    plan = grouped_stratified_folds(make_metas(2, 4, 1), fold_count=4, seed=3)
    for fold in range(4):
        locs = plan.locations_in(fold)
        assert sorted(l.split('-')[0] for l in locs) == ['c0', 'c1']


def test_folds_deterministic():
    metas = make_metas(3, 6, 2)
    a = grouped_stratified_folds(metas, 4, seed=11)
    b = grouped_stratified_folds(metas, 4, seed=11)
    assert a.assignments == b.assignments


def test_infeasible_class_is_named():
    metas = make_metas(2, [5, 3], 1)
    with pytest.raises(InfeasibleFoldsError) as e:
        grouped_stratified_folds(metas, 4)
    assert e.value.class_label == 'class1'


def test_fold_count_below_two():
    with pytest.raises(ValidationError):
        grouped_stratified_folds(make_metas(2, 4, 1), fold_count=1)


def test_no_location_leakage_over_many_seeds():
    metas = make_metas(3, [5, 6, 7], 2)
    for seed in range(1000):
        plan = grouped_stratified_folds(metas, 4, seed=seed)
        assert set(plan.assignments) == {m.location_id for m in metas}
        for test_fold in range(4):
            train, val, test = plan.split(test_fold)
            assert not (train & val) and not (train & test) and not (val & test)
            assert train | val | test == set(plan.assignments)


def test_table1_shape_spread():
    rng = np.random.default_rng(5)
    metas = []
    for c, (label, n_loc) in enumerate(sorted(TABLE1_LOCATIONS.items())):
        for l in range(n_loc):
            for f in range(int(rng.integers(1, 3))):
                metas.append(RecordingMeta(f"{c}/{l}_{f}.wav", label, f"{label}-{l}", 10.0))
    plan = grouped_stratified_folds(metas, 4, seed=0)
    for label in TABLE1_LOCATIONS:
        per_fold = Counter(plan.fold_of(m.location_id) for m in metas if m.class_label == label)
        counts = [per_fold.get(f, 0) for f in range(4)]
        assert max(counts) - min(counts) <= 2
        assert counts == plan.class_histograms[label]


def test_split_rejects_validation_equal_test():
    plan = FoldPlan(4, {'a': 0, 'b': 1, 'c': 2, 'd': 3})
    with pytest.raises(ValidationError):
        plan.split(0, validation_offset=4)
    train, val, test = plan.split(3)
    assert test == {'d'} and val == {'a'} and train == {'b', 'c'}
