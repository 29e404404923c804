import numpy as np
import pandas as pd
import pytest

import _config
from _cli import _augment_methods, main
from _config import RunConfig
from _corpus import AudioClip, load_manifest, write_audio
from _data_utils import load_segment_store
from _errors import EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, UsageError

DESK = ['--set', 'dsp.sample_rate=8000']
TINY_NET = ['--set', 'stack.channels=2,2,2,2', '--set', 'stack.dense_units=4', '--set', 'fusion.units=8',
            '--set', 'train.max_epochs=1', '--set', 'train.batch_size=8']


@pytest.fixture
def runs_dir(tmp_path, monkeypatch):
    runs = tmp_path / 'runs'
    monkeypatch.setattr(_config, 'RUNS_DIR', runs)
    return runs


def synth(out, *extra):
    return main(['synth', '--out', str(out), '--seed', '3', '--no-check', *DESK,
                 '--set', 'synth.locations=4', '--set', 'synth.files_per_location=1',
                 '--set', 'synth.duration_s=3', *extra])


# --- argument handling ----------------------------------------------------

def test_missing_required_flag(capsys):
    assert main(['extract']) == EXIT_USAGE
    assert '--manifest' in capsys.readouterr().err


def test_unknown_override(tmp_path):
    assert main(['synth', '--out', str(tmp_path), '--set', 'no.such=1']) == EXIT_VALIDATION


@pytest.mark.parametrize('value, expected', [
    (None, None),
    ('all', 'stretch,shift,remix'),
    ('none', ''),
    ('shift, remix', 'shift,remix'),
])
def test_augment_methods(value, expected):
    assert _augment_methods(value) == expected


def test_augment_methods_rejects_unknown():
    with pytest.raises(UsageError):
        _augment_methods('stretch,reverb')


def test_status_without_runs(tmp_path, capsys):
    assert main(['status', '--runs-dir', str(tmp_path / 'absent')]) == EXIT_OK
    assert 'no runs yet' in capsys.readouterr().out


# --- commands -------------------------------------------------------------

def test_synth_and_describe(tmp_path, capsys):
    out = tmp_path / 'corpus'
    assert synth(out) == EXIT_OK
    metas = load_manifest(out / 'manifest.csv')
    assert len(metas) == 12
    cfg = RunConfig.load(out / 'config.txt')
    assert cfg.command == 'synth'
    assert cfg['synth.locations'] == 4
    capsys.readouterr()
    assert main(['describe', '--manifest', str(out / 'manifest.csv')]) == EXIT_OK
    assert 'events-long' in capsys.readouterr().out


def test_synth_refuses_existing_output(tmp_path):
    out = tmp_path / 'corpus'
    assert synth(out) == EXIT_OK
    assert synth(out) == EXIT_VALIDATION
    assert synth(out, '--force') == EXIT_OK


def test_synth_defaults_to_data_dir(tmp_path, monkeypatch):
    monkeypatch.setattr(_config, 'DATA_DIR', tmp_path / 'data')
    assert main(['synth', '--no-check', *DESK, '--set', 'synth.locations=4', '--set', 'synth.files_per_location=1',
                 '--set', 'synth.duration_s=1']) == EXIT_OK
    assert len(load_manifest(tmp_path / 'data' / 'synth' / 'manifest.csv')) == 12


def test_synth_rejects_unverifiable_corpus(tmp_path):
    # 3 s at 8 kHz is too short for the fft-8192 identifiability segment
    out = tmp_path / 'corpus'
    assert main(['synth', '--out', str(out), *DESK, '--set', 'synth.locations=4',
                 '--set', 'synth.files_per_location=1', '--set', 'synth.duration_s=3']) == EXIT_VALIDATION
    assert list(out.rglob('*.wav'))
    assert not (out / 'manifest.csv').exists()


def test_replay_reproduces_synth(tmp_path):
    out = tmp_path / 'corpus'
    assert synth(out) == EXIT_OK
    before = {p.name: p.read_bytes() for p in out.rglob('*.wav')}
    assert main(['replay', str(out / 'config.txt')]) == EXIT_OK
    assert {p.name: p.read_bytes() for p in out.rglob('*.wav')} == before


def test_augment_writes_variants(tmp_path):
    t = np.arange(16000) / 8000
    wav = write_audio(tmp_path / 'tone.wav', AudioClip(0.5 * np.sin(2 * np.pi * 440 * t), 8000))
    assert main(['augment', '--wav', str(wav), '--out', str(tmp_path / 'aug')]) == EXIT_OK
    for method in ('stretch', 'shift', 'ssr'):
        assert (tmp_path / 'aug' / f'tone_{method}.wav').exists()


def test_pipeline(tmp_path, runs_dir, capsys):
    corpus, store = tmp_path / 'corpus', tmp_path / 'store'
    assert synth(corpus) == EXIT_OK
    assert main(['extract', '--manifest', str(corpus / 'manifest.csv'), '--out', str(store),
                 '--resolutions', '256,512', '--segments', '2', '--augment', 'remix', *DESK]) == EXIT_OK
    segments = load_segment_store(store)
    assert segments.resolutions == [256, 512]
    # 12 files plus 6 place remixes per class (4 locations), two tuples each
    assert len(segments) == 2 * (12 + 3 * 6)
    assert set(segments.augmentation) == {'none', 'remix'}

    assert main(['train', '--segments', str(store), '--model', 'multires', *DESK, *TINY_NET]) == EXIT_OK
    run, = runs_dir.iterdir()
    assert run.name.startswith('train-')
    for name in ('config.txt', 'folds.csv', 'classes.csv', 'metrics_grouped.csv', 'history.svg'):
        assert (run / name).exists()
    assert len(list(run.glob('fold*.mrw'))) == 4
    folds = pd.read_csv(run / 'folds.csv')
    assert sorted(folds['fold'].value_counts().tolist()) == [3, 3, 3, 3]

    assert main(['eval', '--run', str(run), '--mode', 'raw']) == EXIT_OK
    raw = pd.read_csv(run / 'metrics_raw.csv')
    assert raw['fold'].tolist() == [0, 1, 2, 3]
    assert raw['raw_acc'].between(0, 1).all()
    assert raw['raw_acc_mean'].iloc[0] == pytest.approx(raw['raw_acc'].mean(), abs=1e-5)
    assert raw['raw_acc_std'].nunique() == 1

    report_dir = tmp_path / 'report'
    assert main(['report', '--runs', str(run), '--out', str(report_dir)]) == EXIT_OK
    table = pd.read_csv(report_dir / 'comparison.csv')
    assert table['model'].tolist() == ['multires']
    assert (report_dir / 'per_class.svg').exists()

    capsys.readouterr()
    assert main(['status', '--runs-dir', str(runs_dir)]) == EXIT_OK
    assert '✓ checkpoints (4)' in capsys.readouterr().out
