import numpy as np
import pandas as pd
import pytest

from _archmodel import MultiResConfig, build_multires
from _corpus import FoldPlan
from _data_utils import SegmentSet
from _errors import ConfigurationError, TrainingDivergedError, ValidationError
from _trainer import (MetricsReport, TrainConfig, ensemble_grouped_single, ensemble_probs, evaluate_grouped,
                      evaluate_raw, fold_sets, grouped_predictions, parse_model_key, reduce_lr, run_label,
                      train)
from conftest import TINY_STACK

CLASSES = ['a', 'b', 'c']


def meta_set(labels, sources, locations=None, augmentation=None, values=None):
    n = len(labels)
    return SegmentSet(values or {}, labels, sources, locations or ['x'] * n, np.zeros(n), augmentation)


def single_res_model(seed=0, n_classes=2):
    return build_multires(MultiResConfig(resolutions=(64,), fusion_units=16, n_classes=n_classes,
                                         stack=TINY_STACK), seed=seed)


def separable(n, seed):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = np.where(y[:, None, None] == 0, 2.0, -2.0) + 0.1 * rng.normal(size=(n, 8, 8))
    labels = np.where(y == 0, 'pos', 'neg')
    return SegmentSet({64: x.astype(np.float32)}, labels, [f'f{i}' for i in range(n)], ['l'] * n, np.zeros(n))


# --- learning-rate schedule -----------------------------------------------

@pytest.mark.parametrize('k', range(10))
def test_plateau_reductions(k):
    lr = reduce_lr([1.0] * (1 + 3 * k), TrainConfig())
    assert lr == pytest.approx(max(1e-5 * 0.9 ** k, 5e-6))


def test_reduction_floors_at_minimum():
    cfg = TrainConfig(lr0=5.2e-6)
    assert reduce_lr([1.0, 1.0, 1.0, 1.0], cfg) == 5e-6


def test_improving_history_keeps_rate():
    assert reduce_lr(list(np.linspace(2.0, 1.0, 20)), TrainConfig()) == 1e-5


def test_improvement_resets_wait():
    assert reduce_lr([1.0, 1.0, 1.0, 0.5, 0.5, 0.5], TrainConfig()) == 1e-5


def test_history_frame_accepted():
    history = pd.DataFrame({'val_loss': [1.0, 1.0, 1.0, 1.0]})
    assert reduce_lr(history, TrainConfig()) == pytest.approx(9e-6)


def test_empty_history():
    with pytest.raises(ValidationError):
        reduce_lr([], TrainConfig())


def test_train_config_checks():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr0=1e-6, lr_min=5e-6)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_decay=1.0)


# --- evaluation -----------------------------------------------------------

def test_grouped_mean_decides_file():
    probs = np.array([[0.6, 0.4], [0.2, 0.8]])
    files, mean = grouped_predictions(probs, ['f', 'f'], ['b', 'b'], ['a', 'b'])
    np.testing.assert_allclose(mean, [[0.4, 0.6]])
    assert files['pred'].tolist() == [1]
    assert files['true'].tolist() == [1]


def test_grouped_three_files():
    probs = np.array([[0.7, 0.2, 0.1], [0.3, 0.5, 0.2],   # f1 -> a
                      [0.1, 0.1, 0.8], [0.3, 0.3, 0.4],   # f2 -> c
                      [0.6, 0.4, 0.0], [0.2, 0.8, 0.0]])  # f3 -> b
    segs = meta_set(['a', 'a', 'c', 'c', 'b', 'b'], ['f1', 'f1', 'f2', 'f2', 'f3', 'f3'])
    assert evaluate_grouped(None, segs, CLASSES, probs=probs) == 1.0
    raw, cm = evaluate_raw(None, segs, CLASSES, probs=probs)
    assert raw == pytest.approx(4 / 6)
    assert cm.sum() == 6 and np.trace(cm) == 4


def test_grouped_is_permutation_invariant(rng):
    probs = rng.dirichlet(np.ones(3), size=12)
    sources = [f'f{i % 4}' for i in range(12)]
    labels = [CLASSES[i % 4 % 3] for i in range(12)]
    perm = rng.permutation(12)
    a = evaluate_grouped(None, meta_set(labels, sources), CLASSES, probs=probs)
    b = evaluate_grouped(None, meta_set([labels[i] for i in perm], [sources[i] for i in perm]),
                         CLASSES, probs=probs[perm])
    assert a == b


def test_one_segment_per_file_grouped_equals_raw(rng):
    probs = rng.dirichlet(np.ones(3), size=9)
    segs = meta_set([CLASSES[i % 3] for i in range(9)], [f'f{i}' for i in range(9)])
    raw, _ = evaluate_raw(None, segs, CLASSES, probs=probs)
    assert evaluate_grouped(None, segs, CLASSES, probs=probs) == raw


def test_ensemble_of_identical_models_equals_single():
    segs = separable(6, seed=1)
    a, b = single_res_model(seed=3), single_res_model(seed=3)
    np.testing.assert_allclose(ensemble_probs({'x': a, 'y': b}, segs),
                               a.predict({64: segs.values[64]}), rtol=1e-6)
    classes = ['neg', 'pos']
    assert ensemble_grouped_single({'x': a, 'y': b}, segs, classes) == evaluate_grouped(a, segs, classes)


def test_ensemble_needs_shared_folds():
    segs = separable(4, seed=1)
    a, b = single_res_model(), single_res_model()
    a.fold_signature, b.fold_signature = 'a:0;b:1', 'a:1;b:0'
    with pytest.raises(ConfigurationError):
        ensemble_probs({'x': a, 'y': b}, segs)


def test_metrics_summary():
    report = MetricsReport(['a', 'b'])
    segs = meta_set(['a', 'b'], ['f1', 'f2'])
    report.add_fold(0, 'single:512', np.array([[0.9, 0.1], [0.2, 0.8]]), segs)
    report.add_fold(1, 'single:512', np.array([[0.9, 0.1], [0.7, 0.3]]), segs)
    summary = report.summary()
    assert summary['fold'].tolist() == [0, 1]
    assert summary['raw_acc'].tolist() == [1.0, 0.5]
    assert summary['raw_acc_mean'].tolist() == pytest.approx([0.75, 0.75])
    assert summary['grouped_acc_std'].tolist() == pytest.approx([np.std([1.0, 0.5], ddof=1)] * 2)
    assert report.confusion_frame().to_numpy().tolist() == [[2, 0], [1, 1]]
    per_class = report.per_class_frame().set_index('class_label')
    assert per_class.loc['b', 'raw_acc'] == 0.5


def test_metrics_write(tmp_path):
    report = MetricsReport(['a', 'b'])
    report.add_fold(0, 'multires', np.array([[0.9, 0.1], [0.2, 0.8]]), meta_set(['a', 'b'], ['f1', 'f2']))
    paths = report.write(tmp_path, 'grouped')
    assert paths['metrics'].name == 'metrics_grouped.csv'
    frame = pd.read_csv(paths['metrics'])
    assert list(frame.columns) == ['fold', 'model', 'raw_acc', 'grouped_acc', 'raw_acc_mean', 'raw_acc_std',
                                   'grouped_acc_mean', 'grouped_acc_std']
    assert frame['fold'].tolist() == [0]
    assert frame['raw_acc_std'].tolist() == [0.0]


# --- training -------------------------------------------------------------

def toy_config(**kw):
    return TrainConfig(**{'lr0': 1e-2, 'lr_min': 1e-3, 'batch_size': 8, 'max_epochs': 30, 'seed': 5, **kw})


def test_learns_separable_toy():
    classes = ['neg', 'pos']
    model, history = train(single_res_model(), separable(40, 0), separable(20, 1), toy_config(), classes)
    assert list(history.columns) == ['epoch', 'train_loss', 'val_loss', 'lr']
    assert len(history) <= 30
    first = history['train_loss'].iloc[:5].to_numpy()
    assert (np.diff(first) < 0).all()
    acc, _ = evaluate_raw(model, separable(20, 2), classes)
    assert acc == 1.0


def test_training_is_deterministic():
    classes = ['neg', 'pos']
    cfg = toy_config(max_epochs=3)
    m1, h1 = train(single_res_model(), separable(16, 0), separable(8, 1), cfg, classes)
    m2, h2 = train(single_res_model(), separable(16, 0), separable(8, 1), cfg, classes)
    pd.testing.assert_frame_equal(h1, h2)
    for (_, p), (_, q) in zip(m1.parameters(), m2.parameters()):
        np.testing.assert_array_equal(p.value, q.value)


def test_history_lr_follows_plateau_rule():
    # a tolerance no epoch can beat makes every epoch after the first a plateau
    cfg = toy_config(plateau_epochs=1, plateau_tol=10.0, max_epochs=6)
    _, history = train(single_res_model(), separable(16, 0), separable(8, 1), cfg, ['neg', 'pos'])
    val = history['val_loss'].tolist()
    expected = [cfg.lr0] + [reduce_lr(val[:e], cfg) for e in range(1, len(val))]
    assert history['lr'].tolist() == pytest.approx(expected)
    assert expected[:3] == pytest.approx([1e-2, 1e-2, 9e-3])
    assert (np.diff(history['lr'].iloc[1:]) < 0).all()


def test_divergence_names_layer():
    model = single_res_model()
    model.head.layers[-1][1].weight.value[0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as e:
        train(model, separable(8, 0), separable(4, 1), toy_config(max_epochs=1), ['neg', 'pos'])
    assert e.value.epoch == 1
    assert 'head.out' in str(e.value)


def test_empty_sets_rejected():
    with pytest.raises(ValidationError):
        train(single_res_model(), separable(4, 0).subset(np.zeros(4, dtype=bool)), separable(4, 1),
              toy_config(), ['neg', 'pos'])


# --- folds and model keys -------------------------------------------------

def test_fold_sets_keep_augmented_rows_in_training():
    plan = FoldPlan(4, {'a': 0, 'b': 1, 'c': 2, 'd': 3})
    locations = ['a', 'b', 'c', 'd', 'a', 'b+c', 'a+b', 'c']
    augmentation = ['none'] * 4 + ['stretch', 'remix', 'remix', 'shift']
    segs = meta_set(['k'] * 8, [f's{i}' for i in range(8)], locations, augmentation)
    train_set, val_set, test_set = fold_sets(segs, plan, test_fold=3)
    assert sorted(train_set.sources) == ['s1', 's2', 's5', 's7']
    assert val_set.sources.tolist() == ['s0']
    assert test_set.sources.tolist() == ['s3']


@pytest.mark.parametrize('key, expected', [
    ('multires', [512, 1024, 2048]),
    ('single:1024', [1024]),
])
def test_parse_model_key(key, expected):
    assert parse_model_key(key, [2048, 512, 1024]) == expected


@pytest.mark.parametrize('key', ['single:4096', 'single:x', 'cnn'])
def test_parse_model_key_rejects(key):
    with pytest.raises(ConfigurationError):
        parse_model_key(key, [512, 1024])


def test_run_label():
    assert run_label('multires', [512, 1024], 1) == 'multires_do'
    assert run_label('multires', [512, 1024], 0) == 'multires'
    assert run_label('single:512', [512], 1) == 'single:512'
