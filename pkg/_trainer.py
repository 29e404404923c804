"""
Training loop with the validation-plateau learning-rate schedule, raw
(per segment tuple) and grouped (per file) evaluation, the grouped-single
ensemble, and the per-fold cross-validation driver.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from _archmodel import build_multires, multires_config_from
from _augment import NoiseSpec, apply_noise
from _config import DEFAULTS, RunConfig, derive_seed
from _corpus import FoldPlan
from _data_utils import load_checkpoint, load_segment_store, save_checkpoint
from _dsp import Standardizer
from _errors import ConfigurationError, InputError, TrainingDivergedError, ValidationError
from _neuralcore import nadam_step, softmax_xent, zero_grads

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ['epoch', 'train_loss', 'val_loss', 'lr']
METRICS_COLUMNS = ['fold', 'model', 'raw_acc', 'grouped_acc']
SUMMARY_COLUMNS = METRICS_COLUMNS + ['raw_acc_mean', 'raw_acc_std', 'grouped_acc_mean', 'grouped_acc_std']


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = DEFAULTS['train.lr0']
    lr_min: float = DEFAULTS['train.lr_min']
    lr_decay: float = DEFAULTS['train.lr_decay']
    plateau_epochs: int = DEFAULTS['train.plateau_epochs']
    plateau_tol: float = DEFAULTS['train.plateau_tol']
    batch_size: int = DEFAULTS['train.batch_size']
    max_epochs: int = DEFAULTS['train.max_epochs']
    early_stop_epochs: int = DEFAULTS['train.early_stop_epochs']
    seed: int = DEFAULTS['seed']

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr0:
            raise ConfigurationError(f"need 0 < lr_min <= lr0, got {self.lr_min} / {self.lr0}")
        if not 0 < self.lr_decay < 1:
            raise ConfigurationError(f"lr_decay must lie in (0, 1), got {self.lr_decay}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.plateau_epochs < 1:
            raise ConfigurationError("batch_size, max_epochs and plateau_epochs must be >= 1")

    @classmethod
    def from_run_config(cls, cfg):
        return cls(**{k: cfg[f'train.{k}'] for k in
                      ('lr0', 'lr_min', 'lr_decay', 'plateau_epochs', 'plateau_tol',
                       'batch_size', 'max_epochs', 'early_stop_epochs')},
                   seed=cfg.seed)


def _val_losses(history):
    if isinstance(history, pd.DataFrame):
        return history['val_loss'].tolist()
    return [h['val_loss'] if isinstance(h, dict) else float(h) for h in history]


def reduce_lr(history, cfg):
    """
    Learning rate for the next epoch, replaying the whole validation history:
    `plateau_epochs` epochs without improvement shrink the rate by `lr_decay`,
    never below `lr_min`; the wait counter resets on improvement and on reduction.
    """
    losses = _val_losses(history)
    if not losses:
        raise ValidationError("reduce_lr needs at least one completed epoch")
    lr, best, wait = cfg.lr0, np.inf, 0
    for loss in losses:
        if loss < best - cfg.plateau_tol:
            best, wait = loss, 0
            continue
        wait += 1
        if wait >= cfg.plateau_epochs:
            lr, wait = max(lr * cfg.lr_decay, cfg.lr_min), 0
    return lr


def class_indices(labels, classes):
    lookup = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([lookup[l] for l in labels], dtype=np.int64)
    except KeyError as e:
        raise ValidationError(f"label {e} not among the run's classes")


def _inputs(model, segments, rows=None):
    if rows is None:
        return {r: segments.values[r] for r in model.resolutions}
    return {r: segments.values[r][rows] for r in model.resolutions}


def _missing_resolutions(model, segments):
    return [r for r in model.resolutions if r not in segments.values]


def mean_loss(model, segments, classes, batch_size=64):
    y = class_indices(segments.labels, classes)
    total = 0.0
    for start in range(0, len(segments), batch_size):
        rows = np.arange(start, min(start + batch_size, len(segments)))
        loss, _, _ = softmax_xent(model.forward(_inputs(model, segments, rows), training=False), y[rows])
        total += loss * len(rows)
    return total / len(segments)


def _snapshot(model):
    return {name: (v.copy(), m.copy(), s.copy(), t) for name, (v, m, s, t) in model.state_dict().items()}


def train(model, train_set, val_set, cfg, classes, noise=None):
    """
    Mini-batch Nadam training; returns (model restored to its best
    validation loss, history DataFrame).
    """
    noise = noise or NoiseSpec(0.0)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValidationError("training and validation sets must be non-empty")
    for s in (train_set, val_set):
        if _missing_resolutions(model, s):
            raise InputError(f"segment set lacks resolutions {_missing_resolutions(model, s)}")

    y = class_indices(train_set.labels, classes)
    params = [p for _, p in model.parameters()]
    n = len(train_set)
    lr, best_val, best_state = cfg.lr0, np.inf, None
    stale_at_min, rows = 0, []

    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng(derive_seed(cfg.seed, 'epoch', epoch)).permutation(n)
        total = 0.0
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            xb = {r: apply_noise(train_set.values[r][idx], noise,
                                 seed=derive_seed(cfg.seed, 'noise', epoch, batch, r), training=True)
                  for r in model.resolutions}
            zero_grads(model.parameters())
            loss, _, dlogits = softmax_xent(model.forward(xb, training=True), y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, batch, model.first_nonfinite(xb) or 'loss')
            model.backward(dlogits)
            nadam_step(params, lr=lr)
            total += loss * len(idx)

        val_loss = mean_loss(model, val_set, classes)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(epoch, 'validation', model.first_nonfinite(_inputs(model, val_set)) or 'loss')
        rows.append((epoch, total / n, val_loss, lr))
        logger.info("epoch %3d  train %.4f  val %.4f  lr %.3g", epoch, total / n, val_loss, lr)

        if val_loss < best_val - cfg.plateau_tol:
            best_val, best_state, stale_at_min = val_loss, _snapshot(model), 0
        elif lr <= cfg.lr_min:
            stale_at_min += 1
            if stale_at_min >= cfg.early_stop_epochs:
                logger.info("early stop after %d stagnant epochs at the minimum rate", stale_at_min)
                break
        lr = reduce_lr([r[2] for r in rows], cfg)

    if best_state is not None:
        model.load_state(best_state)
    return model, pd.DataFrame(rows, columns=HISTORY_COLUMNS)


# --- evaluation -----------------------------------------------------------

def predict_segments(model, segments, batch_size=64):
    if len(segments) == 0:
        raise InputError("cannot evaluate an empty segment set")
    return model.predict(_inputs(model, segments), batch_size=batch_size)


def confusion_matrix(true, pred, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def evaluate_raw(model, segments, classes, probs=None):
    """Per-tuple accuracy and confusion matrix (rows: true class)."""
    probs = predict_segments(model, segments) if probs is None else probs
    if len(probs) == 0:
        raise InputError("cannot evaluate an empty segment set")
    true = class_indices(segments.labels, classes)
    pred = np.argmax(probs, axis=1)
    return float(np.mean(pred == true)), confusion_matrix(true, pred, len(classes))


def grouped_predictions(probs, sources, labels, classes):
    """Per file: mean softmax over its segments, true and predicted class."""
    df = pd.DataFrame(np.asarray(probs, dtype=np.float64))
    df['source'] = np.asarray(sources, dtype=object)
    mean = df.groupby('source', sort=True).mean()
    first_label = pd.Series(np.asarray(labels, dtype=object)).groupby(df['source'].to_numpy()).first()
    out = pd.DataFrame({'source': mean.index,
                        'true': class_indices(first_label.loc[mean.index], classes),
                        'pred': np.argmax(mean.to_numpy(), axis=1)})
    return out, mean.to_numpy()


def evaluate_grouped(model, segments, classes, probs=None):
    probs = predict_segments(model, segments) if probs is None else probs
    files, _ = grouped_predictions(probs, segments.sources, segments.labels, classes)
    return float(np.mean(files['true'] == files['pred']))


def ensemble_probs(models, segments):
    """Mean over single-resolution models of their per-tuple softmax."""
    signatures = {m.fold_signature for m in models.values()}
    if len(signatures) > 1:
        raise ConfigurationError("ensemble members were trained on different fold plans")
    return np.mean([predict_segments(m, segments) for _, m in sorted(models.items())], axis=0)


def ensemble_grouped_single(models, segments, classes):
    probs = ensemble_probs(models, segments)
    files, _ = grouped_predictions(probs, segments.sources, segments.labels, classes)
    return float(np.mean(files['true'] == files['pred']))


def per_class_accuracy(true, pred, classes):
    true, pred = np.asarray(true), np.asarray(pred)
    return {c: (float(np.mean(pred[true == i] == i)) if np.any(true == i) else np.nan)
            for i, c in enumerate(classes)}


@dataclass
class MetricsReport:
    classes: list
    rows: list = field(default_factory=list)
    per_class: list = field(default_factory=list)
    confusion: np.ndarray = None

    def add_fold(self, fold, model_key, probs, segments):
        raw_acc, raw_cm = evaluate_raw(None, segments, self.classes, probs=probs)
        files, _ = grouped_predictions(probs, segments.sources, segments.labels, self.classes)
        grouped_acc = float(np.mean(files['true'] == files['pred']))
        for acc in (raw_acc, grouped_acc):
            if not 0.0 <= acc <= 1.0:
                raise ValidationError(f"accuracy {acc} outside [0, 1]")
        self.rows.append((fold, model_key, raw_acc, grouped_acc))
        true = class_indices(segments.labels, self.classes)
        raw_pc = per_class_accuracy(true, np.argmax(probs, axis=1), self.classes)
        grp_pc = per_class_accuracy(files['true'], files['pred'], self.classes)
        self.per_class += [(fold, model_key, c, raw_pc[c], grp_pc[c]) for c in self.classes]
        grp_cm = confusion_matrix(files['true'].to_numpy(), files['pred'].to_numpy(), len(self.classes))
        self.confusion = (raw_cm, grp_cm) if self.confusion is None else (
            self.confusion[0] + raw_cm, self.confusion[1] + grp_cm)
        return raw_acc, grouped_acc

    def folds_frame(self):
        return pd.DataFrame(self.rows, columns=METRICS_COLUMNS)

    def summary(self):
        """Per-fold rows with the model's fold mean and sample std as columns."""
        df = self.folds_frame()
        by_model = df.groupby('model', sort=False)
        for col in ('raw_acc', 'grouped_acc'):
            df[f'{col}_mean'] = by_model[col].transform('mean')
            df[f'{col}_std'] = by_model[col].transform('std').fillna(0.0)
        return df[SUMMARY_COLUMNS]

    def per_class_frame(self):
        df = pd.DataFrame(self.per_class, columns=['fold', 'model', 'class_label', 'raw_acc', 'grouped_acc'])
        return df.groupby(['model', 'class_label'], sort=False)[['raw_acc', 'grouped_acc']].mean().reset_index()

    def confusion_frame(self, grouped=False):
        cm = self.confusion[1 if grouped else 0]
        return pd.DataFrame(cm, index=pd.Index(self.classes, name='true'), columns=self.classes)

    def write(self, run_dir, mode):
        run_dir = Path(run_dir)
        paths = {
            'metrics': run_dir / f'metrics_{mode}.csv',
            'per_class': run_dir / f'per_class_{mode}.csv',
            'confusion': run_dir / f'confusion_{mode}.csv',
        }
        self.summary().to_csv(paths['metrics'], index=False, float_format='%.6f')
        self.per_class_frame().to_csv(paths['per_class'], index=False, float_format='%.6f')
        self.confusion_frame(grouped=mode != 'raw').to_csv(paths['confusion'])
        return paths


# --- cross-validation -----------------------------------------------------

def fold_sets(segments, plan, test_fold, validation_offset=1):
    """
    (train, validation, test) for one outer fold. Augmented rows go to
    training only, and only when every location they were made from trains.
    """
    train_locs, val_locs, test_locs = plan.split(test_fold, validation_offset)
    origins = segments.source_locations()
    original = segments.augmentation == 'none'
    in_train = np.array([all(l in train_locs for l in locs) for locs in origins])
    in_val = original & np.isin(segments.locations, list(val_locs))
    in_test = original & np.isin(segments.locations, list(test_locs))
    return segments.subset(in_train), segments.subset(in_val), segments.subset(in_test)


def parse_model_key(key, available):
    """`multires` / `single:<fft>` -> list of resolutions."""
    if key == 'multires':
        return sorted(available)
    if key.startswith('single:'):
        try:
            fft = int(key.split(':', 1)[1])
        except ValueError:
            raise ConfigurationError(f"bad model key '{key}'")
        if fft not in available:
            raise ConfigurationError(f"resolution {fft} not in the segment store {sorted(available)}")
        return [fft]
    raise ConfigurationError(f"unknown model '{key}' (multires or single:<fft>)")


def run_label(model_key, resolutions, resdrop_k):
    """Registry key of a trained model: resolution dropout marks a multires run as `multires_do`."""
    if model_key == 'multires' and resdrop_k > 0 and len(resolutions) > 1:
        return 'multires_do'
    return model_key


def build_for_run(cfg, resolutions, n_classes, fold, resdrop_k):
    if len(resolutions) == 1:
        resdrop_k = 0
    config = multires_config_from(cfg, resolutions, n_classes, resdrop_k)
    return build_multires(config, seed=derive_seed(cfg.seed, 'model', fold))


def run_cross_validation(segments, plan, cfg, classes, model_key, run_dir, resdrop_k=0, noise=None):
    """Train and test every outer fold; per-fold artifacts go to `run_dir`."""
    run_dir = Path(run_dir)
    resolutions = parse_model_key(model_key, segments.resolutions)
    segments = segments.select(resolutions)
    tcfg = TrainConfig.from_run_config(cfg)
    offset = int(cfg['folds.validation_offset'])
    report = MetricsReport(list(classes))
    label = run_label(model_key, resolutions, resdrop_k)

    for fold in range(plan.fold_count):
        print(f"\n{'='*60}")
        print(f"Fold {fold + 1}/{plan.fold_count}: {label}")
        print(f"{'='*60}")
        train_set, val_set, test_set = fold_sets(segments, plan, fold, offset)
        print(f"  train {len(train_set)} tuples, validation {len(val_set)}, test {len(test_set)}")
        scaler = Standardizer.fit(train_set.values)
        train_set = train_set.with_values(scaler.transform(train_set.values))
        val_set = val_set.with_values(scaler.transform(val_set.values))
        test_set = test_set.with_values(scaler.transform(test_set.values))

        model = build_for_run(cfg, resolutions, len(classes), fold, resdrop_k)
        model.fold_signature = plan.signature()
        fold_cfg = replace(tcfg, seed=derive_seed(cfg.seed, 'train', fold))
        model, history = train(model, train_set, val_set, fold_cfg, classes, noise)

        save_checkpoint(run_dir / f'fold{fold}.mrw', model.parameters())
        history.to_csv(run_dir / f'history_fold{fold}.csv', index=False, float_format='%.8g')
        scaler.save(run_dir / f'standardization_fold{fold}.csv')
        raw_acc, grouped_acc = report.add_fold(fold, label, predict_segments(model, test_set), test_set)
        print(f"  raw {raw_acc:.4f}  grouped {grouped_acc:.4f}")
    return report


# --- reloading runs -------------------------------------------------------

@dataclass
class TrainedRun:
    run_dir: Path
    config: RunConfig
    plan: FoldPlan
    classes: list
    model_key: str
    resolutions: list
    resdrop_k: int

    @property
    def label(self):
        return run_label(self.model_key, self.resolutions, self.resdrop_k)

    def model(self, fold):
        model = build_for_run(self.config, self.resolutions, len(self.classes), fold, self.resdrop_k)
        model.load_state(load_checkpoint(self.run_dir / f'fold{fold}.mrw'))
        model.fold_signature = self.plan.signature()
        return model

    def scaler(self, fold):
        return Standardizer.load(self.run_dir / f'standardization_fold{fold}.csv')

    def test_set(self, segments, fold):
        _, _, test = fold_sets(segments.select(self.resolutions), self.plan, fold,
                               int(self.config['folds.validation_offset']))
        return test.with_values(self.scaler(fold).transform(test.values))


def load_run(run_dir):
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ValidationError(f"run directory not found: {run_dir}")
    cfg = RunConfig.load(run_dir / 'config.txt')
    if cfg.command != 'train':
        raise ValidationError(f"{run_dir} is a '{cfg.command}' run, not a training run")
    folds = pd.read_csv(run_dir / 'folds.csv', dtype={'location_id': str})
    plan = FoldPlan(int(folds['fold'].max()) + 1, dict(zip(folds['location_id'], folds['fold'].astype(int))))
    classes = pd.read_csv(run_dir / 'classes.csv', dtype=str, keep_default_na=False)['class_label'].tolist()
    resolutions = [int(r) for r in str(cfg['arg.resolutions']).split(',')]
    return TrainedRun(run_dir, cfg, plan, classes, cfg['arg.model'], resolutions, int(cfg['resdrop.k']))


def evaluate_run(run_dir, segments=None):
    run = load_run(run_dir)
    if segments is None:
        segments = load_segment_store(run.config['arg.segments'], run.resolutions)
    report = MetricsReport(run.classes)
    for fold in range(run.plan.fold_count):
        test = run.test_set(segments, fold)
        report.add_fold(fold, run.label, predict_segments(run.model(fold), test), test)
    return report


def evaluate_ensemble(run_dirs, segments=None):
    """Grouped-single ensemble over single-resolution runs that share one fold plan."""
    runs = [load_run(d) for d in run_dirs]
    if any(len(r.resolutions) != 1 for r in runs):
        raise ConfigurationError("ensemble members must be single-resolution runs")
    if len({r.plan.signature() for r in runs}) > 1:
        raise ConfigurationError("ensemble members were trained on different fold plans")
    if len({tuple(r.classes) for r in runs}) > 1:
        raise ConfigurationError("ensemble members disagree on the class list")
    resolutions = sorted(r.resolutions[0] for r in runs)
    if len(set(resolutions)) != len(resolutions):
        raise ConfigurationError(f"duplicate resolutions among ensemble members: {resolutions}")
    if segments is None:
        segments = load_segment_store(runs[0].config['arg.segments'], resolutions)
    report = MetricsReport(runs[0].classes)
    for fold in range(runs[0].plan.fold_count):
        probs, test = [], None
        for run in runs:
            test = run.test_set(segments, fold)
            probs.append(predict_segments(run.model(fold), test))
        report.add_fold(fold, 'ensemble', np.mean(probs, axis=0), test)
    return report
