"""
Comparison tables and static figures over finished runs.
"""
import logging
from pathlib import Path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

from _config import MODELS, RunConfig, int_list
from _errors import ValidationError
from _trainer import run_label

logger = logging.getLogger(__name__)

RAW_COLOR = 'grey'
AUG_COLOR = 'red'


def model_key_of(cfg):
    """Registry key (see MODELS) for a train or ensemble run."""
    if cfg.command == 'ensemble':
        return 'ensemble'
    return run_label(cfg['arg.model'], int_list(cfg['arg.resolutions']), int(cfg['resdrop.k']))


def _is_true(value):
    return str(value).strip().lower() in ('1', 'true', 'yes')


def run_summary(run_dir):
    """Mean/std accuracies and per-class grouped accuracy of one evaluated run."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ValidationError(f"run directory not found: {run_dir}")
    cfg = RunConfig.load(run_dir / 'config.txt')
    for mode in ('grouped', 'ensemble', 'raw'):
        metrics_path = run_dir / f'metrics_{mode}.csv'
        if metrics_path.exists():
            break
    else:
        raise ValidationError(f"{run_dir} has no metrics; run `eval` first")
    first = pd.read_csv(metrics_path).iloc[0]
    per_class = pd.read_csv(run_dir / f'per_class_{mode}.csv', dtype={'class_label': str},
                            keep_default_na=False)
    return {
        'run': run_dir.name,
        'model': model_key_of(cfg),
        'augmented': _is_true(cfg.get('arg.augmented', 'false')),
        'noise_sigma': float(cfg['aug.noise_sigma']),
        'raw_acc': float(first['raw_acc_mean']), 'raw_std': float(first['raw_acc_std']),
        'grouped_acc': float(first['grouped_acc_mean']), 'grouped_std': float(first['grouped_acc_std']),
        'per_class': per_class,
    }


def _model_order(key):
    return MODELS.get(key, {}).get('order', len(MODELS))


def comparison_table(summaries):
    """
    One row per model in registry order; instance and grouped accuracy
    (mean and fold std) for the un-augmented and augmented runs present.
    """
    rows = {}
    for s in summaries:
        tag = 'aug' if s['augmented'] else 'raw'
        row = rows.setdefault(s['model'], {'model': s['model'],
                                           'name': MODELS.get(s['model'], {}).get('name', s['model'])})
        row.update({f'instance_{tag}': s['raw_acc'], f'instance_{tag}_std': s['raw_std'],
                    f'grouped_{tag}': s['grouped_acc'], f'grouped_{tag}_std': s['grouped_std']})
    columns = ['model', 'name']
    for tag in ('raw', 'aug'):
        if any(f'instance_{tag}' in r for r in rows.values()):
            columns += [f'instance_{tag}', f'instance_{tag}_std', f'grouped_{tag}', f'grouped_{tag}_std']
    ordered = sorted(rows.values(), key=lambda r: _model_order(r['model']))
    return pd.DataFrame(ordered, columns=columns)


def noise_sweep_table(summaries):
    df = pd.DataFrame([(s['model'], s['noise_sigma'], s['grouped_acc'], s['grouped_std'])
                       for s in summaries],
                      columns=['model', 'noise_sigma', 'grouped_acc', 'grouped_std'])
    return df.sort_values(['model', 'noise_sigma'], key=lambda c: c.map(_model_order) if c.name == 'model' else c)


def plot_per_class(summaries, path):
    """Grouped bars per class: ascending resolutions, then the ensemble and multi-res variants."""
    models = sorted({s['model'] for s in summaries}, key=_model_order)
    kinds = sorted({s['augmented'] for s in summaries})
    both = len(kinds) == 2
    classes = list(dict.fromkeys(c for s in summaries for c in s['per_class']['class_label']))

    fig, ax = plt.subplots(figsize=(max(8, 1.2 * len(classes) * len(models) / 3), 5))
    x = np.arange(len(classes))
    n_bars = len(models) * len(kinds)
    w = 0.8 / n_bars
    i = 0
    for model in models:
        for aug in kinds:
            match = [s for s in summaries if s['model'] == model and s['augmented'] == aug]
            if match:
                pc = match[0]['per_class'].set_index('class_label')['grouped_acc']
                color = (AUG_COLOR if aug else RAW_COLOR) if both else MODELS.get(model, {}).get('color', 'grey')
                ax.bar(x + i * w - 0.4 + w / 2, [pc.get(c, 0) for c in classes], w, color=color,
                       alpha=0.8, edgecolor='black' if both else None, linewidth=0.3,
                       label=f"{MODELS.get(model, {}).get('name', model)}{' (aug)' if aug and both else ''}")
            i += 1

    ax.set_ylabel('Grouped accuracy')
    ax.set_xticks(x)
    ax.set_xticklabels(classes, rotation=45, ha='right', fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7, ncol=2)
    plt.tight_layout()
    fig.savefig(path, format='svg')
    plt.close()
    return path


def plot_confusion(confusion, path, title=None):
    fig, ax = plt.subplots(figsize=(1 + 0.5 * len(confusion), 0.5 + 0.5 * len(confusion)))
    sns.heatmap(confusion, annot=True, fmt='d', cmap='Reds', cbar=False, ax=ax)
    ax.set_xlabel('Predicted')
    ax.set_ylabel('True')
    if title:
        ax.set_title(title)
    plt.tight_layout()
    fig.savefig(path, format='svg')
    plt.close()
    return path


def plot_histories(run_dir, path=None):
    """Train/validation loss and learning rate for every fold of a run."""
    run_dir = Path(run_dir)
    files = sorted(run_dir.glob('history_fold*.csv'))
    if not files:
        return None
    fig, axes = plt.subplots(1, 2, figsize=(12, 4))
    for f in files:
        h = pd.read_csv(f)
        fold = f.stem.replace('history_', '')
        axes[0].plot(h['epoch'], h['train_loss'], ls='--', alpha=0.6, label=f'{fold} train')
        axes[0].plot(h['epoch'], h['val_loss'], label=f'{fold} val')
        axes[1].plot(h['epoch'], h['lr'], label=fold)
    axes[0].set_ylabel('Loss')
    axes[1].set_ylabel('Learning rate')
    for ax in axes:
        ax.set_xlabel('Epoch')
        ax.legend(fontsize=7)
    plt.tight_layout()
    path = path or run_dir / 'history.svg'
    fig.savefig(path, format='svg')
    plt.close()
    return path


def print_table(df, title):
    print(f"\n{'='*60}")
    print(title)
    print(f"{'='*60}")
    print(df.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
