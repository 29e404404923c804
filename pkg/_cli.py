"""
Command-line surface: python _cli.py <command> [flags]

Every command that produces artifacts first serializes its RunConfig
(config.txt) into its output directory; `replay` re-runs a command from
that file alone.
"""
import argparse
import logging
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import pandas as pd

from _augment import (NoiseSpec, TIME_DOMAIN_METHODS, remix_places, split_shuffle_remix,
                      time_domain_variants)
from _config import (DEFAULTS, RUNS_DIR, THREADS, RunConfig, derive_seed, float_list, get_data_path,
                     get_figures_path, int_list, parse_overrides)
from _corpus import RecordingMeta, grouped_stratified_folds, load_manifest, read_audio, resolve_path, write_audio
from _data_utils import load_segment_store, read_index, save_segments, verify_store, write_index
from _dsp import default_profiles, extract_segments
from _errors import (EXIT_OK, EXIT_RUNTIME, ConfigurationError, MrascError, UsageError,
                     ValidationError)
from _report import (comparison_table, noise_sweep_table, plot_confusion, plot_histories,
                     plot_per_class, print_table, run_summary)
from _synthgen import (check_corpus, default_specs, describe_corpus, generate_corpus, print_corpus_check,
                       table1_specs)
from _trainer import evaluate_ensemble, evaluate_run, parse_model_key, run_cross_validation

logger = logging.getLogger(__name__)

AUGMENT_METHODS = ('stretch', 'shift', 'remix')


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _is_true(value):
    return str(value).strip().lower() in ('1', 'true', 'yes')


def _base_config(command, args, **extra):
    """DEFAULTS < --config file < --set overrides < explicit flags."""
    extra = {k: v for k, v in extra.items() if v is not None}
    return RunConfig.build(command, args.config, parse_overrides(args.set), extra)


def _banner(title):
    print(f"\n{'='*60}")
    print(title)
    print(f"{'='*60}")


# --- synth ----------------------------------------------------------------

def run_synth(cfg, force=False):
    out = Path(cfg['arg.out'])
    n_classes = cfg['synth.classes']
    if n_classes == 3:
        specs = default_specs(cfg['synth.locations'], cfg['synth.files_per_location'], cfg['synth.duration_s'])
    elif n_classes == 15:
        specs = table1_specs(cfg['synth.files_per_location'], cfg['synth.duration_s'])
    else:
        raise ConfigurationError(f"synth.classes must be 3 or 15, got {n_classes}")
    cfg.write(out, force)
    metas = generate_corpus(specs, cfg.seed, out, sample_rate=cfg['dsp.sample_rate'])
    _banner(f"Synthetic corpus: {len(metas)} files -> {out}")
    print_table(describe_corpus(metas), 'Dataset overview (seconds)')

    if _is_true(cfg['arg.check']):
        try:
            results = check_corpus(metas, out)
        except ValidationError:
            # a rejected corpus keeps its WAVs for inspection but cannot be extracted
            (out / 'manifest.csv').unlink(missing_ok=True)
            raise
        print_corpus_check(results)
    return EXIT_OK


def cmd_synth(args):
    cfg = _base_config('synth', args, **{'seed': args.seed, 'synth.classes': args.classes})
    out = Path(args.out or get_data_path('synth')).resolve()
    return run_synth(cfg.with_args(out=out, check=not args.no_check), args.force)


def cmd_describe(args):
    metas = load_manifest(args.manifest)
    print_table(describe_corpus(metas), f'Dataset overview: {args.manifest}')
    return EXIT_OK


# --- extract --------------------------------------------------------------

def _augment_methods(value):
    if value is None:
        return None
    if value == 'all':
        return ','.join(AUGMENT_METHODS)
    if value == 'none':
        return ''
    methods = [m.strip() for m in value.split(',') if m.strip()]
    unknown = [m for m in methods if m not in AUGMENT_METHODS]
    if unknown:
        raise UsageError(f"unknown augmentation {unknown}; choose from {', '.join(AUGMENT_METHODS)}")
    return ','.join(methods)


def _ssr_and_extract(store, clip, profiles, cfg, source, class_label, location, method):
    """Split-shuffle-remix one clip, cut its segment tuples and write them to the store."""
    remixed = split_shuffle_remix(
        clip, cfg['aug.target_segments'], seed=derive_seed(cfg.seed, source, method, 'ssr'),
        crossfade_ms=cfg['aug.crossfade_ms'], start_db=cfg['aug.threshold_start_db'],
        step_db=cfg['aug.threshold_step_db'], cap_db=cfg['aug.threshold_cap_db'])
    tuples = extract_segments(remixed, profiles, cfg['dsp.segments'],
                              seed=derive_seed(cfg.seed, source, method, 'offsets'),
                              source=source, class_label=class_label, location_id=location,
                              augmentation=method)
    return save_segments(store, tuples)


def _profiles(clip, cfg):
    if clip.sample_rate != cfg['dsp.sample_rate']:
        raise ValidationError(f"sample rate {clip.sample_rate} Hz, run expects {cfg['dsp.sample_rate']} Hz")
    return default_profiles(clip.sample_rate, int_list(cfg['dsp.resolutions']))


def run_extract(cfg, force=False):
    manifest = Path(cfg['arg.manifest'])
    root = Path(cfg['arg.root']) if cfg['arg.root'] else manifest.parent
    store = Path(cfg['arg.out'])
    methods = [m for m in cfg['aug.methods'].split(',') if m]
    time_methods = [m for m in methods if m in TIME_DOMAIN_METHODS]
    metas = load_manifest(manifest)
    cfg.write(store, force)

    _banner(f"Extracting {len(metas)} files at fft {cfg['dsp.resolutions']} "
            f"(augmentation: {','.join(methods) or 'none'})")

    def per_file(meta):
        try:
            clip = read_audio(resolve_path(meta, root))
            profiles = _profiles(clip, cfg)
            clips = {'none': clip, **time_domain_variants(
                clip, meta.path, time_methods, cfg.seed,
                stretch_range=cfg['aug.stretch_range'], shift_range=cfg['aug.shift_range'])}
            rows = []
            for method, c in clips.items():
                rows += _ssr_and_extract(store, c, profiles, cfg, meta.path, meta.class_label,
                                         meta.location_id, method)
            return rows, None
        except (MrascError, ValueError, OSError) as e:
            logger.error("%s: %s", meta.path, e)
            return [], f"{meta.path}: {e}"

    def per_class(item):
        label, files_by_location = item
        try:
            mixes = remix_places(files_by_location, seed=derive_seed(cfg.seed, 'remix', label),
                                 loader=lambda p: read_audio(root / p),
                                 class_label=label)
            rows = []
            for clip, prov in mixes:
                rows += _ssr_and_extract(store, clip, _profiles(clip, cfg), cfg, prov.source,
                                         label, prov.location_id, 'remix')
            print(f"  {label}: {len(mixes)} place remixes")
            return rows, None
        except (MrascError, ValueError, OSError) as e:
            logger.error("remix of class '%s': %s", label, e)
            return [], f"remix '{label}': {e}"

    jobs_by_class = defaultdict(lambda: defaultdict(list))
    for m in metas:
        jobs_by_class[m.class_label][m.location_id].append(m.path)

    with ThreadPoolExecutor(max_workers=THREADS) as pool:
        results = list(pool.map(per_file, metas))
        if 'remix' in methods:
            results += list(pool.map(per_class, sorted((k, dict(v)) for k, v in jobs_by_class.items())))

    rows = [r for rs, _ in results for r in rs]
    failures = [err for _, err in results if err]
    write_index(store, rows)
    verify_store(store, int_list(cfg['dsp.resolutions']))
    if failures:
        print(f"\n✗ {len(failures)} item(s) failed:")
        for err in failures:
            print(f"  {err}")
        return EXIT_RUNTIME
    print(f"✓ {len(rows)} segments written to {store}")
    return EXIT_OK


def cmd_extract(args):
    cfg = _base_config('extract', args, **{
        'seed': args.seed,
        'dsp.resolutions': args.resolutions,
        'dsp.segments': args.segments,
        'aug.methods': _augment_methods(args.augment),
    })
    cfg = cfg.with_args(manifest=Path(args.manifest).resolve(),
                        out=Path(args.out or get_data_path('segments')).resolve(),
                        root=Path(args.root).resolve() if args.root else None)
    return run_extract(cfg, args.force)


# --- train ----------------------------------------------------------------

def store_metas(segments):
    """One RecordingMeta per unaugmented source file of a segment set."""
    original = segments.subset(segments.augmentation == 'none')
    seen = dict.fromkeys(zip(original.sources, original.labels, original.locations))
    return [RecordingMeta(str(s), str(label), str(loc), 1.0) for s, label, loc in seen]


def run_train(cfg, force=False):
    store = Path(cfg['arg.segments'])
    available = sorted(int(r) for r in read_index(store)['resolution_fft'].unique())
    resolutions = parse_model_key(cfg['arg.model'], available)
    segments = load_segment_store(store, resolutions)
    cfg = cfg.with_args(resolutions=','.join(str(r) for r in resolutions),
                        augmented=bool((segments.augmentation != 'none').any()))

    plan = grouped_stratified_folds(store_metas(segments), cfg['folds.count'],
                                    seed=derive_seed(cfg.seed, 'folds'))
    classes = sorted(set(segments.labels))
    run_dir = cfg.run_dir()
    cfg.write(run_dir, force)
    plan.to_frame().to_csv(run_dir / 'folds.csv', index=False)
    pd.DataFrame({'class_label': classes}).to_csv(run_dir / 'classes.csv', index=False)

    _banner(f"Training {cfg['arg.model']} -> {run_dir}")
    report = run_cross_validation(segments, plan, cfg, classes, cfg['arg.model'], run_dir,
                                  resdrop_k=cfg['resdrop.k'], noise=NoiseSpec(cfg['aug.noise_sigma']))
    report.write(run_dir, 'grouped')
    plot_confusion(report.confusion_frame(grouped=True), run_dir / 'confusion_grouped.svg',
                   title=f"{cfg['arg.model']} (grouped)")
    plot_histories(run_dir)
    print_table(report.summary(), f"Accuracy per fold: {run_dir.name}")
    return EXIT_OK


def cmd_train(args):
    sigmas = float_list(args.noise_sweep) if args.noise_sweep else [None]
    for sigma in sigmas:
        cfg = _base_config('train', args, **{
            'seed': args.seed,
            'folds.count': args.folds,
            'resdrop.k': args.resdrop,
            'aug.noise_sigma': sigma,
        })
        cfg = cfg.with_args(segments=Path(args.segments).resolve(), model=args.model)
        run_train(cfg, args.force)
    return EXIT_OK


# --- eval -----------------------------------------------------------------

def run_ensemble(cfg, force=False):
    members = cfg['arg.members'].split(',')
    store = Path(cfg['arg.segments'])
    available = sorted(int(r) for r in read_index(store)['resolution_fft'].unique())
    covered = sorted(int(RunConfig.load(Path(m) / 'config.txt')['arg.resolutions']) for m in members)
    if covered != available:
        raise ConfigurationError(
            f"ensemble needs one single-resolution run per store resolution {available}, got {covered}")
    report = evaluate_ensemble(members, load_segment_store(store, available))
    run_dir = cfg.run_dir()
    cfg.write(run_dir, force)
    report.write(run_dir, 'ensemble')
    plot_confusion(report.confusion_frame(grouped=True), run_dir / 'confusion_ensemble.svg',
                   title='grouped single (ensemble)')
    print_table(report.summary(), f"Grouped-single ensemble: {run_dir.name}")
    return EXIT_OK


def cmd_eval(args):
    runs = [Path(r).resolve() for r in args.run]
    for r in runs:
        if not r.is_dir():
            raise ValidationError(f"run directory not found: {r}")
    if args.mode == 'ensemble':
        first = RunConfig.load(runs[0] / 'config.txt')
        cfg = RunConfig('ensemble', {k: v for k, v in first.values.items() if not k.startswith('arg.')})
        cfg = cfg.with_args(members=','.join(str(r) for r in sorted(runs)),
                            segments=first['arg.segments'], augmented=first.get('arg.augmented', False))
        return run_ensemble(cfg, args.force)

    for r in runs:
        report = evaluate_run(r)
        report.write(r, args.mode)
        plot_confusion(report.confusion_frame(grouped=args.mode == 'grouped'),
                       r / f'confusion_{args.mode}.svg', title=f"{r.name} ({args.mode})")
        print_table(report.summary(), f"{args.mode} evaluation: {r.name}")
    return EXIT_OK


# --- report ---------------------------------------------------------------

def run_report(cfg, force=False):
    out = Path(cfg['arg.out'])
    summaries = [run_summary(r) for r in cfg['arg.runs'].split(',')]
    cfg.write(out, force)
    table = comparison_table(summaries)
    table.to_csv(out / 'comparison.csv', index=False, float_format='%.6f')
    print_table(table, 'Model comparison (accuracy, mean over folds)')
    plot_per_class(summaries, out / 'per_class.svg')

    sweep = noise_sweep_table(summaries)
    if sweep.groupby('model')['noise_sigma'].nunique().max() > 1:
        sweep.to_csv(out / 'noise_sweep.csv', index=False, float_format='%.6f')
        print_table(sweep, 'Grouped accuracy per noise sigma')
    print(f"\n✓ report written to {out}")
    return EXIT_OK


def cmd_report(args):
    cfg = _base_config('report', args).with_args(
        runs=','.join(str(Path(r).resolve()) for r in args.runs),
        out=Path(args.out or get_figures_path('report')).resolve())
    return run_report(cfg, args.force)


# --- status / augment / replay --------------------------------------------

ARTIFACTS = {
    'config': 'config.txt',
    'folds': 'folds.csv',
    'checkpoints': 'fold*.mrw',
    'histories': 'history_fold*.csv',
    'metrics': 'metrics_*.csv',
}


def cmd_status(args):
    runs_dir = Path(args.runs_dir or RUNS_DIR)
    _banner(f"Runs in {runs_dir}")
    if not runs_dir.is_dir():
        print("✗ no runs yet")
        return EXIT_OK
    for run in sorted(p for p in runs_dir.iterdir() if p.is_dir()):
        try:
            cfg = RunConfig.load(run / 'config.txt')
            head = f"{cfg.command:<9} {cfg.config_hash}"
        except (MrascError, OSError):
            head = f"{'?':<9} {'-'*12}"
        marks = []
        for name, pattern in ARTIFACTS.items():
            n = len(list(run.glob(pattern)))
            marks.append(f"{'✓' if n else '✗'} {name}" + (f" ({n})" if n > 1 else ''))
        print(f"  {run.name:<28} {head}  " + '  '.join(marks))
    return EXIT_OK


def run_augment(cfg, force=False):
    wav, out = Path(cfg['arg.wav']), Path(cfg['arg.out'])
    clip = read_audio(wav)
    cfg.write(out, force)
    variants = time_domain_variants(clip, wav.name, TIME_DOMAIN_METHODS, cfg.seed,
                                    stretch_range=cfg['aug.stretch_range'], shift_range=cfg['aug.shift_range'])
    variants['ssr'] = split_shuffle_remix(clip, cfg['aug.target_segments'], seed=derive_seed(cfg.seed, wav.name, 'ssr'),
                                          crossfade_ms=cfg['aug.crossfade_ms'])
    print(f"{wav.name}: {clip.duration_s:.2f} s")
    for method, c in variants.items():
        path = write_audio(out / f"{wav.stem}_{method}.wav", c)
        print(f"  {method:8s} {c.duration_s:6.2f} s -> {path}")
    return EXIT_OK


def cmd_augment(args):
    cfg = _base_config('augment', args, seed=args.seed)
    return run_augment(cfg.with_args(wav=Path(args.wav).resolve(), out=Path(args.out).resolve()), args.force)


RUNNERS = {
    'synth': run_synth,
    'extract': run_extract,
    'train': run_train,
    'ensemble': run_ensemble,
    'report': run_report,
    'augment': run_augment,
}


def cmd_replay(args):
    cfg = RunConfig.load(args.config_file)
    if cfg.command not in RUNNERS:
        raise ConfigurationError(f"cannot replay a '{cfg.command}' run")
    logger.info("replaying %s run %s", cfg.command, cfg.config_hash)
    return RUNNERS[cfg.command](cfg, force=True)


# --- parser ---------------------------------------------------------------

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument('-v', '--verbose', action='count', default=0)
    common.add_argument('--config', help='flat key = value config file')
    common.add_argument('--set', action='append', metavar='KEY=VALUE', help='override one config key')
    common.add_argument('--force', action='store_true', help='overwrite an existing run directory')

    parser = _Parser(prog='mrasc', description='Multi-resolution acoustic scene classification')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common], help='generate the synthetic scene corpus')
    p.add_argument('--out', help='corpus directory (default data/synth)')
    p.add_argument('--seed', type=int)
    p.add_argument('--classes', type=int, choices=(3, 15))
    p.add_argument('--no-check', action='store_true', help='skip the identifiability and self-similarity gate')
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser('describe', parents=[common], help='per-class overview of a manifest')
    p.add_argument('--manifest', required=True)
    p.set_defaults(handler=cmd_describe)

    p = sub.add_parser('extract', parents=[common], help='build a segment store')
    p.add_argument('--manifest', required=True)
    p.add_argument('--out', help='segment store directory (default data/segments)')
    p.add_argument('--root', help='base directory of relative manifest paths (default: manifest folder)')
    p.add_argument('--resolutions', help=f"comma-separated fft sizes (default {DEFAULTS['dsp.resolutions']})")
    p.add_argument('--segments', type=int)
    p.add_argument('--augment', help='all | none | comma list of stretch,shift,remix')
    p.add_argument('--seed', type=int)
    p.set_defaults(handler=cmd_extract)

    p = sub.add_parser('train', parents=[common], help='cross-validated training')
    p.add_argument('--segments', required=True)
    p.add_argument('--model', default='multires', help='multires | single:<fft>')
    p.add_argument('--folds', type=int)
    p.add_argument('--resdrop', type=int, help='resolutions dropped per training step (multires only)')
    p.add_argument('--seed', type=int)
    p.add_argument('--noise-sweep', help='comma-separated noise sigmas, one run each')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', parents=[common], help='evaluate trained runs')
    p.add_argument('--run', nargs='+', required=True)
    p.add_argument('--mode', choices=('raw', 'grouped', 'ensemble'), default='grouped')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('report', parents=[common], help='comparison table and figures')
    p.add_argument('--runs', nargs='+', required=True)
    p.add_argument('--out', help='report directory (default figures/report)')
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser('status', parents=[common], help='list run directories and their artifacts')
    p.add_argument('--runs-dir')
    p.set_defaults(handler=cmd_status)

    p = sub.add_parser('augment', parents=[common], help='write augmented variants of one WAV')
    p.add_argument('--wav', required=True)
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int)
    p.set_defaults(handler=cmd_augment)

    p = sub.add_parser('replay', parents=[common], help='re-run a command from its config.txt')
    p.add_argument('config_file')
    p.set_defaults(handler=cmd_replay)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING
        logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
        return args.handler(args) or EXIT_OK
    except MrascError as e:
        print(f"✗ {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"✗ {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
