import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from dotenv import dotenv_values, load_dotenv

from _errors import ConfigurationError

load_dotenv()

SAMPLE_RATE = int(os.getenv('MRASC_SAMPLE_RATE', '44100'))
THREADS = max(1, int(os.getenv('MRASC_THREADS', str(os.cpu_count() or 1))))

BASE_DIR = Path(os.getcwd())
DATA_DIR = BASE_DIR / 'data'
RUNS_DIR = Path(os.getenv('MRASC_RUNS_DIR', str(BASE_DIR / 'runs')))
FIGURES_DIR = BASE_DIR / 'figures'

FFT_SIZES = (512, 1024, 2048, 4096, 8192)
MEL_BANDS = 80
FRAMES_PER_SEGMENT = 80
LOG_EPS = 1e-6

RESOLUTIONS = {
    512: {'name': 'fft 512', 'color': '#fdd49e', 'marker': 'o'},
    1024: {'name': 'fft 1024', 'color': '#fdbb84', 'marker': 's'},
    2048: {'name': 'fft 2048', 'color': '#fc8d59', 'marker': '^'},
    4096: {'name': 'fft 4096', 'color': '#e34a33', 'marker': 'D'},
    8192: {'name': 'fft 8192', 'color': '#b30000', 'marker': 'v'},
}

MODELS = {
    **{f'single:{fft}': {**meta, 'order': i} for i, (fft, meta) in enumerate(RESOLUTIONS.items())},
    'ensemble': {'name': 'grouped single', 'color': 'grey', 'marker': 'x', 'order': 5},
    'multires': {'name': 'multi-res', 'color': 'black', 'marker': '*', 'order': 6},
    'multires_do': {'name': 'multi-res do', 'color': 'purple', 'marker': 'P', 'order': 7},
}

# Table 1 location counts, used by the 15-class synthetic variant
TABLE1_LOCATIONS = {
    'beach': 17, 'bus': 18, 'cafe/restaurant': 16, 'car': 17, 'city_center': 15,
    'forest_path': 18, 'grocery_store': 17, 'home': 16, 'library': 16,
    'metro_station': 17, 'office': 13, 'park': 17, 'residential_area': 17,
    'train': 17, 'tram': 17,
}

DEFAULTS = {
    'seed': 7,
    'dsp.sample_rate': SAMPLE_RATE,
    'dsp.resolutions': ','.join(str(f) for f in FFT_SIZES),
    'dsp.segments': 10,
    'aug.methods': 'stretch,shift,remix',
    'aug.noise_sigma': 0.1,
    'aug.shift_range': 0.1,
    'aug.stretch_range': 0.1,
    'aug.target_segments': 10,
    'aug.crossfade_ms': 10.0,
    'aug.threshold_start_db': -60.0,
    'aug.threshold_step_db': 6.0,
    'aug.threshold_cap_db': -12.0,
    'stack.channels': '16,32,64,64',
    'stack.dense_units': 200,
    'stack.activation': 'relu',
    'fusion.units': 512,
    'dropout.p': 0.25,
    'resdrop.k': 0,
    'train.lr0': 1e-5,
    'train.lr_min': 5e-6,
    'train.lr_decay': 0.9,
    'train.plateau_epochs': 3,
    'train.plateau_tol': 1e-8,
    'train.batch_size': 32,
    'train.max_epochs': 60,
    'train.early_stop_epochs': 12,
    'folds.count': 4,
    'folds.validation_offset': 1,
    'synth.classes': 3,
    'synth.locations': 8,
    'synth.files_per_location': 4,
    'synth.duration_s': 10.0,
}


def ensure_dirs(*dirs):
    """Create working directories on demand."""
    for d in dirs:
        Path(d).mkdir(parents=True, exist_ok=True)


def get_data_path(*parts):
    return DATA_DIR.joinpath(*parts)


def get_figures_path(*parts):
    return FIGURES_DIR.joinpath(*parts)


def derive_seed(master_seed, *keys):
    """Stable 32-bit seed from a master seed and any number of keys."""
    text = '|'.join([str(master_seed), *(str(k) for k in keys)])
    return int.from_bytes(hashlib.sha256(text.encode('utf-8')).digest()[:4], 'little')


def int_list(value):
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    return [int(v) for v in str(value).split(',') if v.strip()]


def float_list(value):
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    return [float(v) for v in str(value).split(',') if v.strip()]


def _coerce(key, value):
    if key not in DEFAULTS:
        raise ConfigurationError(f"unknown configuration key: {key}")
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return str(value).strip().lower() in ('1', 'true', 'yes', 'on')
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value).strip()
    except ValueError:
        raise ConfigurationError(f"{key}: cannot interpret {value!r} as {type(default).__name__}")


def load_config_file(path):
    """Read a flat `key = value` config file."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    return {k: _coerce(k, v) for k, v in dotenv_values(path).items() if v is not None}


def parse_overrides(pairs):
    """Parse `key=value` strings given on the command line."""
    out = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise ConfigurationError(f"override must look like key=value: {pair!r}")
        key, value = pair.split('=', 1)
        out[key.strip()] = _coerce(key.strip(), value)
    return out


@dataclass(frozen=True)
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)

    @classmethod
    def build(cls, command, config_file=None, overrides=None, extra=None):
        values = dict(DEFAULTS)
        if config_file:
            values.update(load_config_file(config_file))
        values.update(overrides or {})
        values.update({k: _coerce(k, v) for k, v in (extra or {}).items()})
        return cls(command=command, values=values)

    @classmethod
    def load(cls, path):
        """Rebuild a RunConfig from its serialized file."""
        raw = dotenv_values(Path(path))
        command = raw.pop('command', None)
        if command is None:
            raise ConfigurationError(f"{path} has no command entry")
        args = {k[len('arg.'):]: v for k, v in raw.items() if k.startswith('arg.')}
        values = dict(DEFAULTS)
        values.update({k: _coerce(k, v) for k, v in raw.items() if not k.startswith('arg.')})
        return cls(command=command, values={**values, **{f'arg.{k}': v for k, v in args.items()}})

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def seed(self):
        return int(self.values['seed'])

    def with_args(self, **args):
        """Attach command arguments so they take part in the hash."""
        values = dict(self.values)
        values.update({f'arg.{k}': '' if v is None else str(v) for k, v in args.items()})
        return RunConfig(command=self.command, values=values)

    def serialize(self):
        lines = [f"command = {self.command}"]
        lines += [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        return '\n'.join(lines) + '\n'

    @property
    def config_hash(self):
        return hashlib.sha256(self.serialize().encode('utf-8')).hexdigest()[:12]

    def run_dir(self, base=None):
        return Path(base or RUNS_DIR) / f"{self.command}-{self.config_hash}"

    def write(self, run_dir, force=False):
        """Serialize into the run directory before any work starts."""
        run_dir = Path(run_dir)
        target = run_dir / 'config.txt'
        if target.exists() and not force:
            raise ConfigurationError(
                f"run directory {run_dir} already exists; pass --force to overwrite")
        ensure_dirs(run_dir)
        target.write_text(self.serialize(), encoding='utf-8')
        return target
