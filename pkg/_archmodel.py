"""
Parallel two-path CNN stack (one per temporal resolution) and the
multi-resolution fusion model with resolution dropout.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from _config import DEFAULTS, FRAMES_PER_SEGMENT, MEL_BANDS, derive_seed, int_list
from _errors import InputError, ModelBuildError
from _neuralcore import (
    Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, Sequential, activation,
    count_parameters, softmax,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PathConfig:
    kernels: tuple
    pools: tuple

    def __post_init__(self):
        if len(self.kernels) != len(self.pools):
            raise ModelBuildError(f"{len(self.kernels)} kernels but {len(self.pools)} pools")


# path F reduces frequency, path T is the same schedule rotated by 90 degrees
PATH_F = PathConfig(kernels=((10, 23), (5, 11), (3, 5), (2, 5)),
                    pools=((2, 2), (2, 2), (2, 2), (5, 1)))
PATH_T = PathConfig(kernels=((21, 10), (11, 5), (5, 3), (5, 2)),
                    pools=((2, 2), (2, 2), (2, 2), (1, 5)))


@dataclass(frozen=True)
class StackConfig:
    input_shape: tuple = (80, 80)
    channels: tuple = (16, 32, 64, 64)
    path_f: PathConfig = PATH_F
    path_t: PathConfig = PATH_T
    dense_units: int = 200
    activation: str = 'relu'
    output_f: tuple = (2, 10)

    @property
    def output_t(self):
        return tuple(reversed(self.output_f))

    def trace(self, path):
        """Post-pool (H, W) after each layer of one path."""
        h, w = self.input_shape
        dims = []
        for i, (ph, pw) in enumerate(path.pools, start=1):
            if h % ph or w % pw:
                raise ModelBuildError(f"layer {i}: pool {ph}x{pw} does not divide {h}x{w}")
            h, w = h // ph, w // pw
            dims.append((h, w))
        return dims

    def validate(self):
        if len(self.channels) != len(self.path_f.kernels) or len(self.channels) != len(self.path_t.kernels):
            raise ModelBuildError(
                f"{len(self.channels)} channel counts for {len(self.path_f.kernels)}/"
                f"{len(self.path_t.kernels)} layers")
        f_dims, t_dims = self.trace(self.path_f), self.trace(self.path_t)
        if tuple(self.input_shape) == (MEL_BANDS, FRAMES_PER_SEGMENT) and (
                tuple(self.path_f.kernels[0]) != PATH_F.kernels[0] or tuple(self.path_t.kernels[0]) != PATH_T.kernels[0]):
            raise ModelBuildError(
                f"layer-1 kernels on mel segments must be {PATH_F.kernels[0]} / {PATH_T.kernels[0]}, "
                f"got {tuple(self.path_f.kernels[0])} / {tuple(self.path_t.kernels[0])}")
        if f_dims[-1] != tuple(self.output_f) or t_dims[-1] != self.output_t:
            raise ModelBuildError(
                f"paths end at {f_dims[-1]} / {t_dims[-1]}, expected {tuple(self.output_f)} / {self.output_t}")
        return f_dims, t_dims

    @property
    def path_cells(self):
        h, w = self.output_f
        return self.channels[-1] * h * w


def stack_config_from(cfg):
    """StackConfig from the flat `stack.*` keys of a RunConfig (or DEFAULTS)."""
    return StackConfig(channels=tuple(int_list(cfg['stack.channels'])),
                       dense_units=int(cfg['stack.dense_units']),
                       activation=cfg['stack.activation'])


def _path_layers(config, path, rng, dtype):
    layers, c_in = [], 1
    for i, (kernel, pool, c_out) in enumerate(zip(path.kernels, path.pools, config.channels), start=1):
        layers += [(f'conv{i}', Conv2D(c_in, c_out, kernel, rng, dtype)),
                   (f'act{i}', activation(config.activation)),
                   (f'pool{i}', MaxPool2D(pool))]
        c_in = c_out
    layers.append(('flatten', Flatten()))
    return Sequential(layers)


class ParallelStack(Layer):
    """Input (N, H, W) or (N, 1, H, W) -> (N, dense_units)."""

    def __init__(self, config, seed=0, dtype=np.float32):
        self.config = config
        self.shape_trace = config.validate()
        rng = np.random.default_rng(seed)
        self.path_f = _path_layers(config, config.path_f, rng, dtype)
        self.path_t = _path_layers(config, config.path_t, rng, dtype)
        self.dense = Dense(2 * config.path_cells, config.dense_units, rng, dtype)
        self.act = activation(config.activation)

    @staticmethod
    def _with_channel(x):
        return x[:, None] if x.ndim == 3 else x

    def forward(self, x, training=False):
        x = self._with_channel(x)
        f = self.path_f.forward(x, training)
        t = self.path_t.forward(x, training)
        return self.act.forward(self.dense.forward(np.concatenate([f, t], axis=1), training), training)

    def backward(self, dout):
        dcat = self.dense.backward(self.act.backward(dout))
        n = self.config.path_cells
        return self.path_f.backward(dcat[:, :n]) + self.path_t.backward(dcat[:, n:])

    def parameters(self):
        return ([(f'f.{n}', p) for n, p in self.path_f.parameters()]
                + [(f't.{n}', p) for n, p in self.path_t.parameters()]
                + [(f'dense.{n}', p) for n, p in self.dense.parameters()])

    def pattern(self):
        return self.path_f.pattern() + self.path_t.pattern() + self.act.pattern()

    def feature_maps(self, x):
        """Pre-flatten outputs of both paths."""
        x = self._with_channel(x)
        f, t = x, x
        for _, layer in self.path_f.layers[:-1]:
            f = layer.forward(f)
        for _, layer in self.path_t.layers[:-1]:
            t = layer.forward(t)
        return f, t

    def first_nonfinite(self, x):
        x = self._with_channel(x)
        for prefix, path in (('f', self.path_f), ('t', self.path_t)):
            name = path.first_nonfinite(x)
            if name:
                return f'{prefix}.{name}'
        return None


def build_stack(config=None, seed=0, dtype=np.float32):
    stack = ParallelStack(config or StackConfig(), seed, dtype)
    logger.debug("stack built: %d parameters, path F %s, path T %s", count_parameters(stack.parameters()),
                 stack.shape_trace[0], stack.shape_trace[1])
    return stack


# --- fusion model ---------------------------------------------------------

def resolution_dropout(concat, k, n_blocks, training, rng):
    """
    Zero k whole resolution blocks per sample and scale the survivors by
    n / (n - k). Returns (output, per-element scale or None).
    """
    if not 0 <= k < n_blocks:
        raise ValueError(f"resolution dropout k must be in [0, {n_blocks}), got {k}")
    if not training or k == 0:
        return concat, None
    n = concat.shape[0]
    dropped = np.argsort(rng.random((n, n_blocks)), axis=1)[:, :k]
    keep = np.ones((n, n_blocks))
    np.put_along_axis(keep, dropped, 0.0, axis=1)
    scale = np.repeat(keep * (n_blocks / (n_blocks - k)), concat.shape[1] // n_blocks, axis=1)
    return concat * scale.astype(concat.dtype), scale


class ResolutionDropout(Layer):
    def __init__(self, n_blocks, k, seed=0):
        if not 0 <= k < n_blocks:
            raise ModelBuildError(f"resolution dropout k={k} needs k < {n_blocks} resolutions")
        self.n_blocks = n_blocks
        self.k = k
        self.rng = np.random.default_rng(seed)
        self._scale = None

    def forward(self, x, training=False):
        out, self._scale = resolution_dropout(x, self.k, self.n_blocks, training, self.rng)
        return out

    def backward(self, dout):
        return dout if self._scale is None else dout * self._scale.astype(dout.dtype)


@dataclass(frozen=True)
class MultiResConfig:
    resolutions: tuple = (512, 1024, 2048, 4096, 8192)
    stacks: tuple = None
    fusion_units: int = DEFAULTS['fusion.units']
    n_classes: int = 15
    dropout_p: float = DEFAULTS['dropout.p']
    resdrop_k: int = 0
    stack: StackConfig = field(default_factory=StackConfig)

    def stack_configs(self):
        stacks = self.stacks if self.stacks is not None else (self.stack,) * len(self.resolutions)
        if len(stacks) != len(self.resolutions):
            raise ModelBuildError(f"{len(self.resolutions)} resolutions but {len(stacks)} stack configs")
        if any(s != stacks[0] for s in stacks):
            raise ModelBuildError("resolution stacks must share one configuration")
        return stacks


def multires_config_from(cfg, resolutions, n_classes, resdrop_k=None):
    return MultiResConfig(resolutions=tuple(int(r) for r in resolutions),
                          fusion_units=int(cfg['fusion.units']),
                          n_classes=int(n_classes),
                          dropout_p=float(cfg['dropout.p']),
                          resdrop_k=int(cfg['resdrop.k'] if resdrop_k is None else resdrop_k),
                          stack=stack_config_from(cfg))


class MultiResModel(Layer):
    """
    One ParallelStack per resolution, concatenated, then resolution dropout,
    dense fusion + activation, dropout and the class layer (logits).
    """

    def __init__(self, config, seed=0, dtype=np.float32):
        stacks = config.stack_configs()
        if config.n_classes < 2:
            raise ModelBuildError(f"need >= 2 classes, got {config.n_classes}")
        self.config = config
        self.resolutions = tuple(config.resolutions)
        self.stacks = {r: ParallelStack(s, derive_seed(seed, 'stack', r), dtype)
                       for r, s in zip(self.resolutions, stacks)}
        units = stacks[0].dense_units
        rng = np.random.default_rng(derive_seed(seed, 'head'))
        self.resdrop = ResolutionDropout(len(self.resolutions), config.resdrop_k,
                                         derive_seed(seed, 'resdrop'))
        self.head = Sequential([
            ('fusion', Dense(units * len(self.resolutions), config.fusion_units, rng, dtype)),
            ('fusion_act', activation(stacks[0].activation)),
            ('dropout', Dropout(config.dropout_p, derive_seed(seed, 'dropout'))),
            ('out', Dense(config.fusion_units, config.n_classes, rng, dtype)),
        ])
        self.last_concat = None
        self.fold_signature = None

    def _inputs(self, inputs):
        if isinstance(inputs, dict):
            missing = [r for r in self.resolutions if r not in inputs]
            if missing:
                raise InputError(f"input tuple lacks resolution(s) {missing}")
            return [np.asarray(inputs[r]) for r in self.resolutions]
        inputs = list(inputs)
        if len(inputs) != len(self.resolutions):
            raise InputError(f"got {len(inputs)} inputs for {len(self.resolutions)} resolutions")
        return [np.asarray(x) for x in inputs]

    def forward(self, inputs, training=False):
        xs = self._inputs(inputs)
        outs = [self.stacks[r].forward(x, training) for r, x in zip(self.resolutions, xs)]
        self.last_concat = np.concatenate(outs, axis=1)
        return self.head.forward(self.resdrop.forward(self.last_concat, training), training)

    def backward(self, dlogits):
        dcat = self.resdrop.backward(self.head.backward(dlogits))
        blocks = np.split(dcat, len(self.resolutions), axis=1)
        return [self.stacks[r].backward(d) for r, d in zip(self.resolutions, blocks)]

    def parameters(self):
        params = [(f'res{r}.{n}', p) for r in self.resolutions for n, p in self.stacks[r].parameters()]
        return params + [(f'head.{n}', p) for n, p in self.head.parameters()]

    def pattern(self):
        return tuple(a for r in self.resolutions for a in self.stacks[r].pattern()) + self.head.pattern()

    def predict(self, inputs, batch_size=64):
        """Class probabilities with every stochastic layer off; one row per tuple."""
        xs = self._inputs(inputs)
        single = xs[0].ndim == 2
        if single:
            xs = [x[None] for x in xs]
        n = xs[0].shape[0]
        probs = [softmax(self.forward([x[i:i + batch_size] for x in xs], training=False))
                 for i in range(0, n, batch_size)]
        out = np.concatenate(probs) if probs else np.zeros((0, self.config.n_classes))
        return out[0] if single else out

    def state_dict(self):
        return {name: (p.value, p.m, p.v, p.t) for name, p in self.parameters()}

    def load_state(self, state):
        params = dict(self.parameters())
        if set(params) != set(state):
            extra, missing = sorted(set(state) - set(params)), sorted(set(params) - set(state))
            raise ModelBuildError(f"checkpoint mismatch: unexpected {extra[:3]}, missing {missing[:3]}")
        for name, (value, m, v, t) in state.items():
            p = params[name]
            if value.shape != p.value.shape:
                raise ModelBuildError(f"{name}: checkpoint shape {value.shape} != model {p.value.shape}")
            dtype = p.value.dtype
            p.value, p.m, p.v, p.t = value.astype(dtype), m.astype(dtype), v.astype(dtype), int(t)
            p.zero_grad()
        return self

    def first_nonfinite(self, inputs):
        xs = self._inputs(inputs)
        for r, x in zip(self.resolutions, xs):
            name = self.stacks[r].first_nonfinite(x)
            if name:
                return f'res{r}.{name}'
        for name, p in self.head.parameters():
            if not np.all(np.isfinite(p.value)):
                return f'head.{name}'
        concat = np.concatenate([self.stacks[r].forward(x) for r, x in zip(self.resolutions, xs)], axis=1)
        name = self.head.first_nonfinite(concat)
        return f'head.{name}' if name else None


def build_multires(config=None, seed=0, dtype=np.float32):
    model = MultiResModel(config or MultiResConfig(), seed, dtype)
    logger.info("model: %d resolution stack(s) %s, %d parameters, resolution dropout k=%d",
                len(model.resolutions), list(model.resolutions), count_parameters(model.parameters()),
                model.config.resdrop_k)
    return model
