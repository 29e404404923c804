"""
Small differentiable layer engine on numpy arrays (batch-first, NCHW).

Layers expose forward(x, training) / backward(dout) / parameters(); each
trainable array is a `Parameter` that also carries its Nadam state.
"""
import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from _errors import ShapeError

logger = logging.getLogger(__name__)


class Parameter:
    """Trainable array with its gradient buffer and Nadam moments."""

    def __init__(self, value):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.t = 0

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def to_dtype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)


def he_uniform(rng, shape, fan_in, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# --- functional kernels ---------------------------------------------------

def same_padding(k):
    """(low, high) zero padding keeping the size; even kernels pad one more on the high side."""
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def _batched(x, rank):
    x = np.asarray(x)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise ShapeError(f"expected a rank-{rank - 1} or rank-{rank} input, got shape {x.shape}")
    return x, False


def conv2d(x, w, b):
    """Stride-1 'same' cross-correlation. x: (N, C, H, W) or (C, H, W); w: (O, C, kh, kw)."""
    x, single = _batched(x, 4)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    kh, kw = w.shape[2:]
    (ph0, ph1), (pw0, pw1) = same_padding(kh), same_padding(kw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = out + b[None, :, None, None]
    return out[0] if single else out


def conv2d_backward(x, w, dout):
    """Gradients (dx, dw, db) of conv2d for batched x."""
    kh, kw = w.shape[2:]
    (ph0, ph1), (pw0, pw1) = same_padding(kh), same_padding(kw)
    H, W = x.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + H, j:j + W] += np.einsum('oc,nohw->nchw', w[:, :, i, j], dout)
    return dxp[:, :, ph0:ph0 + H, pw0:pw0 + W], dw, db


def _pool_windows(x, pool):
    N, C, H, W = x.shape
    ph, pw = pool
    if H % ph or W % pw:
        raise ShapeError(f"maxpool {ph}x{pw} does not divide input {H}x{W}")
    return (x.reshape(N, C, H // ph, ph, W // pw, pw)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(N, C, H // ph, W // pw, ph * pw))


def maxpool2d(x, pool):
    """Non-overlapping max pool; returns (output, argmax) with the first maximum per window."""
    x, single = _batched(x, 4)
    win = _pool_windows(x, pool)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return (out[0], idx[0]) if single else (out, idx)


def maxpool2d_backward(dout, idx, pool, input_shape):
    N, C, H, W = input_shape
    ph, pw = pool
    g = np.zeros(idx.shape + (ph * pw,), dtype=dout.dtype)
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    return (g.reshape(N, C, H // ph, W // pw, ph, pw)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(N, C, H, W))


def dense(x, w, b):
    x, single = _batched(x, 2)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input has {x.shape[1]} features, weights expect {w.shape[1]}")
    out = x @ w.T + b
    return out[0] if single else out


def relu(x):
    return np.maximum(x, 0)


def dropout(x, p, training, seed=None, rng=None):
    """Inverted dropout; identity at inference or p = 0."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    rng = rng or np.random.default_rng(seed)
    mask = rng.random(np.shape(x)) >= p
    return x * mask / (1.0 - p)


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, target):
    """
    Cross-entropy on softmax probabilities. A 1-D `logits` takes one class
    index; a batch (N, K) takes N indices and the loss is the batch mean.
    Returns (loss, probabilities, dloss/dlogits).
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    K = z.shape[1]
    if K < 2:
        raise ShapeError(f"softmax_xent needs >= 2 classes, got {K}")
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} logit rows, {t.shape[0]} targets")
    if np.any(t >= K) or np.any(t < 0):
        raise IndexError(f"target out of range for {K} classes: {t}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(z.shape[0])
    loss = -log_p[rows, t].mean()
    p = np.exp(log_p)
    grad = p.copy()
    grad[rows, t] -= 1.0
    grad /= z.shape[0]
    return (float(loss), p[0], grad[0]) if single else (float(loss), p, grad)


def nadam_step(params, grads=None, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """
    One Nadam update with a fixed beta1 (no momentum schedule).
    `grads` defaults to each parameter's own gradient buffer.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError("betas must lie in [0, 1)")
    grads = [p.grad for p in params] if grads is None else grads
    for p, g in zip(params, grads):
        p.t += 1
        t = p.t
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** (t + 1))
        v_hat = p.v / (1.0 - beta2 ** t)
        step = (beta1 * m_hat + (1.0 - beta1) * g / (1.0 - beta1 ** t)) / (np.sqrt(v_hat) + eps)
        p.value = (p.value - lr * step).astype(p.value.dtype)
    return params


# --- layers ---------------------------------------------------------------

class Layer:
    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def parameters(self):
        return []

    def pattern(self):
        """Discrete state of the last forward pass (activation masks, pool winners)."""
        return ()

    def to_dtype(self, dtype):
        for _, p in self.parameters():
            p.to_dtype(dtype)


class Conv2D(Layer):
    def __init__(self, in_channels, out_channels, kernel, rng, dtype=np.float32):
        kh, kw = kernel
        fan_in = in_channels * kh * kw
        self.weight = Parameter(he_uniform(rng, (out_channels, in_channels, kh, kw), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))
        self._x = None

    def forward(self, x, training=False):
        self._x = x
        return conv2d(x, self.weight.value, self.bias.value)

    def backward(self, dout):
        dx, dw, db = conv2d_backward(self._x, self.weight.value, dout)
        self.weight.grad += dw
        self.bias.grad += db
        return dx

    def parameters(self):
        return [('weight', self.weight), ('bias', self.bias)]


class MaxPool2D(Layer):
    def __init__(self, pool):
        self.pool = tuple(pool)
        self._idx = None
        self._shape = None

    def forward(self, x, training=False):
        self._shape = x.shape
        out, self._idx = maxpool2d(x, self.pool)
        return out

    def backward(self, dout):
        return maxpool2d_backward(dout, self._idx, self.pool, self._shape)

    def pattern(self):
        return (self._idx,)


class Dense(Layer):
    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        self.weight = Parameter(he_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))
        self._x = None

    def forward(self, x, training=False):
        self._x = x
        return dense(x, self.weight.value, self.bias.value)

    def backward(self, dout):
        self.weight.grad += dout.T @ self._x
        self.bias.grad += dout.sum(axis=0)
        return dout @ self.weight.value

    def parameters(self):
        return [('weight', self.weight), ('bias', self.bias)]


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x, training=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask

    def pattern(self):
        return (self._mask,)


class ELU(Layer):
    def __init__(self, alpha=1.0):
        self.alpha = alpha
        self._x = None

    def forward(self, x, training=False):
        self._x = x
        return np.where(x > 0, x, self.alpha * np.expm1(np.minimum(x, 0)))

    def backward(self, dout):
        return dout * np.where(self._x > 0, 1.0, self.alpha * np.exp(np.minimum(self._x, 0)))

    def pattern(self):
        return (self._x > 0,)


ACTIVATIONS = {'relu': ReLU, 'elu': ELU}


def activation(name):
    try:
        return ACTIVATIONS[name]()
    except KeyError:
        raise ValueError(f"unknown activation '{name}' (choose from {sorted(ACTIVATIONS)})")


class Dropout(Layer):
    def __init__(self, p, seed=0):
        if not 0 <= p < 1:
            raise ValueError(f"dropout p must be in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng(seed)
        self._scale = None

    def forward(self, x, training=False):
        if not training or self.p == 0:
            self._scale = None
            return x
        self._scale = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._scale.astype(x.dtype)

    def backward(self, dout):
        return dout if self._scale is None else dout * self._scale.astype(dout.dtype)


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Sequential(Layer):
    """Named chain of layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, training=False):
        for _, layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, dout):
        for _, layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def parameters(self):
        return [(f"{name}.{pname}", p) for name, layer in self.layers
                for pname, p in layer.parameters()]

    def pattern(self):
        return tuple(a for _, layer in self.layers for a in layer.pattern())

    def output_shapes(self, input_shape):
        """Shapes after each layer for a batch of one, without touching parameters' grads."""
        x = np.zeros((1,) + tuple(input_shape), dtype=np.float32)
        shapes = []
        for name, layer in self.layers:
            x = layer.forward(x, training=False)
            shapes.append((name, x.shape[1:]))
        return shapes

    def first_nonfinite(self, x):
        """Name of the first parameter or layer output that is not finite."""
        for name, p in self.parameters():
            if not np.all(np.isfinite(p.value)):
                return name
        for name, layer in self.layers:
            x = layer.forward(x, training=False)
            if not np.all(np.isfinite(x)):
                return name
        return None


def zero_grads(params):
    for _, p in params:
        p.zero_grad()


def count_parameters(params):
    return int(sum(p.value.size for _, p in params))


# --- gradient verification ------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_kinked: int
    worst: tuple
    tolerance: float

    @property
    def passed(self):
        return self.n_checked > 0 and self.max_rel_error < self.tolerance


def _patterns_equal(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(fragment, inputs, target, tolerance=1e-4, n_coords=200, h=1e-4, seed=0):
    """
    Compare analytic parameter gradients of softmax_xent(fragment(inputs), target)
    with central differences in float64. Coordinates whose perturbation flips an
    activation mask or a pool winner sit on a kink and are skipped.
    """
    fragment.to_dtype(np.float64)
    if isinstance(inputs, dict):
        inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    else:
        inputs = np.asarray(inputs, dtype=np.float64)
    params = fragment.parameters()

    def loss_and_pattern():
        out = fragment.forward(inputs, training=False)
        loss, _, grad = softmax_xent(out, target)
        return loss, fragment.pattern(), grad

    zero_grads(params)
    _, base_pattern, dlogits = loss_and_pattern()
    fragment.backward(dlogits)
    analytic = [p.grad.copy() for _, p in params]

    sizes = np.array([p.value.size for _, p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(total, size=min(n_coords, total), replace=False))
    bounds = np.cumsum(sizes)

    worst, max_err, checked, kinked = None, 0.0, 0, 0
    for flat in picks:
        k = int(np.searchsorted(bounds, flat, side='right'))
        i = int(flat - (bounds[k - 1] if k else 0))
        name, p = params[k]
        orig = p.value.flat[i]
        p.value.flat[i] = orig + h
        lp, pat_p, _ = loss_and_pattern()
        p.value.flat[i] = orig - h
        lm, pat_m, _ = loss_and_pattern()
        p.value.flat[i] = orig
        if not (_patterns_equal(pat_p, base_pattern) and _patterns_equal(pat_m, base_pattern)):
            kinked += 1
            continue
        num = (lp - lm) / (2 * h)
        ana = analytic[k].flat[i]
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        checked += 1
        if err > max_err or worst is None:
            max_err, worst = max(err, max_err), (name, i)
    logger.debug("grad check: %d coordinates, %d on kinks, max rel error %.3g", checked, kinked, max_err)
    return GradCheckReport(float(max_err), checked, kinked, worst, tolerance)
