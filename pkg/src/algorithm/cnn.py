"""Convolutional sensor models.

A CnnModel is a chain of convolutional blocks (convolution -> activation ->
pooling) followed by a dense head. Images are (n, n, channels) float64 arrays
and batches are (N, n, n, channels). Convolution uses stride 1 with zero
padding of width kernel_size // 2 (cross-correlation, filter j maps all input
channels to output channel j). Pooling uses stride pool_size. Flattening
order is (row, col, channel) lexicographic, i.e. numpy C order of (n, n, q).

Every block exposes three taps: 'psi' (pre-activation), 'activation' and
'pooled'.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from src.core.numeric import as_tensor3, as_vec
from src.errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)

ACTIVATIONS = ('relu', 'sigmoid', 'tanh')
POOLS = ('max', 'average')
SIGNALS = ('psi', 'activation', 'pooled')


@dataclass
class ConvOperator:
    kernel: np.ndarray  # (n_u, n_u, p_in, q)
    bias: np.ndarray    # (q,)

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[0] != self.kernel.shape[1]:
            raise ShapeError(f"kernel must be (n_u, n_u, p_in, q), got {self.kernel.shape}")
        if self.kernel.shape[0] % 2 == 0:
            raise ValidationError("kernel size must be odd so padding preserves spatial size")
        if self.bias.shape != (self.kernel.shape[3],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.kernel.shape[3]} filters")


@dataclass
class ConvBlockSpec:
    filters: int
    kernel_size: int = 3
    activation: str = 'relu'
    pool: str = 'max'
    pool_size: int = 2

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation '{self.activation}'")
        if self.pool not in POOLS:
            raise ValidationError(f"unknown pooling '{self.pool}'")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray     # (out,)
    activation: str = 'linear'

    def __post_init__(self):
        if self.activation not in ('relu', 'linear'):
            raise ValidationError(f"dense activation must be relu or linear, got '{self.activation}'")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("dense bias does not match weight rows")


@dataclass(frozen=True)
class TapPoint:
    block: int          # 1-based; -1 selects the final block
    signal: str = 'pooled'

    def __post_init__(self):
        if self.signal not in SIGNALS:
            raise ValidationError(f"unknown tap signal '{self.signal}'")

    def resolve(self, model):
        """Concrete 1-based block index for this model"""
        depth = len(model.convs)
        block = depth if self.block == -1 else self.block
        if not 1 <= block <= depth:
            raise ValidationError(f"tap block {self.block} outside model depth {depth}")
        return block

    def to_dict(self):
        return {'block': self.block, 'signal': self.signal}


@dataclass
class CnnModel:
    input_shape: Tuple[int, int, int]
    specs: List[ConvBlockSpec]
    convs: List[ConvOperator]
    dense: List[DenseLayer]
    output_scale: float = 1.0

    def __post_init__(self):
        n, _, p = self.input_shape
        for spec, conv in zip(self.specs, self.convs):
            if conv.kernel.shape[2] != p:
                raise ShapeError(f"block expects {conv.kernel.shape[2]} channels, chain provides {p}")
            if conv.kernel.shape[3] != spec.filters or conv.kernel.shape[0] != spec.kernel_size:
                raise ShapeError("conv operator does not match its block spec")
            if n % spec.pool_size:
                raise ShapeError(f"pool size {spec.pool_size} does not divide spatial dim {n}")
            n //= spec.pool_size
            p = spec.filters
        width = n * n * p
        for layer in self.dense:
            if layer.weights.shape[1] != width:
                raise ShapeError(f"dense layer expects {layer.weights.shape[1]} inputs, chain provides {width}")
            width = layer.weights.shape[0]
        if self.dense and self.dense[-1].activation != 'linear':
            raise ValidationError("the final dense layer must be linear")

    @property
    def n_y(self):
        return self.dense[-1].weights.shape[0]

    def parameters(self):
        """Trainable arrays in fixed order: per block kernel, bias; per dense layer weights, bias"""
        params = []
        for conv in self.convs:
            params.extend([conv.kernel, conv.bias])
        for layer in self.dense:
            params.extend([layer.weights, layer.bias])
        return params

    def with_parameters(self, params):
        """Copy of this model carrying the given parameter arrays"""
        params = [np.array(p, dtype=np.float64, copy=True) for p in params]
        convs = [ConvOperator(params[2 * i], params[2 * i + 1]) for i in range(len(self.convs))]
        offset = 2 * len(self.convs)
        dense = [
            DenseLayer(params[offset + 2 * i], params[offset + 2 * i + 1], layer.activation)
            for i, layer in enumerate(self.dense)
        ]
        return CnnModel(tuple(self.input_shape), list(self.specs), convs, dense, self.output_scale)

    def tap_shape(self, tap):
        """Spatial/channel shape of a tap without running the model"""
        block = tap.resolve(self)
        n = self.input_shape[0]
        for spec in self.specs[:block - 1]:
            n //= spec.pool_size
        spec = self.specs[block - 1]
        if tap.signal == 'pooled':
            n //= spec.pool_size
        return (n, n, spec.filters)

    def architecture(self):
        """JSON-friendly description used by the model file"""
        return {
            'input_shape': list(self.input_shape),
            'blocks': [vars(s).copy() for s in self.specs],
            'dense': [{'units': int(l.weights.shape[0]), 'activation': l.activation} for l in self.dense],
            'output_scale': float(self.output_scale),
        }


def build_model(input_shape, filters, n_y, dense_units=64, kernel_size=3,
                activation='relu', pool='max', pool_size=2, output_scale=1.0, rng=None):
    """He-uniform conv/relu layers, Xavier-uniform linear head, zero biases"""
    if rng is None:
        raise ValidationError("build_model needs an explicit rng")
    n, _, p = input_shape
    specs, convs = [], []
    for q in filters:
        fan_in = kernel_size * kernel_size * p
        limit = np.sqrt(6.0 / fan_in)
        kernel = rng.uniform(-limit, limit, size=(kernel_size, kernel_size, p, q))
        specs.append(ConvBlockSpec(q, kernel_size, activation, pool, pool_size))
        convs.append(ConvOperator(kernel, np.zeros(q)))
        n //= pool_size
        p = q

    width = n * n * p
    dense = []
    hidden = [dense_units] if dense_units else []
    for units in hidden:
        limit = np.sqrt(6.0 / width)
        dense.append(DenseLayer(rng.uniform(-limit, limit, size=(units, width)), np.zeros(units), 'relu'))
        width = units
    limit = np.sqrt(6.0 / (width + n_y))
    dense.append(DenseLayer(rng.uniform(-limit, limit, size=(n_y, width)), np.zeros(n_y), 'linear'))

    model = CnnModel(tuple(input_shape), specs, convs, dense, output_scale)
    logger.info(f"Built CNN {input_shape} -> blocks {list(filters)} -> dense {hidden + [n_y]}")
    return model


# ---------------------------------------------------------------------------
# Layer primitives (batched; single-image wrappers below)
# ---------------------------------------------------------------------------

def _im2col(x, k):
    """(N, n, n, c) -> columns (N*n*n, c*k*k) of zero-padded k x k windows"""
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, n, n, c, k, k)
    n_batch, h, w, c = x.shape
    return windows.reshape(n_batch * h * w, c * k * k)


def _conv_forward(x, op):
    k = op.kernel.shape[0]
    if x.shape[3] != op.kernel.shape[2]:
        raise ShapeError(f"input has {x.shape[3]} channels, operator expects {op.kernel.shape[2]}")
    cols = _im2col(x, k)
    w = op.kernel.transpose(2, 0, 1, 3).reshape(-1, op.kernel.shape[3])
    out = cols @ w + op.bias
    return out.reshape(x.shape[0], x.shape[1], x.shape[2], -1), cols


def _conv_backward(dout, cols, op, need_dx=True):
    k = op.kernel.shape[0]
    c, q = op.kernel.shape[2], op.kernel.shape[3]
    d2 = dout.reshape(-1, q)
    d_kernel = (cols.T @ d2).reshape(c, k, k, q).transpose(1, 2, 0, 3)
    d_bias = d2.sum(axis=0)
    dx = None
    if need_dx:
        flipped = op.kernel[::-1, ::-1]  # (k, k, c, q)
        w = flipped.transpose(3, 0, 1, 2).reshape(q * k * k, c)
        dx = (_im2col(dout, k) @ w).reshape(dout.shape[:3] + (c,))
    return dx, d_kernel, d_bias


def _activate(z, kind):
    if kind == 'relu':
        return np.maximum(z, 0.0)
    if kind == 'sigmoid':
        return expit(z)
    if kind == 'tanh':
        return np.tanh(z)
    if kind == 'linear':
        return z
    raise ValidationError(f"unknown activation '{kind}'")


def _activate_backward(dout, z, a, kind):
    if kind == 'relu':
        return dout * (z > 0)
    if kind == 'sigmoid':
        return dout * a * (1.0 - a)
    if kind == 'tanh':
        return dout * (1.0 - a * a)
    return dout


def _pool_windows(x, p):
    n_batch, h, w, c = x.shape
    if h % p or w % p:
        raise ShapeError(f"pool size {p} does not divide spatial dims {h}x{w}")
    blocks = x.reshape(n_batch, h // p, p, w // p, p, c).transpose(0, 1, 3, 5, 2, 4)
    return blocks.reshape(n_batch, h // p, w // p, c, p * p)


def _pool_forward(x, kind, p):
    windows = _pool_windows(x, p)
    if kind == 'max':
        arg = np.argmax(windows, axis=-1)  # first in row-major scan wins ties
        out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
        return out, arg
    if kind == 'average':
        return windows.mean(axis=-1), None
    raise ValidationError(f"unknown pooling '{kind}'")


def _pool_backward(dout, arg, kind, p, x_shape):
    n_batch, h, w, c = x_shape
    if kind == 'max':
        grad = np.zeros(dout.shape + (p * p,))
        np.put_along_axis(grad, arg[..., None], dout[..., None], axis=-1)
    else:
        grad = np.repeat(dout[..., None], p * p, axis=-1) / (p * p)
    grad = grad.reshape(n_batch, h // p, w // p, c, p, p).transpose(0, 1, 4, 2, 5, 3)
    return grad.reshape(x_shape)


def convolve(image, op):
    """Zero-padded cross-correlation of one (n, n, p) image with zero padding; returns (n, n, q)"""
    x = as_tensor3(image)
    out, _ = _conv_forward(x[None], op)
    return out[0]


def activate(x, kind):
    return _activate(np.asarray(x, dtype=np.float64), kind)


def pool(x, kind, n_p):
    """Non-overlapping n_p x n_p pooling of a (n, n, q) tensor"""
    x = as_tensor3(x)
    out, _ = _pool_forward(x[None], kind, n_p)
    return out[0]


# ---------------------------------------------------------------------------
# Whole-model passes
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    inputs: List[np.ndarray] = field(default_factory=list)
    cols: List[np.ndarray] = field(default_factory=list)
    psi: List[np.ndarray] = field(default_factory=list)
    act: List[np.ndarray] = field(default_factory=list)
    pooled: List[np.ndarray] = field(default_factory=list)
    argmax: List[Optional[np.ndarray]] = field(default_factory=list)
    flat: Optional[np.ndarray] = None
    dense_in: List[np.ndarray] = field(default_factory=list)
    dense_z: List[np.ndarray] = field(default_factory=list)

    def taps(self):
        taps = {}
        for i in range(len(self.psi)):
            taps[(i + 1, 'psi')] = self.psi[i]
            taps[(i + 1, 'activation')] = self.act[i]
            taps[(i + 1, 'pooled')] = self.pooled[i]
        return taps


def _check_batch(model, images):
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"images of shape {x.shape[1:]} do not match model input {tuple(model.input_shape)}")
    return x


def forward_batch(model, images, keep_cache=True, stop_block=None):
    """Run a batch through the model.

    Returns (y_hat (N, n_y), cache). With stop_block set, the pass stops after
    that block and y_hat is None; used when only feature taps are needed.
    """
    x = _check_batch(model, images)
    cache = ForwardCache()
    for i, (spec, conv) in enumerate(zip(model.specs, model.convs)):
        psi, cols = _conv_forward(x, conv)
        act = _activate(psi, spec.activation)
        pooled, arg = _pool_forward(act, spec.pool, spec.pool_size)
        if keep_cache:
            cache.inputs.append(x)
            cache.cols.append(cols)
            cache.argmax.append(arg)
        cache.psi.append(psi)
        cache.act.append(act)
        cache.pooled.append(pooled)
        x = pooled
        if stop_block is not None and i + 1 == stop_block:
            return None, cache

    h = x.reshape(x.shape[0], -1)
    cache.flat = h
    for layer in model.dense:
        z = h @ layer.weights.T + layer.bias
        cache.dense_in.append(h)
        cache.dense_z.append(z)
        h = _activate(z, layer.activation)
    return h * model.output_scale, cache


def forward(model, image):
    """Single image -> (y_hat, taps) where taps maps (block, signal) to Tensor3"""
    y_hat, cache = forward_batch(model, as_tensor3(image)[None], keep_cache=False)
    taps = {key: value[0] for key, value in cache.taps().items()}
    return y_hat[0], taps


def predict(model, images, batch_size=64):
    """Batched inference without retaining taps"""
    x = _check_batch(model, images)
    out = []
    for start in range(0, x.shape[0], batch_size):
        y_hat, _ = forward_batch(model, x[start:start + batch_size], keep_cache=False)
        out.append(y_hat)
    return np.concatenate(out, axis=0)


def sse_loss(y_hat, y):
    """Sum of squared errors ||y_hat - y||^2"""
    y_hat = as_vec(y_hat)
    y = as_vec(y)
    if y_hat.shape != y.shape:
        raise ShapeError(f"sse_loss: lengths {y_hat.shape[0]} and {y.shape[0]} differ")
    d = y_hat - y
    return float(d @ d)


def backward_batch(model, images, labels, cache=None):
    """Gradients of the batch SSE sum_n ||y_hat_n - y_n||^2 w.r.t. model.parameters().

    Returns (loss, grads) with grads aligned to model.parameters().
    """
    x = _check_batch(model, images)
    y = np.asarray(labels, dtype=np.float64).reshape(x.shape[0], -1)
    if y.shape[1] != model.n_y:
        raise ShapeError(f"labels have {y.shape[1]} outputs, model predicts {model.n_y}")
    if cache is None or not cache.cols:
        y_hat, cache = forward_batch(model, x, keep_cache=True)
    else:
        y_hat = _activate(cache.dense_z[-1], model.dense[-1].activation) * model.output_scale

    diff = y_hat - y
    loss = float(np.sum(diff * diff))

    dense_grads = []
    dh = 2.0 * diff * model.output_scale
    for layer, h_in, z in zip(reversed(model.dense), reversed(cache.dense_in), reversed(cache.dense_z)):
        a = _activate(z, layer.activation)
        dz = _activate_backward(dh, z, a, layer.activation)
        dense_grads.append((dz.T @ h_in, dz.sum(axis=0)))
        dh = dz @ layer.weights
    dense_grads.reverse()

    dx = dh.reshape(cache.pooled[-1].shape) if model.convs else None
    conv_grads = []
    for i in reversed(range(len(model.convs))):
        spec, conv = model.specs[i], model.convs[i]
        d_act = _pool_backward(dx, cache.argmax[i], spec.pool, spec.pool_size, cache.act[i].shape)
        d_psi = _activate_backward(d_act, cache.psi[i], cache.act[i], spec.activation)
        dx, d_kernel, d_bias = _conv_backward(d_psi, cache.cols[i], conv, need_dx=i > 0)
        conv_grads.append((d_kernel, d_bias))
    conv_grads.reverse()

    grads = []
    for d_kernel, d_bias in conv_grads:
        grads.extend([d_kernel, d_bias])
    for d_w, d_b in dense_grads:
        grads.extend([d_w, d_b])
    return loss, grads


def backward(model, image, y):
    """Gradients of the single-image SSE loss, aligned to model.parameters()"""
    _, grads = backward_batch(model, as_tensor3(image)[None], as_vec(y)[None])
    return grads


def extract_tap_batch(model, images, tap, batch_size=64):
    """Requested tap for every image, computed in chunks: (N, n, n, q)"""
    block = tap.resolve(model)
    x = _check_batch(model, images)
    out = []
    for start in range(0, x.shape[0], batch_size):
        _, cache = forward_batch(model, x[start:start + batch_size], keep_cache=False, stop_block=block)
        source = {'psi': cache.psi, 'activation': cache.act, 'pooled': cache.pooled}[tap.signal]
        out.append(source[block - 1])
    return np.concatenate(out, axis=0)


def model_payloads(model) -> Dict[str, np.ndarray]:
    """Named parameter arrays in persistence order"""
    named = {}
    for i, conv in enumerate(model.convs):
        named[f'block{i + 1}.kernel'] = conv.kernel
        named[f'block{i + 1}.bias'] = conv.bias
    for i, layer in enumerate(model.dense):
        named[f'dense{i + 1}.weights'] = layer.weights
        named[f'dense{i + 1}.bias'] = layer.bias
    return named


def model_from_payloads(architecture, payloads):
    """Rebuild a CnnModel from model_payloads() output and architecture()"""
    specs = [ConvBlockSpec(**b) for b in architecture['blocks']]
    convs = [
        ConvOperator(payloads[f'block{i + 1}.kernel'], payloads[f'block{i + 1}.bias'])
        for i in range(len(specs))
    ]
    dense = [
        DenseLayer(payloads[f'dense{i + 1}.weights'], payloads[f'dense{i + 1}.bias'], d['activation'])
        for i, d in enumerate(architecture['dense'])
    ]
    return CnnModel(tuple(architecture['input_shape']), specs, convs, dense,
                    float(architecture.get('output_scale', 1.0)))
