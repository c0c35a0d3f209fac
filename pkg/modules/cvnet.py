"""
Complex-valued CNN feature extractor g(.) and classifier f(.).

Complex channels travel as paired real planes (re, im), each [B, C, L].
A block is complex conv -> split ReLU -> per-plane batch norm -> magnitude
max-pool(2). The flattened planes feed a real dense stack whose last output is
the semantic feature z; the classifier maps z to K logits. Dense layers are
lazy: their input width is bound on the first forward pass.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict

import numpy as np

import config
from modules.gradcore import (RunningStats, ShapeError, Tensor, as_tensor, batchnorm1d, concat,
                              conv1d, dense, gather1d, maxpool1d, no_grad, pool_indices, relu)

logger = logging.getLogger(__name__)

POOLING_MODES = ('magnitude', 'per_plane')


class UnboundLayerError(RuntimeError):
    """A lazy dense layer was used before its input width was known."""


@dataclass
class ModelConfig:
    num_blocks: int = config.DEFAULT_NUM_BLOCKS
    channels: int = config.DEFAULT_CHANNELS
    kernel: int = config.DEFAULT_KERNEL
    variant: str = 'long'
    num_classes: int = config.DEFAULT_NUM_CLASSES
    input_length: int = config.DEFAULT_SAMPLE_LENGTH
    pooling: str = 'magnitude'

    def validate(self):
        if self.variant not in config.FEATURE_WIDTHS:
            raise ValueError(f"variant must be one of {sorted(config.FEATURE_WIDTHS)}, got '{self.variant}'")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got '{self.pooling}'")
        if self.num_blocks < 1 or self.channels < 1 or self.num_classes < 2:
            raise ValueError("num_blocks and channels must be >= 1 and num_classes >= 2")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd so convolutions preserve length, got {self.kernel}")
        if self.input_length // 2 ** self.num_blocks < 1:
            raise ValueError(f"input_length {self.input_length} is too short for {self.num_blocks} pooling blocks")
        return self

    @property
    def feature_widths(self):
        return tuple(config.FEATURE_WIDTHS[self.variant])

    @property
    def feature_dim(self):
        return self.feature_widths[-1]

    @property
    def pooled_length(self):
        length = self.input_length
        for _ in range(self.num_blocks):
            length = -(-length // 2)
        return length

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass
class ModelParams:
    """Trainable network weights (theta_m), metric parameters (theta_a) and BN buffers."""
    config: ModelConfig
    theta_m: Dict[str, Tensor]
    theta_a: Dict[str, Tensor]
    buffers: Dict[str, RunningStats]
    init_seed: int
    bound: bool = False

    def state_arrays(self):
        arrays = {}
        for name, t in self.theta_m.items():
            arrays[f"theta_m/{name}"] = t.data
        for name, t in self.theta_a.items():
            arrays[f"theta_a/{name}"] = t.data
        for name, stats in self.buffers.items():
            arrays[f"buffer/{name}/mean"] = stats.mean
            arrays[f"buffer/{name}/var"] = stats.var
        return arrays

    def state_meta(self):
        return {'model': self.config.to_dict(), 'init_seed': self.init_seed, 'bound': self.bound}

    @classmethod
    def from_state(cls, arrays, meta):
        cfg = ModelConfig.from_dict(meta['model'])
        theta_m, theta_a, buffers = {}, {}, {}
        for key, value in arrays.items():
            group, _, name = key.partition('/')
            if group == 'theta_m':
                theta_m[name] = Tensor(value, requires_grad=True, name=name)
            elif group == 'theta_a':
                theta_a[name] = Tensor(value, requires_grad=True, name=name)
            elif group == 'buffer':
                stat_name, _, which = name.rpartition('/')
                stats = buffers.setdefault(stat_name, RunningStats(None, None))
                setattr(stats, which, np.array(value))
        return cls(cfg, theta_m, theta_a, buffers, int(meta['init_seed']), bool(meta['bound']))

    def copy(self):
        return ModelParams(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.theta_m.items()},
            {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.theta_a.items()},
            {k: RunningStats(s.mean.copy(), s.var.copy()) for k, s in self.buffers.items()},
            self.init_seed, self.bound)


def _uniform(rng, bound, shape, name):
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def init_params(model_config, seed):
    """Conv and batch-norm parameters; dense layers stay unbound until the first forward."""
    cfg = model_config.validate()
    rng = np.random.default_rng([seed, 0xC0])
    theta_m, buffers = {}, {}
    c_in = 1
    for i in range(cfg.num_blocks):
        bound = 1.0 / np.sqrt(2.0 * c_in * cfg.kernel)
        prefix = f"block{i}"
        theta_m[f"{prefix}.conv.w_re"] = _uniform(rng, bound, (cfg.channels, c_in, cfg.kernel), f"{prefix}.conv.w_re")
        theta_m[f"{prefix}.conv.w_im"] = _uniform(rng, bound, (cfg.channels, c_in, cfg.kernel), f"{prefix}.conv.w_im")
        theta_m[f"{prefix}.conv.b_re"] = Tensor(np.zeros(cfg.channels), requires_grad=True, name=f"{prefix}.conv.b_re")
        theta_m[f"{prefix}.conv.b_im"] = Tensor(np.zeros(cfg.channels), requires_grad=True, name=f"{prefix}.conv.b_im")
        for plane in ('re', 'im'):
            theta_m[f"{prefix}.bn_{plane}.gamma"] = Tensor(np.ones(cfg.channels), requires_grad=True,
                                                           name=f"{prefix}.bn_{plane}.gamma")
            theta_m[f"{prefix}.bn_{plane}.beta"] = Tensor(np.zeros(cfg.channels), requires_grad=True,
                                                          name=f"{prefix}.bn_{plane}.beta")
            buffers[f"{prefix}.bn_{plane}"] = RunningStats.fresh(cfg.channels)
        c_in = cfg.channels
    return ModelParams(cfg, theta_m, {}, buffers, int(seed))


def bind_dense_layers(params, input_width):
    """Allocate the lazy dense stack for a flattened width of ``input_width``."""
    if params.bound:
        return params
    rng = np.random.default_rng([params.init_seed, 0xDE])
    widths = (input_width,) + params.config.feature_widths
    for j in range(len(widths) - 1):
        bound = 1.0 / np.sqrt(widths[j])
        params.theta_m[f"feature{j}.weight"] = _uniform(rng, bound, (widths[j + 1], widths[j]), f"feature{j}.weight")
        params.theta_m[f"feature{j}.bias"] = _uniform(rng, bound, (widths[j + 1],), f"feature{j}.bias")
    bound = 1.0 / np.sqrt(widths[-1])
    k = params.config.num_classes
    params.theta_m['classifier.weight'] = _uniform(rng, bound, (k, widths[-1]), 'classifier.weight')
    params.theta_m['classifier.bias'] = _uniform(rng, bound, (k,), 'classifier.bias')
    params.bound = True
    logger.debug(f"dense stack bound: {' -> '.join(str(w) for w in widths)} -> {k}")
    return params


def complex_conv1d(planes, kernels, biases=None, padding=0):
    """(a + ib) * (w + iv) = (a*w - b*v) + i(a*v + b*w), each * a real conv1d."""
    a, b = planes
    w, v = kernels
    if a.shape != b.shape:
        raise ShapeError(f"real and imaginary planes differ: {a.shape} vs {b.shape}")
    if w.shape != v.shape:
        raise ShapeError(f"real and imaginary kernels differ: {w.shape} vs {v.shape}")
    b_re, b_im = biases if biases is not None else (None, None)
    real = conv1d(a, w, b_re, padding=padding) - conv1d(b, v, padding=padding)
    imag = conv1d(a, v, b_im, padding=padding) + conv1d(b, w, padding=padding)
    return real, imag


def complex_maxpool1d(re, im, window=2):
    """Keep, per window, the element of largest magnitude (both planes); ties to earliest."""
    index = pool_indices(re.data ** 2 + im.data ** 2, window)
    return gather1d(re, index), gather1d(im, index)


def to_network_input(samples):
    """[M, n, 2] (I, Q) records -> [M, 2, n] f64 network input."""
    return np.ascontiguousarray(np.asarray(samples, dtype=np.float64).transpose(0, 2, 1))


def extract_features(params, batch, training=False, update_running=True):
    """Semantic features z = g(r) for batch [B, 2, n]."""
    cfg = params.config
    x = as_tensor(batch)
    if x.ndim != 3 or x.shape[1] != 2 or x.shape[2] != cfg.input_length:
        raise ShapeError(f"expected input [B, 2, {cfg.input_length}], got {x.shape}")
    batch_size = x.shape[0]
    re, im = x[:, 0:1, :], x[:, 1:2, :]
    p, buf = params.theta_m, params.buffers
    for i in range(cfg.num_blocks):
        prefix = f"block{i}"
        re, im = complex_conv1d((re, im), (p[f"{prefix}.conv.w_re"], p[f"{prefix}.conv.w_im"]),
                                (p[f"{prefix}.conv.b_re"], p[f"{prefix}.conv.b_im"]),
                                padding=cfg.kernel // 2)
        re, im = relu(re), relu(im)
        re = batchnorm1d(re, p[f"{prefix}.bn_re.gamma"], p[f"{prefix}.bn_re.beta"], buf[f"{prefix}.bn_re"],
                         training, update_running)
        im = batchnorm1d(im, p[f"{prefix}.bn_im.gamma"], p[f"{prefix}.bn_im.beta"], buf[f"{prefix}.bn_im"],
                         training, update_running)
        if cfg.pooling == 'magnitude':
            re, im = complex_maxpool1d(re, im)
        else:
            re, im = maxpool1d(re), maxpool1d(im)

    h = concat([re.reshape(batch_size, -1), im.reshape(batch_size, -1)], axis=1)
    if not params.bound:
        bind_dense_layers(params, h.shape[1])
    widths = cfg.feature_widths
    for j in range(len(widths)):
        weight = p[f"feature{j}.weight"]
        if weight.shape[1] != h.shape[1]:
            raise ShapeError(f"feature{j} is bound to width {weight.shape[1]}, got {h.shape[1]}")
        h = dense(h, weight, p[f"feature{j}.bias"])
        if j < len(widths) - 1:
            h = relu(h)
    return h


def classify(params, features):
    """Logits [B, K] from semantic features [B, D]."""
    if not params.bound or 'classifier.weight' not in params.theta_m:
        raise UnboundLayerError("classifier is unbound; run extract_features once first")
    weight = params.theta_m['classifier.weight']
    features = as_tensor(features)
    if features.ndim != 2 or features.shape[1] != weight.shape[1]:
        raise ShapeError(f"classifier expects [B, {weight.shape[1]}] features, got {features.shape}")
    return dense(features, weight, params.theta_m['classifier.bias'])


def forward(params, batch, training=False, update_running=True):
    """(features, logits) for one batch."""
    z = extract_features(params, batch, training=training, update_running=update_running)
    return z, classify(params, z)


def logits_fn(params, training=False, update_running=True):
    """Callable x -> logits, the form the VAT losses consume."""
    def fn(x):
        return forward(params, x, training=training, update_running=update_running)[1]
    return fn


def predict_logits(params, samples, batch_size=256):
    """Eval-mode logits and features for [M, n, 2] records, computed in chunks."""
    feats, logits = [], []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = to_network_input(samples[start:start + batch_size])
            z, out = forward(params, chunk, training=False)
            feats.append(z.data)
            logits.append(out.data)
    if not feats:
        width = params.config.feature_dim
        return np.zeros((0, width)), np.zeros((0, params.config.num_classes))
    return np.concatenate(feats), np.concatenate(logits)
