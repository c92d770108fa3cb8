"""Layer-sequence CNNs on top of the tensor kernels.

A model is a :class:`ModelConfig` (an ordered list of :class:`LayerSpec`)
plus a :class:`ParamStore` holding its weights and AdamW state. The forward
pass records a :class:`ForwardTrace` that :func:`backward` consumes to produce
gradients for the parameters and for the input image.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T
from .data import NormalizationStats, Split
from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "maxpool", "avgpool", "relu", "linear", "residual-block", "flatten")

# Training defaults: 50 epochs of AdamW at lr 1e-3, optimizer's canonical betas/eps/decay.
EPOCHS = 50
LEARNING_RATE = 1e-3
BETA1, BETA2, EPSILON, WEIGHT_DECAY = 0.9, 0.999, 1e-8, 0.01
BATCH_SIZE = 128


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    units: int = 0
    window: int = 2


@dataclass(frozen=True)
class ModelConfig:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    num_classes: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; stored in checkpoints."""
        return hashlib.sha256(self.to_json().encode()).digest()


def conv(channels: int, kernel: int = 3, padding: int = 1, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv", channels=channels, kernel=kernel, stride=stride, padding=padding)


def basic_cnn(input_shape=(3, 32, 32), num_classes: int = 10) -> ModelConfig:
    """Three conv/ReLU/pool blocks (max, avg, max) and a linear classifier."""
    layers = (
        conv(32), LayerSpec("relu"), LayerSpec("maxpool", window=2, stride=2),
        conv(64), LayerSpec("relu"), LayerSpec("avgpool", window=2, stride=2),
        conv(128), LayerSpec("relu"), LayerSpec("maxpool", window=2, stride=2),
        LayerSpec("flatten"), LayerSpec("linear", units=num_classes),
    )
    return ModelConfig(layers, tuple(input_shape), num_classes)


def resnet_lite(input_shape=(3, 32, 32), num_classes: int = 10, width: int = 16) -> ModelConfig:
    """Conv stem, three identity-skip residual blocks, global average pool, linear."""
    h, w = input_shape[1:]
    if h != w:
        raise ConfigError("resnet-lite expects square inputs for its global average pool")
    layers = (
        conv(width), LayerSpec("relu"),
        LayerSpec("residual-block", channels=width),
        LayerSpec("residual-block", channels=width),
        LayerSpec("residual-block", channels=width),
        LayerSpec("avgpool", window=h, stride=h),
        LayerSpec("flatten"), LayerSpec("linear", units=num_classes),
    )
    return ModelConfig(layers, tuple(input_shape), num_classes)


def tiny_cnn(input_shape=(3, 8, 8), num_classes: int = 2, channels: int = 4) -> ModelConfig:
    layers = (
        conv(channels), LayerSpec("relu"), LayerSpec("maxpool", window=2, stride=2),
        LayerSpec("flatten"), LayerSpec("linear", units=num_classes),
    )
    return ModelConfig(layers, tuple(input_shape), num_classes)


ARCHITECTURES: dict[str, Callable[..., ModelConfig]] = {
    "basic-cnn": basic_cnn,
    "resnet-lite": resnet_lite,
    "tiny-cnn": tiny_cnn,
}


def layer_shapes(config: ModelConfig) -> list[tuple[int, ...]]:
    """Propagate shapes through the layers, returning the input shape of every layer
    followed by the output shape. Raises :class:`ConfigError` on the first layer
    that does not chain."""
    if not config.layers:
        raise ConfigError("model configuration has no layers")
    if len(config.input_shape) != 3 or min(config.input_shape) < 1:
        raise ConfigError(f"input shape must be (channels, height, width), got {config.input_shape}")
    if config.num_classes < 1:
        raise ConfigError("num_classes must be >= 1")

    shape: tuple[int, ...] = tuple(config.input_shape)
    shapes = [shape]
    for idx, spec in enumerate(config.layers):
        where = f"layer {idx} ({spec.kind})"
        if spec.kind not in LAYER_KINDS:
            raise ConfigError(f"{where}: unknown layer kind")
        spatial = spec.kind in ("conv", "maxpool", "avgpool", "residual-block", "flatten")
        if spatial and len(shape) != 3:
            raise ConfigError(f"{where}: needs a (C, H, W) input, got {shape}")
        if spec.kind == "conv":
            if spec.channels < 1 or spec.kernel < 1 or spec.stride < 1 or spec.padding < 0:
                raise ConfigError(f"{where}: invalid hyperparameters {spec}")
            oh = T.conv_output_size(shape[1], spec.kernel, spec.stride, spec.padding)
            ow = T.conv_output_size(shape[2], spec.kernel, spec.stride, spec.padding)
            if oh < 1 or ow < 1:
                raise ConfigError(f"{where}: kernel {spec.kernel} does not fit input {shape}")
            shape = (spec.channels, oh, ow)
        elif spec.kind in ("maxpool", "avgpool"):
            if spec.window < 1 or spec.stride < 1 or spec.window > min(shape[1:]):
                raise ConfigError(f"{where}: window {spec.window} does not fit input {shape}")
            shape = (shape[0],
                     T.conv_output_size(shape[1], spec.window, spec.stride, 0),
                     T.conv_output_size(shape[2], spec.window, spec.stride, 0))
        elif spec.kind == "residual-block":
            if spec.channels != shape[0]:
                raise ConfigError(f"{where}: identity skip needs {shape[0]} channels, block has {spec.channels}")
            if spec.kernel % 2 != 1:
                raise ConfigError(f"{where}: residual kernel must be odd")
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "linear":
            if len(shape) != 1:
                raise ConfigError(f"{where}: needs a flat input (add a flatten layer), got {shape}")
            if spec.units < 1:
                raise ConfigError(f"{where}: units must be >= 1")
            shape = (spec.units,)
        shapes.append(shape)
    if shape != (config.num_classes,):
        raise ConfigError(f"final layer outputs {shape}, expected ({config.num_classes},) logits")
    return shapes


@dataclass
class ParamStore:
    config: ModelConfig
    params: dict[str, np.ndarray]
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.first_moment.setdefault(name, np.zeros_like(p))
            self.second_moment.setdefault(name, np.zeros_like(p))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every weight and bias in build order."""
    shapes = layer_shapes(config)
    out = []
    for idx, (spec, in_shape) in enumerate(zip(config.layers, shapes)):
        if spec.kind == "conv":
            k = spec.kernel
            out.append((f"{idx}.weight", (spec.channels, in_shape[0], k, k), in_shape[0] * k * k))
            out.append((f"{idx}.bias", (spec.channels,), 0))
        elif spec.kind == "linear":
            out.append((f"{idx}.weight", (spec.units, in_shape[0]), in_shape[0]))
            out.append((f"{idx}.bias", (spec.units,), 0))
        elif spec.kind == "residual-block":
            c, k = spec.channels, spec.kernel
            for sub in ("conv1", "conv2"):
                out.append((f"{idx}.{sub}.weight", (c, c, k, k), c * k * k))
                out.append((f"{idx}.{sub}.bias", (c,), 0))
    return out


def build_model(config: ModelConfig, seed: int) -> ParamStore:
    """Kaiming-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in in param_shapes(config):
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=T.DTYPE)
        else:
            bound = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(T.DTYPE)
    return ParamStore(config, params)


class ForwardTrace(NamedTuple):
    logits: np.ndarray
    caches: list


def _residual_forward(x, p, prefix, spec):
    pad = spec.kernel // 2
    z1 = T.conv2d_forward(x, p[prefix + "conv1.weight"], p[prefix + "conv1.bias"], 1, pad)
    a1 = T.relu(z1)
    z2 = T.conv2d_forward(a1, p[prefix + "conv2.weight"], p[prefix + "conv2.bias"], 1, pad)
    s = T.add(x, z2)
    return T.relu(s), (x, z1, a1, s)


def forward(store: ParamStore, images) -> ForwardTrace:
    """Run the model on an NCHW batch. ``trace.logits`` are pre-softmax scores."""
    config, p = store.config, store.params
    x = T.as_tensor(images)
    if x.ndim != 4 or x.shape[1:] != tuple(config.input_shape):
        raise ShapeError(f"images must have shape (N, {', '.join(map(str, config.input_shape))}), got {x.shape}")
    caches = []
    for idx, spec in enumerate(config.layers):
        kind = spec.kind
        if kind == "conv":
            caches.append(x)
            x = T.conv2d_forward(x, p[f"{idx}.weight"], p[f"{idx}.bias"], spec.stride, spec.padding)
        elif kind == "relu":
            caches.append(x)
            x = T.relu(x)
        elif kind == "maxpool":
            shape = x.shape
            x, argmax = T.maxpool2d(x, spec.window, spec.stride)
            caches.append((argmax, shape))
        elif kind == "avgpool":
            caches.append(x.shape)
            x = T.avgpool2d(x, spec.window, spec.stride)
        elif kind == "flatten":
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        elif kind == "linear":
            caches.append(x)
            x = T.linear(x, p[f"{idx}.weight"], p[f"{idx}.bias"])
        elif kind == "residual-block":
            x, cache = _residual_forward(x, p, f"{idx}.", spec)
            caches.append(cache)
    return ForwardTrace(x, caches)


def backward(store: ParamStore, trace: ForwardTrace, logit_cotangent, need_params: bool = True):
    """Reverse pass. Returns ``(input_grad, param_grads)``; ``param_grads`` is an
    empty dict when ``need_params`` is false."""
    config, p = store.config, store.params
    g = T.as_tensor(logit_cotangent)
    if g.shape != trace.logits.shape:
        raise ShapeError(f"logit cotangent shape {g.shape} != logits shape {trace.logits.shape}")
    grads: dict[str, np.ndarray] = {}
    for idx in range(len(config.layers) - 1, -1, -1):
        spec, cache = config.layers[idx], trace.caches[idx]
        kind = spec.kind
        if kind == "conv":
            g, dw, db = T.conv2d_backward(cache, p[f"{idx}.weight"], g, spec.stride, spec.padding, need_params)
            if need_params:
                grads[f"{idx}.weight"], grads[f"{idx}.bias"] = dw, db
        elif kind == "relu":
            g = T.relu_backward(cache, g)
        elif kind == "maxpool":
            argmax, shape = cache
            g = T.maxpool2d_backward(argmax, g, shape, spec.window, spec.stride)
        elif kind == "avgpool":
            g = T.avgpool2d_backward(g, cache, spec.window, spec.stride)
        elif kind == "flatten":
            g = g.reshape(cache)
        elif kind == "linear":
            g, dw, db = T.linear_backward(cache, p[f"{idx}.weight"], g, need_params)
            if need_params:
                grads[f"{idx}.weight"], grads[f"{idx}.bias"] = dw, db
        elif kind == "residual-block":
            x, z1, a1, s = cache
            pad = spec.kernel // 2
            ds = T.relu_backward(s, g)
            dskip, dz2 = T.add_backward(ds)
            da1, dw2, db2 = T.conv2d_backward(a1, p[f"{idx}.conv2.weight"], dz2, 1, pad, need_params)
            dz1 = T.relu_backward(z1, da1)
            dx, dw1, db1 = T.conv2d_backward(x, p[f"{idx}.conv1.weight"], dz1, 1, pad, need_params)
            g = dskip + dx
            if need_params:
                grads.update({
                    f"{idx}.conv1.weight": dw1, f"{idx}.conv1.bias": db1,
                    f"{idx}.conv2.weight": dw2, f"{idx}.conv2.bias": db2,
                })
    return g, grads


def backward_input(store: ParamStore, trace: ForwardTrace, logit_cotangent) -> np.ndarray:
    """Gradient of ``sum(logit_cotangent * logits)`` with respect to the input images.

    With a one-hot cotangent at class ``c`` this is exactly dS_c/dI.
    """
    return backward(store, trace, logit_cotangent, need_params=False)[0]


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray
    predicted_class: int


def predict(logits) -> list[Prediction]:
    """Wrap each row of a logit matrix; ties resolve to the lowest class index."""
    logits = np.asarray(logits)
    return [Prediction(row, int(np.argmax(row))) for row in logits]


def predicted_classes(logits) -> np.ndarray:
    return np.argmax(np.asarray(logits), axis=1)


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood and its gradient ``(softmax - one_hot) / N``."""
    z = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"logits {z.shape} and labels {labels.shape} disagree")
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = -log_probs[np.arange(n), labels].mean(dtype=T.DTYPE)
    dz = np.exp(log_probs)
    dz[np.arange(n), labels] -= 1
    return T.DTYPE(loss), (dz / T.DTYPE(n)).astype(T.DTYPE)


def adamw_step(store: ParamStore, gradients: dict[str, np.ndarray], lr: float = LEARNING_RATE,
               beta1: float = BETA1, beta2: float = BETA2, epsilon: float = EPSILON,
               weight_decay: float = WEIGHT_DECAY) -> ParamStore:
    """One AdamW update with decoupled weight decay and bias-corrected moments.

    Returns a new store; the input store is left untouched.
    """
    step = store.step + 1
    f = T.DTYPE
    lr_, b1, b2, eps = f(lr), f(beta1), f(beta2), f(epsilon)
    decay = f(1.0 - lr * weight_decay)
    corr1 = f(1.0 - beta1 ** step)
    corr2 = f(1.0 - beta2 ** step)
    params, m_new, v_new = {}, {}, {}
    for name, p in store.params.items():
        g = gradients[name]
        m = b1 * store.first_moment[name] + (f(1) - b1) * g
        v = b2 * store.second_moment[name] + (f(1) - b2) * g * g
        m_hat = m / corr1
        v_hat = v / corr2
        params[name] = (p * decay - lr_ * m_hat / (np.sqrt(v_hat) + eps)).astype(f)
        m_new[name], v_new[name] = m, v
    return ParamStore(store.config, params, m_new, v_new, step)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def train(store: ParamStore, dataset: Split, epochs: int = EPOCHS, batch_size: int = BATCH_SIZE,
          lr: float = LEARNING_RATE, seed: int = 0, *, test: Split | None = None,
          stats: NormalizationStats | None = None, weight_decay: float = WEIGHT_DECAY,
          on_epoch: Callable[[EpochLog], None] | None = None):
    """Minibatch AdamW training. Shuffling depends only on ``seed``.

    ``train_acc`` is the running accuracy over the epoch's minibatches;
    ``test_acc`` is NaN when no test split is given.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if batch_size < 1 or epochs < 0:
        raise ConfigError(f"invalid epochs={epochs} / batch_size={batch_size}")
    rng = np.random.default_rng(seed)
    history: list[EpochLog] = []
    n = len(dataset)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for sl in _batches(n, batch_size):
            idx = order[sl]
            x = dataset.images[idx]
            if stats is not None:
                x = stats.apply(x)
            y = dataset.labels[idx]
            trace = forward(store, x)
            loss, dlogits = cross_entropy_loss(trace.logits, y)
            _, grads = backward(store, trace, dlogits)
            store = adamw_step(store, grads, lr, weight_decay=weight_decay)
            loss_sum += float(loss) * len(idx)
            correct += int((predicted_classes(trace.logits) == y).sum())
        test_acc = evaluate_accuracy(store, test, stats) if test is not None else float("nan")
        entry = EpochLog(epoch, loss_sum / n, correct / n, test_acc)
        history.append(entry)
        log.info("epoch %d loss %.4f train_acc %.4f test_acc %.4f",
                 entry.epoch, entry.train_loss, entry.train_acc, entry.test_acc)
        if on_epoch is not None:
            on_epoch(entry)
    return store, history


def logits_for(store: ParamStore, images, stats: NormalizationStats | None = None,
               batch_size: int = 256) -> np.ndarray:
    """Logits for raw images, normalized with ``stats`` and evaluated in fixed chunks."""
    images = np.asarray(images)
    out = np.empty((len(images), store.config.num_classes), dtype=T.DTYPE)
    for sl in _batches(len(images), batch_size):
        x = images[sl]
        if stats is not None:
            x = stats.apply(x)
        out[sl] = forward(store, x).logits
    return out


def evaluate_accuracy(store: ParamStore, dataset: Split, stats: NormalizationStats | None = None,
                      batch_size: int = 256) -> float:
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate accuracy on an empty split")
    preds = predicted_classes(logits_for(store, dataset.images, stats, batch_size))
    return float((preds == dataset.labels).mean())
