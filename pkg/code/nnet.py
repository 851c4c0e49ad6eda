# %%
"""
Residual BiLSTM acoustic model in plain numpy: 2-D convolutions over
(time, frequency), a stack of bidirectional LSTM layers with additive
shortcuts, a fully connected output layer and softmax.

Every layer has an explicit forward/backward pair; gradients are checked
against central differences in the test suite.
"""
import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, softmax

from config import canonical_json, to_dict
from ctc import ctc_loss_and_grad
from errors import ConfigError, FormatError, ImpossibleAlignment, InputTooShort

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"RBCK"
CKPT_VERSION = 1
_HEADER = "<4sII"

# ----------------------------
# 0. configuration
# ----------------------------

@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    stride_h: int
    stride_w: int
    channels: int

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride_h, self.stride_w, self.channels) < 1:
            raise ConfigError(f"conv layer values must be positive: {self}")


def _as_conv(spec):
    if isinstance(spec, ConvSpec):
        return spec
    if isinstance(spec, dict):
        return ConvSpec(**spec)
    return ConvSpec(*spec)


@dataclass(frozen=True)
class ModelConfig:
    cnn_layers: tuple = (ConvSpec(11, 41, 2, 2, 32), ConvSpec(11, 21, 1, 2, 32))
    lstm_layers: int = 7
    hidden_size: int = 1024
    residual: bool = True
    residual_span: int = 1
    combine: bool = True
    activation: str = "relu"
    alphabet_size: int = 29
    input_features: int = 161

    def __post_init__(self):
        object.__setattr__(self, "cnn_layers", tuple(_as_conv(s) for s in self.cnn_layers))
        if not self.cnn_layers:
            raise ConfigError("at least one CNN layer is required")
        if self.lstm_layers < 1:
            raise ConfigError("lstm_layers must be at least 1")
        if self.hidden_size < 1:
            raise ConfigError("hidden_size must be positive")
        if self.residual_span not in (1, 2):
            raise ConfigError("residual_span must be 1 or 2")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.alphabet_size < 2:
            raise ConfigError("alphabet_size must include the blank and one label")
        if self.feature_width < 1:
            raise ConfigError("CNN strides leave no frequency bins")
        widths = self.layer_widths()
        for layer in range(self.lstm_layers):
            start = self.shortcut_source(layer)
            if start is not None and widths[start][0] != widths[layer][1]:
                raise ConfigError(
                    f"residual shortcut into lstm layer {layer} adds width {widths[start][0]} "
                    f"to width {widths[layer][1]}; enable combine or match hidden_size"
                )

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    @classmethod
    def stage1_full(cls, alphabet_size=29):
        return cls(lstm_layers=7, hidden_size=1024, alphabet_size=alphabet_size)

    @classmethod
    def stage2_full(cls, alphabet_size=29):
        return cls(lstm_layers=13, hidden_size=512, alphabet_size=alphabet_size)

    @classmethod
    def stage1_toy(cls, alphabet_size=7):
        return cls(
            cnn_layers=(ConvSpec(5, 11, 2, 2, 8), ConvSpec(5, 11, 1, 2, 8)),
            lstm_layers=2, hidden_size=64, alphabet_size=alphabet_size,
        )

    @classmethod
    def stage2_toy(cls, alphabet_size=7):
        return cls(
            cnn_layers=(ConvSpec(5, 11, 2, 2, 8), ConvSpec(5, 11, 1, 2, 8)),
            lstm_layers=3, hidden_size=96, alphabet_size=alphabet_size,
        )

    @property
    def blank_index(self):
        return self.alphabet_size - 1

    @property
    def feature_width(self):
        freq = self.input_features
        for spec in self.cnn_layers:
            freq = (freq - spec.kernel_w) // spec.stride_w + 1
            if freq < 1:
                return 0
        return freq * self.cnn_layers[-1].channels

    def layer_widths(self):
        """(input width, output width) of every BiLSTM layer."""
        widths = []
        width = self.feature_width
        for _ in range(self.lstm_layers):
            out = width if self.combine else self.hidden_size
            widths.append((width, out))
            width = out
        return widths

    def shortcut_source(self, layer):
        """Index of the layer whose input is added to `layer`'s output, or None."""
        if not self.residual or (layer + 1) % self.residual_span:
            return None
        return layer - self.residual_span + 1

    def output_frames(self, n_frames):
        for spec in self.cnn_layers:
            n_frames = (n_frames - spec.kernel_h) // spec.stride_h + 1
        return n_frames

    def receptive_field(self):
        """Fewest input frames that still leave one output frame."""
        needed = 1
        for spec in reversed(self.cnn_layers):
            needed = (needed - 1) * spec.stride_h + spec.kernel_h
        return needed


@dataclass(frozen=True)
class TrainSchedule:
    lr_phases: tuple = ((10, 5e-4), (5, 5e-5), (5, 5e-6))
    beta1: float = 0.99
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 3
    batch_size: int = 8

    def __post_init__(self):
        phases = tuple((int(n), float(lr)) for n, lr in self.lr_phases)
        object.__setattr__(self, "lr_phases", phases)
        if not phases or any(n < 1 for n, _ in phases):
            raise ConfigError("every learning-rate phase needs at least one epoch")
        rates = [lr for _, lr in phases]
        if any(lr < 0 for lr in rates) or any(a <= b for a, b in zip(rates, rates[1:])):
            raise ConfigError(f"learning rates must be non-negative and strictly decreasing: {rates}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    @classmethod
    def from_dict(cls, data):
        return cls(**data)

    @classmethod
    def scaled(cls, epochs, base_lr=5e-4, **kwargs):
        """Same 2:1:1 phase shape and tenfold decays over a different epoch count."""
        if epochs < 3:
            return cls(lr_phases=((epochs, base_lr),), **kwargs)
        first = epochs // 2
        second = (epochs - first) // 2
        return cls(lr_phases=((first, base_lr), (second, base_lr / 10),
                              (epochs - first - second, base_lr / 100)), **kwargs)

    @property
    def epochs(self):
        return sum(n for n, _ in self.lr_phases)

    def lr_at(self, epoch):
        """Learning rate of a 1-based epoch."""
        if not 1 <= epoch <= self.epochs:
            raise ConfigError(f"epoch {epoch} outside 1..{self.epochs}")
        end = 0
        for n, lr in self.lr_phases:
            end += n
            if epoch <= end:
                return lr


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Checkpoint:
    config: ModelConfig
    params: dict = field(repr=False)
    optimizer_state: Optional[AdamState] = field(default=None, repr=False)
    epoch: int = 0
    rng_seed: int = 0
    frozen: tuple = ()


# ----------------------------
# 1. parameters
# ----------------------------

def param_shapes(cfg):
    """Ordered name -> shape map for a config."""
    shapes = {}
    channels = 1
    for i, spec in enumerate(cfg.cnn_layers):
        shapes[f"cnn.{i}.weight"] = (spec.channels, channels, spec.kernel_h, spec.kernel_w)
        shapes[f"cnn.{i}.bias"] = (spec.channels,)
        channels = spec.channels
    hidden = cfg.hidden_size
    for layer, (width_in, width_out) in enumerate(cfg.layer_widths()):
        for direction in ("fwd", "bwd"):
            shapes[f"lstm.{layer}.{direction}.wx"] = (width_in, 4 * hidden)
            shapes[f"lstm.{layer}.{direction}.wh"] = (hidden, 4 * hidden)
            shapes[f"lstm.{layer}.{direction}.b"] = (4 * hidden,)
        if cfg.combine:
            shapes[f"lstm.{layer}.combine.weight"] = (hidden, width_out)
            shapes[f"lstm.{layer}.combine.bias"] = (width_out,)
    last = cfg.layer_widths()[-1][1]
    shapes["fc.weight"] = (last, cfg.alphabet_size)
    shapes["fc.bias"] = (cfg.alphabet_size,)
    return shapes


def parameter_count(cfg):
    return sum(math.prod(shape) for shape in param_shapes(cfg).values())


def _glorot(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_model(cfg, seed=0):
    """Fresh checkpoint with Glorot-uniform weights, zero biases, forget bias 1."""
    rng = np.random.default_rng(seed)
    params = {}
    hidden = cfg.hidden_size
    for name, shape in param_shapes(cfg).items():
        if name.startswith("cnn.") and name.endswith("weight"):
            receptive = shape[2] * shape[3]
            params[name] = _glorot(rng, shape, shape[1] * receptive, shape[0] * receptive)
        elif name.endswith((".wx", ".wh", "weight")):
            params[name] = _glorot(rng, shape, shape[0], shape[1])
        else:
            params[name] = np.zeros(shape)
        if name.endswith(".b"):
            params[name][hidden : 2 * hidden] = 1.0
    logger.debug("built model with %d parameters", parameter_count(cfg))
    return Checkpoint(config=cfg, params=params, rng_seed=seed)


def parameter_digest(params, prefix=""):
    """sha256 over the names, shapes and bytes of every array under `prefix`."""
    digest = hashlib.sha256()
    for name in sorted(params):
        if name.startswith(prefix):
            array = np.ascontiguousarray(params[name])
            digest.update(name.encode())
            digest.update(str(array.shape).encode())
            digest.update(array.tobytes())
    return digest.hexdigest()


# ----------------------------
# 2. layer primitives
# ----------------------------

def _activate(x, kind):
    return np.maximum(x, 0.0) if kind == "relu" else np.tanh(x)


def _activation_grad(out, kind):
    return (out > 0).astype(out.dtype) if kind == "relu" else 1.0 - out ** 2


def conv2d_forward(x, weight, bias, stride):
    """Valid cross-correlation of x (C_in, T, F) with weight (C_out, C_in, kh, kw)."""
    kh, kw = weight.shape[2:]
    sh, sw = stride
    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    out = np.einsum("ctfij,ocij->otf", windows, weight, optimize=True) + bias[:, None, None]
    return out, windows


def conv2d_backward(grad_out, x_shape, windows, weight, stride):
    kh, kw = weight.shape[2:]
    sh, sw = stride
    out_t, out_f = grad_out.shape[1:]
    grad_w = np.einsum("ctfij,otf->ocij", windows, grad_out, optimize=True)
    grad_b = grad_out.sum(axis=(1, 2))
    grad_windows = np.einsum("otf,ocij->ctfij", grad_out, weight, optimize=True)
    grad_x = np.zeros(x_shape)
    for i in range(kh):
        for j in range(kw):
            grad_x[:, i : i + sh * (out_t - 1) + 1 : sh, j : j + sw * (out_f - 1) + 1 : sw] += grad_windows[..., i, j]
    return grad_x, grad_w, grad_b


def lstm_forward(x, wx, wh, b):
    """Unidirectional LSTM over x (T, D); gate order is input, forget, cell, output."""
    n_steps = x.shape[0]
    hidden = wh.shape[0]
    zx = x @ wx + b
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    hs = np.empty((n_steps, hidden))
    cs = np.empty((n_steps, hidden))
    gates = np.empty((n_steps, 4 * hidden))
    for t in range(n_steps):
        z = zx[t] + h @ wh
        i = expit(z[:hidden])
        f = expit(z[hidden : 2 * hidden])
        g = np.tanh(z[2 * hidden : 3 * hidden])
        o = expit(z[3 * hidden :])
        c = f * c + i * g
        h = o * np.tanh(c)
        hs[t], cs[t] = h, c
        gates[t] = np.concatenate([i, f, g, o])
    return hs, (x, hs, cs, gates)


def lstm_backward(grad_hs, cache, wx, wh):
    x, hs, cs, gates = cache
    n_steps, hidden = hs.shape
    grad_z = np.empty((n_steps, 4 * hidden))
    grad_wh = np.zeros_like(wh)
    dh_next = np.zeros(hidden)
    dc_next = np.zeros(hidden)
    for t in reversed(range(n_steps)):
        i, f, g, o = np.split(gates[t], 4)
        c_prev = cs[t - 1] if t > 0 else np.zeros(hidden)
        h_prev = hs[t - 1] if t > 0 else np.zeros(hidden)
        tanh_c = np.tanh(cs[t])
        dh = grad_hs[t] + dh_next
        dc = dh * o * (1.0 - tanh_c ** 2) + dc_next
        dz = np.concatenate([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g ** 2),
            dh * tanh_c * o * (1.0 - o),
        ])
        grad_z[t] = dz
        grad_wh += np.outer(h_prev, dz)
        dh_next = dz @ wh.T
        dc_next = dc * f
    return grad_z @ wx.T, x.T @ grad_z, grad_wh, grad_z.sum(axis=0)


def dense_forward(x, weight, bias):
    return x @ weight + bias


def dense_backward(grad_out, x, weight):
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def bilstm_forward(x, params, prefix, combine):
    """Forward and time-reversed LSTMs, summed, then optionally projected."""
    h_fwd, cache_fwd = lstm_forward(x, params[prefix + "fwd.wx"], params[prefix + "fwd.wh"], params[prefix + "fwd.b"])
    h_bwd, cache_bwd = lstm_forward(x[::-1], params[prefix + "bwd.wx"], params[prefix + "bwd.wh"], params[prefix + "bwd.b"])
    summed = h_fwd + h_bwd[::-1]
    out = dense_forward(summed, params[prefix + "combine.weight"], params[prefix + "combine.bias"]) if combine else summed
    return out, (cache_fwd, cache_bwd, summed)


def bilstm_backward(grad_out, cache, params, prefix, combine):
    cache_fwd, cache_bwd, summed = cache
    grads = {}
    if combine:
        grad_sum, grads[prefix + "combine.weight"], grads[prefix + "combine.bias"] = dense_backward(
            grad_out, summed, params[prefix + "combine.weight"])
    else:
        grad_sum = grad_out
    dx_fwd, grads[prefix + "fwd.wx"], grads[prefix + "fwd.wh"], grads[prefix + "fwd.b"] = lstm_backward(
        grad_sum, cache_fwd, params[prefix + "fwd.wx"], params[prefix + "fwd.wh"])
    dx_bwd, grads[prefix + "bwd.wx"], grads[prefix + "bwd.wh"], grads[prefix + "bwd.b"] = lstm_backward(
        grad_sum[::-1], cache_bwd, params[prefix + "bwd.wx"], params[prefix + "bwd.wh"])
    return dx_fwd + dx_bwd[::-1], grads


# ----------------------------
# 3. full model
# ----------------------------

@dataclass(frozen=True)
class ForwardCache:
    conv: list
    conv_out_shape: tuple
    lstm_inputs: list
    lstm: list
    fc_input: np.ndarray


@dataclass(frozen=True)
class ForwardResult:
    posts: np.ndarray
    logits: np.ndarray
    cache: ForwardCache = field(repr=False)


def forward(ckpt, frames):
    """Posteriors (T', alphabet_size) for a spectrogram or a (T, F) array."""
    cfg = ckpt.config
    params = ckpt.params
    frames = np.asarray(getattr(frames, "frames", frames), dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != cfg.input_features:
        raise ConfigError(f"expected (T, {cfg.input_features}) features, got {frames.shape}")
    needed = cfg.receptive_field()
    if frames.shape[0] < needed:
        raise InputTooShort(frames.shape[0], needed)

    h = frames[None]
    conv_cache = []
    for i, spec in enumerate(cfg.cnn_layers):
        z, windows = conv2d_forward(h, params[f"cnn.{i}.weight"], params[f"cnn.{i}.bias"], (spec.stride_h, spec.stride_w))
        a = _activate(z, cfg.activation)
        conv_cache.append((h.shape, windows, a))
        h = a

    channels, n_out, freq = h.shape
    seq = h.transpose(1, 0, 2).reshape(n_out, channels * freq)
    lstm_inputs = []
    lstm_cache = []
    for layer in range(cfg.lstm_layers):
        lstm_inputs.append(seq)
        y, cache = bilstm_forward(seq, params, f"lstm.{layer}.", cfg.combine)
        source = cfg.shortcut_source(layer)
        if source is not None:
            y = y + lstm_inputs[source]
        lstm_cache.append(cache)
        seq = y

    logits = dense_forward(seq, params["fc.weight"], params["fc.bias"])
    cache = ForwardCache(conv=conv_cache, conv_out_shape=h.shape, lstm_inputs=lstm_inputs, lstm=lstm_cache, fc_input=seq)
    return ForwardResult(posts=softmax(logits, axis=1), logits=logits, cache=cache)


def backward(ckpt, cache, grad_logits):
    """Gradients of every named parameter given d(loss)/d(logits)."""
    cfg = ckpt.config
    params = ckpt.params
    grads = {}
    d, grads["fc.weight"], grads["fc.bias"] = dense_backward(grad_logits, cache.fc_input, params["fc.weight"])

    shortcut_grads = {}
    for layer in reversed(range(cfg.lstm_layers)):
        source = cfg.shortcut_source(layer)
        if source is not None:
            shortcut_grads[source] = shortcut_grads.get(source, 0.0) + d
        dx, layer_grads = bilstm_backward(d, cache.lstm[layer], params, f"lstm.{layer}.", cfg.combine)
        grads.update(layer_grads)
        d = dx + shortcut_grads.pop(layer, 0.0)

    channels, n_out, freq = cache.conv_out_shape
    dh = d.reshape(n_out, channels, freq).transpose(1, 0, 2)
    for i in reversed(range(len(cfg.cnn_layers))):
        spec = cfg.cnn_layers[i]
        in_shape, windows, a = cache.conv[i]
        dz = dh * _activation_grad(a, cfg.activation)
        dh, grads[f"cnn.{i}.weight"], grads[f"cnn.{i}.bias"] = conv2d_backward(
            dz, in_shape, windows, params[f"cnn.{i}.weight"], (spec.stride_h, spec.stride_w))
    return grads


def sample_loss_and_grads(ckpt, frames, target):
    result = forward(ckpt, frames)
    ctc = ctc_loss_and_grad(result.logits, target, ckpt.config.blank_index)
    return ctc.loss, backward(ckpt, result.cache, ctc.grad)


# ----------------------------
# 4. optimization
# ----------------------------

def adam_step(params, grads, state, lr, sched, frozen=()):
    """One Adam update; returns new parameter and state objects."""
    step = state.step + 1
    new_params, m, v = {}, {}, {}
    for name, value in params.items():
        if name in frozen or name not in grads:
            new_params[name] = value
            if name in state.m:
                m[name], v[name] = state.m[name], state.v[name]
            continue
        g = grads[name]
        m[name] = sched.beta1 * state.m.get(name, 0.0) + (1 - sched.beta1) * g
        v[name] = sched.beta2 * state.v.get(name, 0.0) + (1 - sched.beta2) * g ** 2
        m_hat = m[name] / (1 - sched.beta1 ** step)
        v_hat = v[name] / (1 - sched.beta2 ** step)
        new_params[name] = value - lr * m_hat / (np.sqrt(v_hat) + sched.eps)
    return new_params, AdamState(step=step, m=m, v=v)


def _batch_gradients(ckpt, ids, data, jobs):
    """Per-sample losses and gradients; skipped ids come back as None."""
    def work(utt_id):
        frames, target = data[utt_id]
        try:
            return sample_loss_and_grads(ckpt, frames, target)
        except (ImpossibleAlignment, InputTooShort) as exc:
            logger.debug("skipping %s: %s", utt_id, exc)
            return None

    if jobs <= 1:
        return [work(utt_id) for utt_id in ids]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(work, ids))


def evaluate_loss(ckpt, ids, data):
    """Mean CTC loss over `ids` and the number of skipped samples."""
    losses = []
    skipped = 0
    for utt_id in ids:
        frames, target = data[utt_id]
        try:
            result = forward(ckpt, frames)
            losses.append(ctc_loss_and_grad(result.logits, target, ckpt.config.blank_index).loss)
        except (ImpossibleAlignment, InputTooShort):
            skipped += 1
    return (float(np.mean(losses)) if losses else math.nan), skipped


def train(ckpt, plan, sched, data, dev_ids=None, seed=0, jobs=1, shuffle=True):
    """
    Train over a batch plan for `sched.epochs` epochs.

    `data` maps utterance id -> (frames, target labels). Gradients within a
    batch are averaged in plan order, so the result does not depend on
    `jobs`. With dev ids, training stops after `patience` epochs without a
    dev-loss improvement and the best checkpoint is returned.
    """
    params = {name: value.copy() for name, value in ckpt.params.items()}
    state = ckpt.optimizer_state or AdamState()
    frozen = set(ckpt.frozen)
    rows = []
    best = None
    stale = 0

    for epoch in range(1, sched.epochs + 1):
        lr = sched.lr_at(epoch)
        order = plan.shuffled(seed + epoch) if shuffle else plan
        losses = []
        skipped = 0
        steps = 0
        for batch in order.batches:
            current = replace(ckpt, params=params)
            results = _batch_gradients(current, batch.ids, data, jobs)
            used = [r for r in results if r is not None]
            skipped += len(results) - len(used)
            if not used:
                continue
            total = {}
            for loss, grads in used:
                losses.append(loss)
                for name, g in grads.items():
                    total[name] = total[name] + g if name in total else g.copy()
            mean = {name: g / len(used) for name, g in total.items()}
            params, state = adam_step(params, mean, state, lr, sched, frozen)
            steps += 1

        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)) if losses else math.nan,
               "skipped": skipped, "steps": steps}
        current = replace(ckpt, params=params, optimizer_state=state, epoch=ckpt.epoch + epoch)
        if dev_ids:
            row["dev_loss"], _ = evaluate_loss(current, dev_ids, data)
        rows.append(row)
        logger.info("epoch %d lr=%g train_loss=%.4f dev_loss=%s skipped=%d",
                    epoch, lr, row["train_loss"], f"{row['dev_loss']:.4f}" if dev_ids else "-", skipped)

        if not dev_ids:
            best = current
            continue
        if best is None or row["dev_loss"] < best_loss:
            best, best_loss, stale = current, row["dev_loss"], 0
        else:
            stale += 1
            if stale >= sched.patience:
                logger.info("early stop after epoch %d, best dev loss %.4f", epoch, best_loss)
                break

    return (best or ckpt), pd.DataFrame(rows)


# ----------------------------
# 5. transfer and persistence
# ----------------------------

def transfer_cnn_weights(source, target, freeze=False):
    """Copy CNN arrays from `source` into `target`; other parameters are untouched."""
    if (source.config.cnn_layers != target.config.cnn_layers
            or source.config.input_features != target.config.input_features):
        raise ConfigError("CNN configurations differ between checkpoints")
    params = dict(target.params)
    names = [name for name in source.params if name.startswith("cnn.")]
    for name in names:
        if source.params[name].shape != target.params[name].shape:
            raise ConfigError(f"{name}: shape {source.params[name].shape} != {target.params[name].shape}")
        params[name] = source.params[name].copy()
    frozen = tuple(sorted(set(target.frozen) | set(names))) if freeze else target.frozen
    return replace(target, params=params, frozen=frozen)


def save_checkpoint(path, ckpt):
    """
    Binary layout: magic, version and header length (little-endian u32), a
    canonical JSON header, then the raw little-endian arrays in header order.
    """
    arrays = [(name, ckpt.params[name]) for name in sorted(ckpt.params)]
    state = ckpt.optimizer_state
    if state is not None:
        arrays += [(f"adam.m.{name}", state.m[name]) for name in sorted(state.m)]
        arrays += [(f"adam.v.{name}", state.v[name]) for name in sorted(state.v)]
    layout = []
    blobs = []
    for name, array in arrays:
        array = np.asarray(array)
        dtype = array.dtype.newbyteorder("<")
        layout.append({"name": name, "dtype": dtype.str, "shape": list(array.shape)})
        blobs.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    header = canonical_json({
        "config": to_dict(ckpt.config),
        "epoch": ckpt.epoch,
        "rng_seed": ckpt.rng_seed,
        "frozen": list(ckpt.frozen),
        "adam_step": None if state is None else state.step,
        "arrays": layout,
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack(_HEADER, CKPT_MAGIC, CKPT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as f:
        payload = f.read()
    prefix = struct.calcsize(_HEADER)
    if len(payload) < prefix:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, header_len = struct.unpack_from(_HEADER, payload)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise FormatError(f"{path}: not a version {CKPT_VERSION} checkpoint")
    try:
        header = json.loads(payload[prefix : prefix + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc

    cfg = ModelConfig.from_dict(header["config"])
    offset = prefix + header_len
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = math.prod(entry["shape"])
        end = offset + count * dtype.itemsize
        if end > len(payload):
            raise FormatError(f"{path}: array {entry['name']} runs past end of file")
        arrays[entry["name"]] = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(entry["shape"]).copy()
        offset = end

    params = {name: a for name, a in arrays.items() if not name.startswith("adam.")}
    expected = param_shapes(cfg)
    if set(params) != set(expected) or any(params[n].shape != tuple(s) for n, s in expected.items()):
        raise ConfigError(f"{path}: parameter shapes do not match the stored config")
    state = None
    if header["adam_step"] is not None:
        state = AdamState(
            step=header["adam_step"],
            m={n[len("adam.m."):]: a for n, a in arrays.items() if n.startswith("adam.m.")},
            v={n[len("adam.v."):]: a for n, a in arrays.items() if n.startswith("adam.v.")},
        )
    return Checkpoint(config=cfg, params=params, optimizer_state=state, epoch=header["epoch"],
                      rng_seed=header["rng_seed"], frozen=tuple(header["frozen"]))
