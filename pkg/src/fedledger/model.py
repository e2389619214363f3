"""Single-LSTM-layer convolutional classifier with hand-written gradients.

Layout of the network, in parameter order::

    conv{i}.weight (filters, in, width), conv{i}.bias   valid 1-D conv + ReLU
    lstm.weight_ih (features, 4H), lstm.weight_hh (H, 4H), lstm.bias (4H)
    dense.weight (H, classes), dense.bias (classes)

LSTM gate blocks are ordered input, forget, candidate, output. Everything is
float64 and deterministic for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, logsumexp

from .aggregation import ClientUpdate
from .metrics import Metrics, confusion_matrix, precision_recall_f1
from .params import ParameterSet, check_schema


@dataclass
class ModelConfig:
    in_channels: int = 3
    window_len: int = 50
    conv_layers: int = 4
    conv_filters: int = 64
    filter_size: int = 11
    hidden_units: int = 128
    num_classes: int = 6
    # False zeroes the forget-gate bias too (all biases exactly 0.0)
    unit_forget_bias: bool = True

    def __post_init__(self) -> None:
        for name in ("in_channels", "window_len", "conv_layers", "conv_filters",
                     "filter_size", "hidden_units", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ValueError(f"ModelConfig.{name} must be a positive integer, got {value!r}")
        if self.window_len <= self.conv_layers * (self.filter_size - 1):
            raise ValueError(
                f"window_len={self.window_len} too short for {self.conv_layers} conv layers "
                f"of width {self.filter_size}"
            )

    @property
    def seq_len(self) -> int:
        """Time steps left after the valid convolutions."""
        return self.window_len - self.conv_layers * (self.filter_size - 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    local_epochs: int = 1
    batch_size: int = 64
    prox_mu: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    first_moment: ParameterSet
    second_moment: ParameterSet
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, params: ParameterSet, **kwargs) -> "AdamState":
        zeros = params.zeros_like()
        return cls(zeros, zeros, **kwargs)


def parameter_schema(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    schema = []
    channels = config.in_channels
    for i in range(config.conv_layers):
        schema.append((f"conv{i}.weight", (config.conv_filters, channels, config.filter_size)))
        schema.append((f"conv{i}.bias", (config.conv_filters,)))
        channels = config.conv_filters
    h = config.hidden_units
    schema += [
        ("lstm.weight_ih", (channels, 4 * h)),
        ("lstm.weight_hh", (h, 4 * h)),
        ("lstm.bias", (4 * h,)),
        ("dense.weight", (h, config.num_classes)),
        ("dense.bias", (config.num_classes,)),
    ]
    return schema


def _glorot_limit(name: str, shape: tuple[int, ...]) -> float:
    if len(shape) == 3:
        out_ch, in_ch, width = shape
        fan_in, fan_out = in_ch * width, out_ch * width
    else:
        fan_in, fan_out = shape
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_glorot(config: ModelConfig, seed: int) -> ParameterSet:
    """Glorot-uniform weights, zero biases, forget-gate bias 1.0 unless disabled."""
    rng = np.random.default_rng(seed)
    entries = []
    for name, shape in parameter_schema(config):
        if name.endswith("bias"):
            values = np.zeros(shape)
            if name == "lstm.bias" and config.unit_forget_bias:
                h = config.hidden_units
                values[h:2 * h] = 1.0
        else:
            limit = _glorot_limit(name, shape)
            values = rng.uniform(-limit, limit, size=shape)
        entries.append((name, values))
    return ParameterSet(entries)


def _check_batch(batch: np.ndarray, config: ModelConfig) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[1:] != (config.in_channels, config.window_len):
        raise ValueError(
            f"expected windows of shape (B, {config.in_channels}, {config.window_len}), "
            f"got {batch.shape}"
        )
    return batch


def forward(params: ParameterSet, batch: np.ndarray, config: ModelConfig):
    """Class scores ``(B, K)`` plus the activation cache used by :func:`backward`."""
    batch = _check_batch(batch, config)
    n = batch.shape[0]
    width = config.filter_size
    # channels-last (B, T, C) internally
    a = np.ascontiguousarray(batch.transpose(0, 2, 1))
    conv_cache = []
    for i in range(config.conv_layers):
        w = params[f"conv{i}.weight"]
        filters, channels, _ = w.shape
        t_out = a.shape[1] - width + 1
        cols = sliding_window_view(a, width, axis=1).reshape(n * t_out, channels * width)
        z = cols @ w.reshape(filters, channels * width).T + params[f"conv{i}.bias"]
        mask = z > 0
        a_in_shape = a.shape
        a = np.where(mask, z, 0.0).reshape(n, t_out, filters)
        conv_cache.append((cols, mask, a_in_shape))

    seq = a
    steps = seq.shape[1]
    h_units = config.hidden_units
    w_ih, w_hh, b = params["lstm.weight_ih"], params["lstm.weight_hh"], params["lstm.bias"]
    x_proj = (seq.reshape(n * steps, -1) @ w_ih).reshape(n, steps, 4 * h_units) + b
    h = np.zeros((n, h_units))
    c = np.zeros((n, h_units))
    hs, cs, gates = [h], [c], []
    for t in range(steps):
        pre = x_proj[:, t] + h @ w_hh
        i_g = expit(pre[:, :h_units])
        f_g = expit(pre[:, h_units:2 * h_units])
        g_g = np.tanh(pre[:, 2 * h_units:3 * h_units])
        o_g = expit(pre[:, 3 * h_units:])
        c = f_g * c + i_g * g_g
        h = o_g * np.tanh(c)
        gates.append((i_g, f_g, g_g, o_g))
        hs.append(h)
        cs.append(c)

    scores = h @ params["dense.weight"] + params["dense.bias"]
    cache = {"conv": conv_cache, "seq": seq, "hs": hs, "cs": cs, "gates": gates}
    return scores, cache


def backward(params: ParameterSet, dscores: np.ndarray, cache: dict, config: ModelConfig) -> ParameterSet:
    """Gradients of a scalar loss given ``d loss / d scores``."""
    grads: dict[str, np.ndarray] = {}
    hs, cs, gates, seq = cache["hs"], cache["cs"], cache["gates"], cache["seq"]
    n, steps, features = seq.shape
    h_units = config.hidden_units

    grads["dense.weight"] = hs[-1].T @ dscores
    grads["dense.bias"] = dscores.sum(axis=0)

    w_hh = params["lstm.weight_hh"]
    dh = dscores @ params["dense.weight"].T
    dc = np.zeros((n, h_units))
    dpre_all = np.empty((n, steps, 4 * h_units))
    dw_hh = np.zeros_like(w_hh)
    for t in range(steps - 1, -1, -1):
        i_g, f_g, g_g, o_g = gates[t]
        tanh_c = np.tanh(cs[t + 1])
        dc = dc + dh * o_g * (1.0 - tanh_c * tanh_c)
        dpre = dpre_all[:, t]
        dpre[:, :h_units] = dc * g_g * i_g * (1.0 - i_g)
        dpre[:, h_units:2 * h_units] = dc * cs[t] * f_g * (1.0 - f_g)
        dpre[:, 2 * h_units:3 * h_units] = dc * i_g * (1.0 - g_g * g_g)
        dpre[:, 3 * h_units:] = dh * tanh_c * o_g * (1.0 - o_g)
        dw_hh += hs[t].T @ dpre
        dh = dpre @ w_hh.T
        dc = dc * f_g
    flat_dpre = dpre_all.reshape(n * steps, 4 * h_units)
    grads["lstm.weight_ih"] = seq.reshape(n * steps, features).T @ flat_dpre
    grads["lstm.weight_hh"] = dw_hh
    grads["lstm.bias"] = flat_dpre.sum(axis=0)
    da = (flat_dpre @ params["lstm.weight_ih"].T).reshape(n, steps, features)

    width = config.filter_size
    for i in reversed(range(config.conv_layers)):
        cols, mask, in_shape = cache["conv"][i]
        w = params[f"conv{i}.weight"]
        filters, channels, _ = w.shape
        dz = np.where(mask, da.reshape(-1, filters), 0.0)
        grads[f"conv{i}.weight"] = (dz.T @ cols).reshape(w.shape)
        grads[f"conv{i}.bias"] = dz.sum(axis=0)
        if i == 0:
            break
        dcols = (dz @ w.reshape(filters, channels * width)).reshape(n, -1, channels, width)
        t_out = dcols.shape[1]
        da = np.zeros(in_shape)
        for j in range(width):
            da[:, j:j + t_out, :] += dcols[:, :, :, j]

    return ParameterSet._from_owned({name: grads[name] for name in params})


def class_weights_for(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Inverse-frequency weights ``N / (K * count_k)``; absent classes get 0."""
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    weights = np.zeros(num_classes)
    present = counts > 0
    weights[present] = labels.size / (num_classes * counts[present])
    return weights


def loss_and_grad(params: ParameterSet, batch: np.ndarray, labels: np.ndarray,
                  config: ModelConfig, train_config: TrainConfig,
                  global_ref: ParameterSet | None = None,
                  class_weights: np.ndarray | None = None) -> tuple[float, ParameterSet]:
    """Class-weighted softmax cross-entropy (plus proximal term) and its gradient.

    ``class_weights`` defaults to all ones. With ``train_config.prox_mu > 0`` the
    loss gains ``prox_mu / 2 * ||params - global_ref||^2``.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != np.shape(batch)[0]:
        raise ValueError("labels must be a vector with one entry per window")
    if labels.size and (labels.min() < 0 or labels.max() >= config.num_classes):
        raise ValueError(f"labels must lie in [0, {config.num_classes})")
    if class_weights is None:
        class_weights = np.ones(config.num_classes)
    n = labels.size

    scores, cache = forward(params, batch, config)
    lse = logsumexp(scores, axis=1)
    picked = scores[np.arange(n), labels]
    w = class_weights[labels]
    loss = float(np.sum(w * (lse - picked)) / n)

    probs = np.exp(scores - lse[:, None])
    probs[np.arange(n), labels] -= 1.0
    dscores = probs * (w / n)[:, None]
    grads = backward(params, dscores, cache, config)

    mu = train_config.prox_mu
    if mu > 0:
        if global_ref is None:
            raise ValueError("prox_mu > 0 requires global_ref")
        check_schema(params, global_ref)
        prox = 0.0
        entries = {}
        for name, arr in params.items():
            diff = arr - global_ref[name]
            prox += float(np.dot(diff.ravel(), diff.ravel()))
            entries[name] = grads[name] + mu * diff
        loss += 0.5 * mu * prox
        grads = ParameterSet._from_owned(entries)
    return loss, grads


def adam_step(params: ParameterSet, grads: ParameterSet, state: AdamState,
              train_config: TrainConfig) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected Adam step with decoupled weight decay."""
    check_schema(params, grads)
    step = state.step_count + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    lr, wd = train_config.learning_rate, train_config.weight_decay
    corr1 = 1.0 - b1 ** step
    corr2 = 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.first_moment[name] + (1.0 - b1) * g
        v = b2 * state.second_moment[name] + (1.0 - b2) * (g * g)
        update = (m / corr1) / (np.sqrt(v / corr2) + eps)
        new_p[name] = p - lr * update - lr * wd * p
        new_m[name] = m
        new_v[name] = v
    new_state = AdamState(
        ParameterSet._from_owned(new_m), ParameterSet._from_owned(new_v), step, b1, b2, eps
    )
    return ParameterSet._from_owned(new_p), new_state


def _batched_loss(params, windows, labels, config, train_config, anchor, weights, batch_size):
    total = 0.0
    for start in range(0, len(labels), batch_size):
        sl = slice(start, start + batch_size)
        loss, _ = loss_and_grad(params, windows[sl], labels[sl], config, train_config, anchor, weights)
        total += loss * len(labels[sl])
    return total / len(labels)


def local_train(start_params: ParameterSet, shard, config: ModelConfig, train_config: TrainConfig,
                client_id: int = 0, round: int = 0,
                class_weights: np.ndarray | None = None) -> ClientUpdate:
    """Mini-batch Adam over ``shard`` for ``train_config.local_epochs`` epochs.

    ``shard`` is anything with ``windows`` (N, C, T) and ``labels`` (N,).
    The batch order comes from ``train_config.seed``; a fresh optimizer state
    is used on every call. With ``prox_mu > 0`` the proximal anchor is
    ``start_params``. Class weights default to the shard's inverse frequencies.
    """
    windows = np.asarray(shard.windows, dtype=np.float64)
    labels = np.asarray(shard.labels)
    n = labels.size
    if n == 0:
        raise ValueError(f"client {client_id}: empty training shard")
    if class_weights is None:
        class_weights = class_weights_for(labels, config.num_classes)
    anchor = start_params if train_config.prox_mu > 0 else None

    rng = np.random.default_rng(train_config.seed)
    params = start_params
    state = AdamState.zeros(params)
    epoch_loss = None
    for _ in range(train_config.local_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            loss, grads = loss_and_grad(params, windows[idx], labels[idx], config,
                                        train_config, anchor, class_weights)
            params, state = adam_step(params, grads, state, train_config)
            total += loss * idx.size
        epoch_loss = total / n
    if epoch_loss is None:
        epoch_loss = _batched_loss(params, windows, labels, config, train_config, anchor,
                                   class_weights, train_config.batch_size)
    return ClientUpdate(client_id=client_id, round=round, params=params,
                        num_examples=n, train_loss=float(epoch_loss))


def predict_scores(params: ParameterSet, windows: np.ndarray, config: ModelConfig,
                   batch_size: int = 256) -> np.ndarray:
    windows = _check_batch(windows, config)
    out = [forward(params, windows[s:s + batch_size], config)[0]
           for s in range(0, windows.shape[0], batch_size)]
    return np.concatenate(out) if out else np.zeros((0, config.num_classes))


def predict(params: ParameterSet, windows: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Argmax class per window; ties go to the lowest class index."""
    return np.argmax(predict_scores(params, windows, config), axis=1)


def evaluate(params: ParameterSet, dataset, config: ModelConfig) -> Metrics:
    predicted = predict(params, dataset.windows, config)
    return precision_recall_f1(confusion_matrix(dataset.labels, predicted, config.num_classes))
