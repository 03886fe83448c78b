"""From-scratch LSTM for measurement-record sequence prediction.

One recurrent layer of hidden_size units consumes a voltage sample per
time step; the preparation (or, for backward models, measurement)
setting selects the initial hidden and cell state from a learned
6-row encoder, and three per-axis logistic heads read the hidden state
out into outcome probabilities. The training loss is the cross entropy
of the final-step prediction for the head matching each record's label
axis, minimized with bias-corrected Adam under a geometric learning-rate
schedule and a linearly annealed dropout on the hidden-to-head
connections.

Everything is numpy in double precision; gradients come from explicit
backpropagation through time and are verified against central finite
differences in the test suite. Training is bit-reproducible for a fixed
seed and BLAS thread count.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import data
from .core import Label, label_index
from .errors import ConfigError, DataError, NumericError

TENSOR_NAMES = ("enc_h", "enc_c", "gates_w", "gates_b", "head_w", "head_b")

MODEL_MAGIC = b"QRNN"
MODEL_VERSION = 1

_MODEL_HEADER = struct.Struct("<4sHI")

_PROB_FLOOR = 1e-12


def sigmoid(x):
    """Logistic function via tanh: overflow-safe for any finite input."""
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _act(x, mode):
    return np.tanh(x) if mode == "tanh" else np.maximum(x, 0.0)


def _act_deriv(a, mode):
    """Derivative of the nonlinearity, from its output value."""
    return 1.0 - a * a if mode == "tanh" else (a > 0.0).astype(float)


def loss(p, y):
    """Binary cross entropy; probabilities clamped away from 0 and 1."""
    p = np.clip(p, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    y = np.asarray(y, dtype=float)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


@dataclass
class RnnModel:
    hidden_size: int
    direction: str        # "forward" | "backward"
    activation: str       # "tanh" | "relu"
    norm_mean: float
    norm_std: float
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "RnnModel":
        return RnnModel(
            hidden_size=self.hidden_size, direction=self.direction,
            activation=self.activation, norm_mean=self.norm_mean,
            norm_std=self.norm_std,
            params={k: v.copy() for k, v in self.params.items()},
        )


def init_model(hidden_size: int, direction: str, activation: str,
               norm_mean: float, norm_std: float, seed: int) -> RnnModel:
    """Uniform +/- 1/sqrt(n) gate and encoder weights, forget bias +1,
    zeroed heads (so an untrained model predicts 0.5 everywhere)."""
    if direction not in ("forward", "backward"):
        raise ConfigError(f"direction must be forward or backward, got {direction!r}")
    if activation not in ("tanh", "relu"):
        raise ConfigError(f"activation must be tanh or relu, got {activation!r}")
    n = hidden_size
    scale = 1.0 / math.sqrt(n)
    rng = np.random.default_rng(seed)
    gates_b = np.zeros(4 * n)
    gates_b[n:2 * n] = 1.0
    params = {
        "enc_h": rng.uniform(-scale, scale, (6, n)),
        "enc_c": rng.uniform(-scale, scale, (6, n)),
        "gates_w": rng.uniform(-scale, scale, (1 + n, 4 * n)),
        "gates_b": gates_b,
        "head_w": np.zeros((3, n)),
        "head_b": np.zeros(3),
    }
    return RnnModel(hidden_size=n, direction=direction, activation=activation,
                    norm_mean=norm_mean, norm_std=norm_std, params=params)


# ---------------------------------------------------------------------------
# Forward / backward passes
# ---------------------------------------------------------------------------


def _initial_state(params, cond_idx, batch: int):
    """Encoder rows for integer conditioning indices, or the uniform
    (maximally unknown) mixture when cond_idx is None."""
    if cond_idx is None:
        h0 = np.broadcast_to(params["enc_h"].mean(axis=0), (batch, params["enc_h"].shape[1])).copy()
        c0 = np.broadcast_to(params["enc_c"].mean(axis=0), (batch, params["enc_c"].shape[1])).copy()
        return h0, c0
    return params["enc_h"][cond_idx].copy(), params["enc_c"][cond_idx].copy()


def encode_prep(model: RnnModel, label: Label | None):
    """(h0, c0) for one setting; None means the unknown conditioning."""
    idx = None if label is None else np.array([label_index(label)])
    h0, c0 = _initial_state(model.params, idx, 1)
    return h0[0], c0[0]


def _scan(params, activation, X, h0, c0, keep_cache):
    """Run the recurrence over X (batch, steps); optionally cache
    per-step activations for backpropagation."""
    B, L = X.shape
    n = h0.shape[1]
    W, bias = params["gates_w"], params["gates_b"]
    h, c = h0, c0
    cache = [] if keep_cache else None
    hs = [h]
    for t in range(L):
        inp = np.empty((B, 1 + n))
        inp[:, 0] = X[:, t]
        inp[:, 1:] = h
        pre = inp @ W
        pre += bias
        # Gate order in the weight matrix: input, forget, output, candidate.
        gates = sigmoid(pre[:, :3 * n])
        i = gates[:, :n]
        f = gates[:, n:2 * n]
        o = gates[:, 2 * n:]
        g = _act(pre[:, 3 * n:], activation)
        c_new = f * c + i * g
        ac = _act(c_new, activation)
        h_new = o * ac
        if not np.all(np.isfinite(h_new)):
            raise NumericError(f"non-finite hidden state at step {t}")
        if keep_cache:
            cache.append((inp, i, f, g, o, c, ac))
        h, c = h_new, c_new
        hs.append(h)
    return hs, c, cache


def _head_probs(params, h):
    return sigmoid(h @ params["head_w"].T + params["head_b"])


def forward(model: RnnModel, voltages, label: Label | None,
            dropout_mask=None):
    """Reference single-record pass.

    Returns (hidden_series (steps+1, n), probs (steps+1, 3)); the first
    entries come from the conditioning alone. An optional dropout mask
    (already inverse-scaled) applies to the hidden-to-head connections.
    """
    X = np.asarray(voltages, dtype=float)[None, :]
    idx = None if label is None else np.array([label_index(label)])
    h0, c0 = _initial_state(model.params, idx, 1)
    hs, _, _ = _scan(model.params, model.activation, X, h0, c0, False)
    hidden = np.concatenate([h[0][None] for h in hs], axis=0)
    readout = hidden * dropout_mask if dropout_mask is not None else hidden
    return hidden, _head_probs(model.params, readout)


def predict_probabilities(model: RnnModel, X, cond_idx):
    """All-step head probabilities for a batch: (batch, steps+1, 3)."""
    B = X.shape[0]
    h0, c0 = _initial_state(model.params, cond_idx, B)
    hs, _, _ = _scan(model.params, model.activation, X, h0, c0, False)
    out = np.empty((B, X.shape[1] + 1, 3))
    for t, h in enumerate(hs):
        out[:, t] = _head_probs(model.params, h)
    return out


def batch_loss(model: RnnModel, X, cond_idx, target_y, target_axis,
               dropout_mask=None) -> float:
    """Mean final-step cross entropy of a batch (no gradients)."""
    B = X.shape[0]
    h0, c0 = _initial_state(model.params, cond_idx, B)
    hs, _, _ = _scan(model.params, model.activation, X, h0, c0, False)
    h = hs[-1]
    if dropout_mask is not None:
        h = h * dropout_mask
    logits = np.einsum("bn,bn->b", h, model.params["head_w"][target_axis])
    logits += model.params["head_b"][target_axis]
    return float(loss(sigmoid(logits), target_y).mean())


def loss_and_gradients(model: RnnModel, X, cond_idx, target_y, target_axis,
                       dropout_mask=None):
    """Mean batch loss plus gradients for every parameter tensor.

    Full backpropagation through time, including the label encoders and
    the per-axis heads (only the head matching each record's label axis
    receives gradient).
    """
    params = model.params
    B = X.shape[0]
    n = model.hidden_size
    target_y = np.asarray(target_y, dtype=float)
    h0, c0 = _initial_state(params, cond_idx, B)
    hs, _, cache = _scan(params, model.activation, X, h0, c0, True)

    h_final = hs[-1]
    hd = h_final * dropout_mask if dropout_mask is not None else h_final
    w_sel = params["head_w"][target_axis]
    logits = np.einsum("bn,bn->b", hd, w_sel) + params["head_b"][target_axis]
    p = sigmoid(logits)
    total_loss = float(loss(p, target_y).mean())

    grads = {name: np.zeros_like(params[name]) for name in TENSOR_NAMES}
    dlogit = (p - target_y) / B
    for a in range(3):
        m = target_axis == a
        if np.any(m):
            grads["head_w"][a] = dlogit[m] @ hd[m]
            grads["head_b"][a] = dlogit[m].sum()
    d_h = dlogit[:, None] * w_sel
    if dropout_mask is not None:
        d_h = d_h * dropout_mask
    d_c = np.zeros((B, n))

    W = params["gates_w"]
    mode = model.activation
    dpre = np.empty((B, 4 * n))
    for inp, i, f, g, o, c_prev, ac in reversed(cache):
        dc = d_c + d_h * o * _act_deriv(ac, mode)
        dpre[:, :n] = (dc * g) * i * (1.0 - i)
        dpre[:, n:2 * n] = (dc * c_prev) * f * (1.0 - f)
        dpre[:, 2 * n:3 * n] = (d_h * ac) * o * (1.0 - o)
        dpre[:, 3 * n:] = (dc * i) * _act_deriv(g, mode)
        grads["gates_w"] += inp.T @ dpre
        grads["gates_b"] += dpre.sum(axis=0)
        d_h = dpre @ W.T[:, 1:]
        d_c = dc * f
    for idx in range(6):
        m = cond_idx == idx
        if np.any(m):
            grads["enc_h"][idx] = d_h[m].sum(axis=0)
            grads["enc_c"][idx] = d_c[m].sum(axis=0)
    for name in TENSOR_NAMES:
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient in {name}")
    return total_loss, grads


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(model: RnnModel) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in model.params.items()},
        v={k: np.zeros_like(v) for k, v in model.params.items()},
    )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place and in fixed tensor order."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in TENSOR_NAMES:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 1024
    lr_start: float = 1e-3
    lr_end: float = 1e-6
    dropout_start: float = 0.30
    dropout_end: float = 0.0
    clip_norm: float = 5.0
    hidden_size: int = 64
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.hidden_size < 1:
            raise ConfigError("epochs, batch_size and hidden_size must be >= 1")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ConfigError("learning rates must be positive")
        if not (0.0 <= self.dropout_start < 1.0 and 0.0 <= self.dropout_end < 1.0):
            raise ConfigError("dropout rates must be in [0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Geometric decay from lr_start to lr_end across the epochs."""
    if cfg.epochs == 1:
        return cfg.lr_start
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


def dropout_rate(cfg: TrainConfig, epoch: int) -> float:
    """Linear anneal from dropout_start to dropout_end across the epochs."""
    if cfg.epochs == 1:
        return cfg.dropout_start
    frac = epoch / (cfg.epochs - 1)
    return cfg.dropout_start + (cfg.dropout_end - cfg.dropout_start) * frac


def _batch_io(batch: data.Batch, direction: str):
    """Map a batch onto (inputs, conditioning, target bit, target axis).

    Forward models condition on the preparation and predict the final
    outcome; backward models condition on the measurement, consume the
    record reversed, and predict the preparation bit.
    """
    if direction == "forward":
        cond = 2 * batch.prep_axis.astype(int) + batch.y0
        return batch.voltages, cond, batch.y_t.astype(float), batch.meas_axis.astype(int)
    cond = 2 * batch.meas_axis.astype(int) + batch.y_t
    return batch.voltages[:, ::-1], cond, batch.y0.astype(float), batch.prep_axis.astype(int)


def _epoch_seed(seed: int, epoch: int, stream: int) -> int:
    return int(np.random.SeedSequence((seed, stream, epoch)).generate_state(1)[0])


def evaluate_loss(model: RnnModel, dataset: data.Dataset,
                  batch_size: int = 1024) -> float:
    """Mean final-step cross entropy over a dataset, dropout disabled."""
    total = 0.0
    count = 0
    for batch in data.batches(dataset, batch_size, shuffle_seed=0):
        X, cond, ty, ta = _batch_io(batch, model.direction)
        total += batch_loss(model, X, cond, ty, ta) * len(batch)
        count += len(batch)
    return total / count


def train(train_set: data.Dataset, eval_set: data.Dataset, cfg: TrainConfig,
          direction: str):
    """Train a model of the given direction; returns (model, history).

    Both datasets must carry the same normalization statistics. History
    holds one row per epoch with the schedules and losses. If the eval
    loss turns non-finite the previous epoch's parameters are restored
    and training stops early.
    """
    stats = train_set.norm_stats
    if stats is None or eval_set.norm_stats is None:
        raise ConfigError("datasets must be normalized before training")
    if not np.allclose(stats, eval_set.norm_stats, rtol=0, atol=0):
        raise ConfigError("train and eval normalization statistics differ")
    model = init_model(cfg.hidden_size, direction, cfg.activation,
                       norm_mean=stats[0], norm_std=stats[1], seed=cfg.seed)
    adam = init_adam(model)
    history: list[dict] = []
    checkpoint = model.copy()
    for epoch in range(cfg.epochs):
        lr = learning_rate(cfg, epoch)
        rate = dropout_rate(cfg, epoch)
        drop_rng = np.random.default_rng(_epoch_seed(cfg.seed, epoch, 2))
        running = 0.0
        seen = 0
        for batch in data.batches(train_set, cfg.batch_size,
                                  _epoch_seed(cfg.seed, epoch, 1)):
            X, cond, ty, ta = _batch_io(batch, direction)
            mask = None
            if rate > 0.0:
                keep = drop_rng.random((len(batch), cfg.hidden_size)) >= rate
                mask = keep / (1.0 - rate)
            batch_ce, grads = loss_and_gradients(model, X, cond, ty, ta, mask)
            clip_gradients(grads, cfg.clip_norm)
            adam_step(model.params, grads, adam, lr)
            running += batch_ce * len(batch)
            seen += len(batch)
        eval_ce = evaluate_loss(model, eval_set, cfg.batch_size)
        history.append({
            "epoch": epoch, "learning_rate": lr, "dropout": rate,
            "train_loss": running / seen, "eval_loss": eval_ce,
        })
        if not math.isfinite(eval_ce):
            warnings.warn(
                f"training diverged at epoch {epoch}; restoring previous state"
            )
            model = checkpoint
            break
        checkpoint = model.copy()
    return model, history


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_model(path, model: RnnModel) -> None:
    manifest = {
        "format": "qtraj.rnn",
        "version": MODEL_VERSION,
        "hidden_size": model.hidden_size,
        "input_size": 1,
        "direction": model.direction,
        "activation": model.activation,
        "norm_mean": model.norm_mean,
        "norm_std": model.norm_std,
        "tensors": [
            {"name": name, "shape": list(model.params[name].shape)}
            for name in TENSOR_NAMES
        ],
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(manifest_bytes)))
        fh.write(manifest_bytes)
        for name in TENSOR_NAMES:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_model(path) -> RnnModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _MODEL_HEADER.size:
        raise DataError("file too short for model header")
    magic, version, man_len = _MODEL_HEADER.unpack_from(blob, 0)
    if magic != MODEL_MAGIC:
        raise DataError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    if version != MODEL_VERSION:
        raise DataError(f"unsupported model version {version}")
    pos = _MODEL_HEADER.size
    if pos + man_len > len(blob):
        raise DataError("truncated model manifest")
    try:
        manifest = json.loads(blob[pos:pos + man_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"invalid model manifest: {exc}") from exc
    pos += man_len
    params = {}
    for spec in manifest["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if pos + nbytes > len(blob):
            raise DataError(f"truncated parameter block at tensor {spec['name']}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
        params[spec["name"]] = arr.astype(float).reshape(shape)
        pos += nbytes
    if pos != len(blob):
        raise DataError("trailing bytes after parameter block")
    if set(params) != set(TENSOR_NAMES):
        raise DataError("model file tensor set does not match architecture")
    return RnnModel(
        hidden_size=int(manifest["hidden_size"]),
        direction=manifest["direction"],
        activation=manifest["activation"],
        norm_mean=float(manifest["norm_mean"]),
        norm_std=float(manifest["norm_std"]),
        params=params,
    )
