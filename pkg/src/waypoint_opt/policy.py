"""From-scratch MLP policy: forward, backprop, Adam training, inference.

The network maps the 13-dim situation vector to body rates and collective
thrust one control step ahead.  Training happens entirely in normalized
space (z-scored inputs and targets); de-normalization and actuator clamping
live in the inference wrapper, not in the network itself.

Model file format ("WNCM", little-endian), version 1: magic, u32 version,
u32 layer count, u32 dims, u8 activation id, per-layer weights then biases
(f64, row-major, W[i] shape (dims[i], dims[i+1])), the four normalization
vectors, then a u32-length-prefixed UTF-8 JSON metadata blob.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .dataset import Dataset, NormStats, build_policy_input, normalize
from .errors import ConfigError, InvalidInputError, ModelFormatError, TrainingError

MAGIC = b"WNCM"
VERSION = 1
ACTIVATION_IDS = {"tanh": 0}
ACTIVATION_NAMES = {v: k for k, v in ACTIVATION_IDS.items()}


@dataclass
class MlpModel:
    layer_dims: list
    weights: list               # W[i]: (layer_dims[i], layer_dims[i+1])
    biases: list                # b[i]: (layer_dims[i+1],)
    activation: str
    norm: NormStats
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def copy_weights(self):
        return [w.copy() for w in self.weights], [b.copy() for b in self.biases]


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 1024
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    val_split: float = 0.1
    hidden_dims: tuple = (256, 256, 256)
    activation: str = "tanh"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0 < self.learning_rate < 1:
            raise ConfigError("learning rate must be in (0, 1)")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "hidden_dims" in kwargs:
            kwargs["hidden_dims"] = tuple(int(h) for h in kwargs["hidden_dims"])
        return cls(**kwargs)


@dataclass
class TrainHistory:
    train_mse: list
    val_mse: list
    wall_time: list
    best_epoch: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def init_model(layer_dims, seed: int, activation: str = "tanh", norm: NormStats | None = None) -> MlpModel:
    """Glorot-uniform initialization, deterministic given the seed."""
    if activation not in ACTIVATION_IDS:
        raise ConfigError(f"unsupported activation {activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for a, b in zip(layer_dims[:-1], layer_dims[1:]):
        lim = np.sqrt(6.0 / (a + b))
        weights.append(rng.uniform(-lim, lim, size=(a, b)))
        biases.append(np.zeros(b))
    if norm is None:
        d_in, d_out = layer_dims[0], layer_dims[-1]
        norm = NormStats(np.zeros(d_in), np.ones(d_in), np.zeros(d_out), np.ones(d_out))
    return MlpModel(list(layer_dims), weights, biases, activation, norm)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def forward_normalized(model: MlpModel, Xn: np.ndarray) -> np.ndarray:
    """Network output in normalized space; tanh hidden, identity output."""
    h = Xn
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ W + b
        if i < last:
            h = np.tanh(h)
    return h


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """De-normalized output for raw input(s); no actuator clamping here."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.input_dim:
        raise InvalidInputError(f"input dim {x.shape[-1]} != model dim {model.input_dim}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite policy input")
    st = model.norm
    yn = forward_normalized(model, (x - st.x_mean) / st.x_std)
    return yn * st.y_std + st.y_mean


def loss_and_grad(model: MlpModel, Xn: np.ndarray, Yn: np.ndarray):
    """MSE over a normalized batch plus reverse-mode weight/bias gradients.

    The loss averages over both batch and output dimensions, so duplicating
    a batch leaves loss and gradients unchanged.
    """
    if Xn.shape[0] == 0:
        raise InvalidInputError("empty batch")
    acts = [Xn]
    h = Xn
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ W + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    out = acts[-1]
    diff = out - Yn
    mse = float(np.mean(diff * diff))

    gW = [None] * len(model.weights)
    gb = [None] * len(model.biases)
    delta = 2.0 * diff / diff.size
    for i in range(last, -1, -1):
        gW[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (1.0 - acts[i] * acts[i])
    return mse, gW, gb


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class _Adam:
    def __init__(self, model: MlpModel, cfg: TrainConfig):
        self.cfg = cfg
        self.m_w = [np.zeros_like(w) for w in model.weights]
        self.v_w = [np.zeros_like(w) for w in model.weights]
        self.m_b = [np.zeros_like(b) for b in model.biases]
        self.v_b = [np.zeros_like(b) for b in model.biases]
        self.t = 0

    def step(self, model: MlpModel, gW, gb):
        c = self.cfg
        self.t += 1
        b1c = 1.0 - c.beta1 ** self.t
        b2c = 1.0 - c.beta2 ** self.t
        for i in range(len(model.weights)):
            self.m_w[i] = c.beta1 * self.m_w[i] + (1 - c.beta1) * gW[i]
            self.v_w[i] = c.beta2 * self.v_w[i] + (1 - c.beta2) * gW[i] ** 2
            model.weights[i] -= c.learning_rate * (self.m_w[i] / b1c) / (np.sqrt(self.v_w[i] / b2c) + c.adam_eps)
            self.m_b[i] = c.beta1 * self.m_b[i] + (1 - c.beta1) * gb[i]
            self.v_b[i] = c.beta2 * self.v_b[i] + (1 - c.beta2) * gb[i] ** 2
            model.biases[i] -= c.learning_rate * (self.m_b[i] / b1c) / (np.sqrt(self.v_b[i] / b2c) + c.adam_eps)


def train(dataset: Dataset, cfg: TrainConfig, meta: dict | None = None) -> tuple[MlpModel, TrainHistory]:
    """Seeded minibatch Adam on MSE; returns the best-validation model."""
    st = dataset.normalization
    Xn, Yn = normalize(st, dataset.X, dataset.Y)
    n = Xn.shape[0]
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * cfg.val_split))) if cfg.val_split > 0 else 0
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if tr_idx.size == 0:
        raise InvalidInputError("validation split leaves no training data")
    Xtr, Ytr = Xn[tr_idx], Yn[tr_idx]
    Xva, Yva = Xn[val_idx], Yn[val_idx]

    dims = [Xn.shape[1], *cfg.hidden_dims, Yn.shape[1]]
    model = init_model(dims, cfg.seed, cfg.activation, st)
    model.meta = {
        "feature_layout": "heading14" if Xn.shape[1] == 14 else "standard13",
        "delay_steps": dataset.meta.delay_steps,
        "train_config": cfg.to_dict(),
        **(meta or {}),
    }
    opt = _Adam(model, cfg)

    best_val = np.inf
    best = model.copy_weights()
    best_epoch = 0
    hist = TrainHistory([], [], [], 0)
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(tr_idx.size)
        losses = []
        for s in range(0, tr_idx.size, cfg.batch_size):
            sel = order[s: s + cfg.batch_size]
            mse, gW, gb = loss_and_grad(model, Xtr[sel], Ytr[sel])
            if not np.isfinite(mse):
                raise TrainingError(f"training diverged at epoch {epoch}")
            opt.step(model, gW, gb)
            losses.append(mse * sel.size)
        train_mse = float(np.sum(losses) / tr_idx.size)
        if n_val:
            pred = forward_normalized(model, Xva)
            val_mse = float(np.mean((pred - Yva) ** 2))
        else:
            val_mse = train_mse
        if not np.isfinite(val_mse):
            raise TrainingError(f"validation diverged at epoch {epoch}")
        hist.train_mse.append(train_mse)
        hist.val_mse.append(val_mse)
        hist.wall_time.append(time.perf_counter() - t0)
        if val_mse < best_val:
            best_val = val_mse
            best = model.copy_weights()
            best_epoch = epoch
    model.weights, model.biases = best
    hist.best_epoch = best_epoch
    model.meta["best_epoch"] = best_epoch
    model.meta["best_val_mse"] = best_val
    return model, hist


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def infer_command(
    model: MlpModel,
    state: dyn.QuadState,
    wp_pair,
    last_thrust: float,
    params: dyn.QuadParams,
) -> dyn.RateThrustCmd:
    """Build features, run the network, clamp to actuator bounds."""
    wp1, wp2 = wp_pair
    x = build_policy_input(state.p, state.v, state.q, last_thrust, wp1, wp2)
    y = forward(model, x)
    omega_cmd = np.clip(y[:3], -params.omega_max, params.omega_max)
    thrust_cmd = float(np.clip(y[3], params.thrust_min, params.thrust_max))
    return dyn.RateThrustCmd(omega_cmd, thrust_cmd)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(model: MlpModel, path: str) -> None:
    dims = model.layer_dims
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        f.write(struct.pack("<B", ACTIVATION_IDS[model.activation]))
        for W, b in zip(model.weights, model.biases):
            f.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        st = model.norm
        f.write(np.concatenate([st.x_mean, st.x_std, st.y_mean, st.y_std]).astype("<f8").tobytes())
        blob = json.dumps(model.meta, sort_keys=True).encode()
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)


def load_model(path: str) -> MlpModel:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise ModelFormatError("bad magic: not a model file")
    off = 4
    try:
        version, n_dims = struct.unpack_from("<II", raw, off)
        off += 8
        if version != VERSION:
            raise ModelFormatError(f"unsupported model version {version}")
        dims = list(struct.unpack_from(f"<{n_dims}I", raw, off))
        off += 4 * n_dims
        (act_id,) = struct.unpack_from("<B", raw, off)
        off += 1
        if act_id not in ACTIVATION_NAMES:
            raise ModelFormatError(f"unknown activation id {act_id}")
        weights, biases = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            W = np.frombuffer(raw, dtype="<f8", count=a * b, offset=off).reshape(a, b).copy()
            off += 8 * a * b
            bb = np.frombuffer(raw, dtype="<f8", count=b, offset=off).copy()
            off += 8 * b
            weights.append(W)
            biases.append(bb)
        d_in, d_out = dims[0], dims[-1]
        norm_v = np.frombuffer(raw, dtype="<f8", count=2 * (d_in + d_out), offset=off)
        off += 8 * 2 * (d_in + d_out)
        (blob_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        meta = json.loads(raw[off: off + blob_len].decode()) if blob_len else {}
        off += blob_len
    except (struct.error, ValueError) as exc:
        raise ModelFormatError(f"corrupt model file: {exc}") from exc
    if off != len(raw):
        raise ModelFormatError("corrupt model file: trailing or missing bytes")
    norm = NormStats(
        x_mean=norm_v[:d_in].copy(),
        x_std=norm_v[d_in: 2 * d_in].copy(),
        y_mean=norm_v[2 * d_in: 2 * d_in + d_out].copy(),
        y_std=norm_v[2 * d_in + d_out:].copy(),
    )
    return MlpModel(dims, weights, biases, ACTIVATION_NAMES[act_id], norm, meta)
