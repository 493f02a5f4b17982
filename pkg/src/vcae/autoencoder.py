"""Linear two-layer-per-side autoencoder trained with Adam.

Encoder ``h = (x W1) W2`` and decoder ``r = (h W3) W4``; no biases, no
activations unless ``relu=True`` (not part of the reference model).
"""
from __future__ import annotations

import logging
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericError, ShapeError, make_rng

log = logging.getLogger(__name__)

_MAGIC = b"VCAE-AEMODEL"
_VERSION = 1


class ModelFormatError(ValueError):
    pass


class TrainingError(NumericError):
    pass


@dataclass(frozen=True)
class AeConfig:
    m: int = 784
    p: int = 64
    n: int = 5
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    relu: bool = False

    def __post_init__(self):
        if not self.m > self.p > self.n >= 2:
            raise ValueError(f"need m > p > n >= 2, got m={self.m} p={self.p} n={self.n}")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be positive and epochs non-negative")


@dataclass
class AutoencoderModel:
    W1: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    W4: np.ndarray
    config: AeConfig

    def __post_init__(self):
        c = self.config
        shapes = {"W1": (c.m, c.p), "W2": (c.p, c.n), "W3": (c.n, c.p), "W4": (c.p, c.m)}
        for name, shape in shapes.items():
            w = getattr(self, name)
            if w.shape != shape:
                raise ShapeError(f"{name} has shape {w.shape}, expected {shape}")
            if not np.all(np.isfinite(w)):
                raise NumericError(f"{name} has non-finite entries")

    @property
    def weights(self):
        return [self.W1, self.W2, self.W3, self.W4]


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    batch_size: int = 0
    wall_time: float = 0.0

    @property
    def final_loss(self):
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


def init_model(config):
    """Glorot-uniform weights drawn from the seeded generator."""
    rng = make_rng(config.seed)
    dims = [(config.m, config.p), (config.p, config.n), (config.n, config.p), (config.p, config.m)]
    ws = []
    for fan_in, fan_out in dims:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
    return AutoencoderModel(*ws, config=config)


def _act(z, relu):
    return np.maximum(z, 0.0) if relu else z


def encode(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.config.m:
        raise ShapeError(f"input has length {x.shape[-1]}, model expects {model.config.m}")
    return _act(x @ model.W1, model.config.relu) @ model.W2


def decode(model, h):
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != model.config.n:
        raise ShapeError(f"latent has length {h.shape[-1]}, model expects {model.config.n}")
    return _act(h @ model.W3, model.config.relu) @ model.W4


def encode_all(model, data):
    """Latent matrix ``H`` with one row per input, in input order."""
    x = data.inputs if hasattr(data, "inputs") else np.asarray(data, dtype=np.float64)
    return np.atleast_2d(encode(model, x))


def loss_and_grads(weights, x, relu=False):
    """Mean squared reconstruction error and its gradient w.r.t. each weight."""
    w1, w2, w3, w4 = weights
    a = x @ w1
    za = _act(a, relu)
    h = za @ w2
    b = h @ w3
    zb = _act(b, relu)
    r = zb @ w4
    diff = r - x
    loss = float(np.mean(diff * diff))
    g_r = 2.0 * diff / diff.size
    g4 = zb.T @ g_r
    g_zb = g_r @ w4.T
    g_b = g_zb * (b > 0) if relu else g_zb
    g3 = h.T @ g_b
    g_h = g_b @ w3.T
    g2 = za.T @ g_h
    g_za = g_h @ w2.T
    g_a = g_za * (a > 0) if relu else g_za
    g1 = x.T @ g_a
    return loss, [g1, g2, g3, g4]


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(data, config):
    """Mini-batch Adam on the mean squared reconstruction error.

    Returns the trained model and a report with the mean training loss of
    every epoch. Deterministic for a given ``config.seed``.
    """
    x = data.inputs if hasattr(data, "inputs") else np.asarray(data, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if x.shape[1] != config.m:
        raise ShapeError(f"data has {x.shape[1]} features, config says m={config.m}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("training inputs must lie in [0, 1]")
    model = init_model(config)
    params = model.weights
    opt = Adam(params, lr=config.learning_rate)
    shuffle_rng = make_rng([config.seed, 1])
    report = TrainReport(batch_size=config.batch_size)
    start = time.perf_counter()
    n_rows = len(x)
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n_rows)
        total = 0.0
        for b, lo in enumerate(range(0, n_rows, config.batch_size)):
            batch = x[perm[lo:lo + config.batch_size]]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grads(params, batch, config.relu)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            total += loss * len(batch)
            opt.step(params, grads)
        report.epoch_losses.append(total / n_rows)
        log.debug("epoch %d loss %.6g", epoch + 1, report.epoch_losses[-1])
    report.wall_time = time.perf_counter() - start
    return model, report


# ----------------------------------------------------------------------
# persistence: 16-byte header (12-byte magic + u32 version), m/p/n as
# little-endian u32, then W1..W4 as row-major little-endian float64.


def save_model(model, path):
    c = model.config
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", _VERSION))
        fh.write(struct.pack("<III", c.m, c.p, c.n))
        for w in model.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 28 or buf[:12] != _MAGIC:
        raise ModelFormatError(f"{path}: not an autoencoder model file")
    (version,) = struct.unpack_from("<I", buf, 12)
    if version != _VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {version}")
    m, p, n = struct.unpack_from("<III", buf, 16)
    shapes = [(m, p), (p, n), (n, p), (p, m)]
    expected = 28 + 8 * sum(a * b for a, b in shapes)
    if len(buf) != expected:
        raise ModelFormatError(f"{path}: {len(buf)} bytes, expected {expected} for m={m} p={p} n={n}")
    ws = []
    off = 28
    for shape in shapes:
        count = shape[0] * shape[1]
        ws.append(np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape).copy())
        off += 8 * count
    try:
        config = AeConfig(m=m, p=p, n=n)
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    return AutoencoderModel(*ws, config=config)
