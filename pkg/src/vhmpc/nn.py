"""Small dense networks with hand-written backpropagation and Adam.

Weights are stored as ``(fan_in, fan_out)`` so a batch ``X`` of shape
``(B, fan_in)`` maps to ``X @ W + b``. Hidden layers use ReLU, the output
layer is affine.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

MAGIC = b"VHMPC-NN"
FORMAT_VERSION = 1

# flip on to assert finiteness after every optimizer update
DEBUG_FINITE = False


@dataclass
class Mlp:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ShapeError(f"layer {k}: weight {W.shape} and bias {b.shape} do not match")
            if k and self.weights[k - 1].shape[1] != W.shape[0]:
                raise ShapeError(f"layer {k} input {W.shape[0]} does not chain")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        """Parameters in the canonical order ``W0, b0, W1, b1, ...``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        if len(params) != 2 * len(self.weights):
            raise ShapeError("parameter list length mismatch")
        for k in range(len(self.weights)):
            W, b = params[2 * k], params[2 * k + 1]
            if W.shape != self.weights[k].shape or b.shape != self.biases[k].shape:
                raise ShapeError(f"layer {k}: parameter shape mismatch")
            self.weights[k] = np.array(W, dtype=float)
            self.biases[k] = np.array(b, dtype=float)

    def copy(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "Mlp":
        return Mlp([np.zeros_like(W) for W in self.weights], [np.zeros_like(b) for b in self.biases])

    def __call__(self, x):
        return forward(self, x)[0]


@dataclass
class Cache:
    inputs: list          # input to each layer
    pre: list             # pre-activations of each layer
    squeeze: bool = False


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, final_scale: float = 1.0) -> Mlp:
    """He-initialized weights, zero biases; the last layer is scaled by ``final_scale``."""
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        if k == len(sizes) - 2:
            W *= final_scale
        weights.append(W)
        biases.append(np.zeros(fan_out))
    return Mlp(weights, biases)


def forward(net: Mlp, x):
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[1] != net.in_dim:
        raise ShapeError(f"input has {h.shape[1]} features, network expects {net.in_dim}")
    inputs, pre = [], []
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ W + b
        pre.append(z)
        h = z if k == last else np.maximum(z, 0.0)
    out = h[0] if squeeze else h
    return out, Cache(inputs, pre, squeeze)


def backward(net: Mlp, cache: Cache, grad_out):
    """Reverse pass; returns ``(param_grads, grad_input)``.

    ``param_grads`` follows :meth:`Mlp.params` ordering and sums over the batch.
    """
    g = np.asarray(grad_out, dtype=float)
    if cache.squeeze:
        g = g[None, :]
    if len(cache.pre) != len(net.weights) or g.shape != cache.pre[-1].shape:
        raise ShapeError("cache does not belong to this network or gradient shape mismatch")
    grads = [None] * (2 * len(net.weights))
    last = len(net.weights) - 1
    for k in range(last, -1, -1):
        if k != last:
            g = g * (cache.pre[k] > 0.0)
        grads[2 * k] = cache.inputs[k].T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        g = g @ net.weights[k].T
    return grads, (g[0] if cache.squeeze else g)


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state differ in length")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch {p.shape} vs {g.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if DEBUG_FINITE:
            assert np.all(np.isfinite(p)), "non-finite parameter after Adam update"
        new_p.append(p)
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_p, new_state


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    """``target <- tau * online + (1 - tau) * target``, in place."""
    for k in range(len(target.weights)):
        target.weights[k] = tau * online.weights[k] + (1.0 - tau) * target.weights[k]
        target.biases[k] = tau * online.biases[k] + (1.0 - tau) * target.biases[k]


# -------------------------------------------------------------- checkpoints

def mlp_to_bytes(net: Mlp) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(net.weights))]
    for W, b in zip(net.weights, net.biases):
        rows, cols = W.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def mlp_from_bytes(data: bytes, offset: int = 0):
    """Parse one network starting at ``offset``; returns ``(net, end_offset)``."""
    def take(n):
        nonlocal offset
        if offset + n > len(data):
            raise ConfigError("truncated network checkpoint")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise ConfigError("bad magic: not a network checkpoint")
    version, n_layers = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported network format version {version}")
    weights, biases = [], []
    for _ in range(n_layers):
        rows, cols = struct.unpack("<II", take(8))
        W = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(float)
        b = np.frombuffer(take(8 * cols), dtype="<f8").astype(float)
        weights.append(W)
        biases.append(b)
    try:
        return Mlp(weights, biases), offset
    except ShapeError as exc:
        raise ConfigError(f"inconsistent network checkpoint: {exc}") from exc


def save_mlp(net: Mlp, path) -> None:
    Path(path).write_bytes(mlp_to_bytes(net))


def load_mlp(path) -> Mlp:
    data = Path(path).read_bytes()
    net, end = mlp_from_bytes(data)
    if end != len(data):
        raise ConfigError("trailing bytes after network checkpoint")
    return net
