"""Small fully connected networks with hand-written backprop, and Adam."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, MalformedInputError

MAGIC = b"POSGNN1"
ACTIVATIONS = {"identity": 0, "tanh": 1}
_ACT_BY_CODE = {v: k for k, v in ACTIVATIONS.items()}


class DenseNet:
    """Stack of affine layers, each followed by ``tanh`` or identity.

    Weights are stored ``(in_dim, out_dim)`` so a batch ``x`` of shape
    ``(n, in_dim)`` maps through ``x @ W + b``.
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray], activations: list[str]):
        if not len(weights) == len(biases) == len(activations) or not weights:
            raise MalformedInputError("weights, biases and activations must be non-empty and aligned")
        for i, (w, b, act) in enumerate(zip(weights, biases, activations)):
            if act not in ACTIVATIONS:
                raise MalformedInputError(f"unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise MalformedInputError(f"layer {i}: bias shape {b.shape} does not fit weight {w.shape}")
            if i and weights[i - 1].shape[1] != w.shape[0]:
                raise MalformedInputError(f"layer {i}: input dim {w.shape[0]} != previous output {weights[i - 1].shape[1]}")
        # one contiguous vector; weights/biases are views into it
        self._shapes = [(w.shape, b.shape) for w, b in zip(weights, biases)]
        self.flat = np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in zip(weights, biases)])
        self.flat = self.flat.astype(np.float64)
        self.weights, self.biases = self._views(self.flat)
        self.activations = list(activations)

    def _views(self, flat: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        ws, bs, off = [], [], 0
        for (w_shape, b_shape) in self._shapes:
            n = w_shape[0] * w_shape[1]
            ws.append(flat[off:off + n].reshape(w_shape))
            off += n
            bs.append(flat[off:off + b_shape[0]])
            off += b_shape[0]
        return ws, bs

    @classmethod
    def create(cls, sizes: list[int], rng: np.random.Generator, hidden: str = "tanh",
               output: str = "identity", output_scale: float = 1.0) -> "DenseNet":
        """Xavier-uniform weights, zero biases; the last layer is scaled by ``output_scale``."""
        weights, biases, acts = [], [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            last = i == len(sizes) - 2
            if last:
                w *= output_scale
            weights.append(w)
            biases.append(np.zeros(fan_out))
            acts.append(output if last else hidden)
        return cls(weights, biases, acts)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def params(self) -> list[np.ndarray]:
        """The flat parameter vector, as a one-element list (the optimizer's unit)."""
        return [self.flat]

    def layer_params(self, flat: np.ndarray | None = None) -> list[np.ndarray]:
        """``[W0, b0, W1, b1, ...]`` as views into ``flat`` (default: the parameters)."""
        ws, bs = self._views(self.flat if flat is None else flat)
        return [a for pair in zip(ws, bs) for a in pair]

    def copy(self) -> "DenseNet":
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activations)

    def __eq__(self, other):
        return (isinstance(other, DenseNet) and self.activations == other.activations
                and self._shapes == other._shapes and np.array_equal(self.flat, other.flat))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Returns the output and the per-layer inputs/outputs needed by :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.input_dim:
            raise MalformedInputError(f"expected input dim {self.input_dim}, got {x.shape[1]}")
        cache = [x]
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = x @ w + b
            if act == "tanh":
                x = np.tanh(x)
            cache.append(x)
        return (x[0] if single else x), cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: list[np.ndarray], grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradient of ``sum(grad_out * output)`` w.r.t. the flat parameters, as ``[flat_grad]``."""
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != cache[-1].shape:
            raise MalformedInputError(f"output gradient shape {g.shape} != output shape {cache[-1].shape}")
        flat_grad = np.empty_like(self.flat)
        gw, gb = self._views(flat_grad)
        for i in range(len(self.weights) - 1, -1, -1):
            if self.activations[i] == "tanh":
                y = cache[i + 1]
                g = g * (1.0 - y * y)
            np.matmul(cache[i].T, g, out=gw[i])
            np.sum(g, axis=0, out=gb[i])
            if i:
                g = g @ self.weights[i].T
        return [flat_grad]

    def save(self, path: str | Path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "DenseNet":
        return cls.from_bytes(Path(path).read_bytes())

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", len(self.weights))]
        for w, act in zip(self.weights, self.activations):
            parts.append(struct.pack("<IIB", w.shape[0], w.shape[1], ACTIVATIONS[act]))
        for w, b in zip(self.weights, self.biases):
            parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "DenseNet":
        if data[: len(MAGIC)] != MAGIC:
            raise MalformedInputError("not a network file (bad magic)")
        off = len(MAGIC)
        (n_layers,) = struct.unpack_from("<I", data, off)
        off += 4
        shapes, acts = [], []
        for _ in range(n_layers):
            n_in, n_out, code = struct.unpack_from("<IIB", data, off)
            off += 9
            shapes.append((n_in, n_out))
            acts.append(_ACT_BY_CODE[code])
        weights, biases = [], []
        for n_in, n_out in shapes:
            w = np.frombuffer(data, dtype="<f8", count=n_in * n_out, offset=off).reshape(n_in, n_out)
            off += 8 * n_in * n_out
            b = np.frombuffer(data, dtype="<f8", count=n_out, offset=off)
            off += 8 * n_out
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
        if off != len(data):
            raise MalformedInputError("trailing bytes in network file")
        return cls(weights, biases, acts)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params: list[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise MalformedInputError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise MalformedInputError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g.sum()):
            raise DivergenceError("non-finite gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if not np.isfinite(p.sum()):
            raise DivergenceError("parameter became non-finite after update")
    return params, state


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm
