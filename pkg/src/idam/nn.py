"""Small dense-network toolkit: per-row MLPs with hand-written backprop, Adam, and a binary parameter file.

A stack of 1x1 convolutions over an image is the same map as an MLP applied
to every pixel's channel vector, so every learned head in the pipeline is an
:class:`Mlp` evaluated on a ``(rows, channels)`` matrix.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ArchitectureMismatchError, CheckpointError, ChecksumError, FormatVersionError

OUTPUT_ACTIVATIONS = ("none", "sigmoid")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def row_softmax(x) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


@dataclass
class Mlp:
    """Fully connected layers with ReLU between them.

    ``weights[l]`` has shape ``(out, in)``; ``output`` is the activation of the
    final layer (``"none"`` or ``"sigmoid"``).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = "none"

    def __post_init__(self):
        if self.output not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {l}: weight {W.shape} / bias {b.shape} mismatch")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l} input {W.shape[1]} != previous output {self.weights[l - 1].shape[0]}")

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, output: str = "none") -> Mlp:
        """Glorot-uniform weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, output)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in canonical order (W0, b0, W1, b1, ...)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def zeros_like(self) -> Mlp:
        return Mlp([np.zeros_like(W) for W in self.weights], [np.zeros_like(b) for b in self.biases], self.output)

    def copy(self) -> Mlp:
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.output)


@dataclass
class MlpCache:
    acts: list[np.ndarray]  # input to each layer; acts[-1] is the penultimate activation
    pre: list[np.ndarray]
    y: np.ndarray


def mlp_forward(p: Mlp, x) -> tuple[np.ndarray, MlpCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.weights[0].shape[1]:
        raise ValueError(f"input shape {x.shape} does not match layer input {p.weights[0].shape[1]}")
    acts, pre = [x], []
    a = x
    last = len(p.weights) - 1
    for l, (W, b) in enumerate(zip(p.weights, p.biases)):
        z = a @ W.T + b
        pre.append(z)
        if l < last:
            a = np.maximum(z, 0.0)
            acts.append(a)
    y = sigmoid(z) if p.output == "sigmoid" else z
    return y, MlpCache(acts, pre, y)


def mlp_backward(
    p: Mlp, cache: MlpCache, dy, d_acts: Mapping[int, np.ndarray] | None = None
) -> tuple[np.ndarray, Mlp]:
    """Gradients of a scalar loss given ``dL/dy``.

    ``d_acts`` optionally injects extra gradient on intermediate activations,
    keyed by layer index into ``cache.acts`` (``len(sizes) - 2`` is the
    penultimate layer).
    """
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != cache.y.shape:
        raise ValueError(f"dy shape {dy.shape} != output shape {cache.y.shape}")
    d_acts = d_acts or {}
    dz = dy * cache.y * (1.0 - cache.y) if p.output == "sigmoid" else dy
    grads = p.zeros_like()
    for l in range(len(p.weights) - 1, -1, -1):
        grads.weights[l] = dz.T @ cache.acts[l]
        grads.biases[l] = dz.sum(axis=0)
        da = dz @ p.weights[l]
        if l in d_acts:
            da = da + d_acts[l]
        if l:
            dz = da * (cache.pre[l - 1] > 0)
    return da, grads


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """One in-place Adam update with decoupled weight decay; returns ``params``."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter / gradient shapes differ")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif any(m.shape != p.shape for m, p in zip(state.m, params)) or len(state.m) != len(params):
        raise ValueError("optimizer moments do not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# parameter file: "IDAM" | u32 version | u32 len + JSON config | u32 heads |
#   per head: u32 len + name, u8 output act, u32 count + u32 layer sizes |
#   fp64 W/b arrays | u32 CRC32 of everything before it. All little-endian.
# ---------------------------------------------------------------------------

MAGIC = b"IDAM"
FORMAT_VERSION = 1


def save_params(path, heads: Mapping[str, Mlp], config: Mapping | None = None) -> None:
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    cfg = json.dumps(dict(config or {}), sort_keys=True).encode()
    buf += struct.pack("<I", len(cfg)) + cfg
    buf += struct.pack("<I", len(heads))
    for name, mlp in heads.items():
        raw = name.encode()
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<B", OUTPUT_ACTIVATIONS.index(mlp.output))
        sizes = mlp.sizes
        buf += struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)
    for mlp in heads.values():
        for a in mlp.arrays():
            buf += np.ascontiguousarray(a, dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("parameter file ends early")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_params(path, expected: Mapping[str, Mlp] | None = None) -> tuple[dict[str, Mlp], dict]:
    """Read a parameter file; returns ``(heads, config)``.

    With ``expected`` the stored architecture must match it exactly
    (same head names, layer sizes and output activations).
    """
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an IDAM parameter file")
    if len(data) < 12 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise ChecksumError(f"{path}: checksum mismatch (file truncated or corrupted)")
    r = _Reader(data[:-4])
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    config = json.loads(r.take(r.u32()).decode())
    arch = []
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        output = OUTPUT_ACTIVATIONS[r.take(1)[0]]
        count = r.u32()
        sizes = list(struct.unpack(f"<{count}I", r.take(4 * count)))
        arch.append((name, output, sizes))
    if expected is not None:
        want = [(n, m.output, m.sizes) for n, m in expected.items()]
        if want != arch:
            raise ArchitectureMismatchError(f"{path}: stored architecture {arch} does not match {want}")
    heads = {}
    for name, output, sizes in arch:
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(np.frombuffer(r.take(8 * fan_in * fan_out), dtype="<f8").reshape(fan_out, fan_in).astype(np.float64))
            biases.append(np.frombuffer(r.take(8 * fan_out), dtype="<f8").astype(np.float64))
        heads[name] = Mlp(weights, biases, output)
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return heads, config
