"""Small dense MLP engine: forward with a replayable tape, reverse-mode
backward, Adam, sinusoidal step embeddings and the binary checkpoint format.

Tensors are plain float64 numpy arrays. Inputs may carry any number of
leading batch dimensions; the last axis is the feature axis.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NumericError, ParseError, UsageError

ACTIVATIONS = ("linear", "sigmoid")


@dataclass(frozen=True)
class MlpParams:
    """Weights are stored (fan_in, fan_out); hidden layers use ReLU."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    output: str = "linear"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("weights and biases must be non-empty and paired")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {k}: weight {w.shape} incompatible with bias {b.shape}")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise DimensionError(f"layer {k}: expects {w.shape[0]} inputs, previous layer gives "
                                     f"{self.weights[k - 1].shape[1]}")
        if self.output not in ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output!r}")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{k}"] = w
            out[f"b{k}"] = b
        return out

    def map(self, fn) -> "MlpParams":
        return replace(self, weights=tuple(fn(w) for w in self.weights),
                       biases=tuple(fn(b) for b in self.biases))

    def zeros_like(self) -> "MlpParams":
        return self.map(np.zeros_like)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise DimensionError(f"flat vector has {vec.size} entries, expected {self.n_params}")
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            bs.append(vec[pos:pos + b.size].copy())
            pos += b.size
        return replace(self, weights=tuple(ws), biases=tuple(bs))


def init_mlp(sizes, rng: np.random.Generator, output: str = "linear") -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    if len(sizes) < 2:
        raise DimensionError("an MLP needs at least input and output sizes")
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bs.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(tuple(ws), tuple(bs), output)


def zero_mlp(sizes, output: str = "linear") -> MlpParams:
    ws = tuple(np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:]))
    bs = tuple(np.zeros(b) for b in sizes[1:])
    return MlpParams(ws, bs, output)


@dataclass
class GradTape:
    params: MlpParams
    layer_inputs: list
    pre_activations: list
    output: np.ndarray
    used: bool = field(default=False)


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, GradTape]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.sizes[0]:
        raise DimensionError(f"input has {x.shape[-1]} features, network expects {params.sizes[0]}")
    inputs, pres = [], []
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pres.append(z)
        if k < last:
            h = np.maximum(z, 0.0)
        elif params.output == "sigmoid":
            h = expit(z)
        else:
            h = z
    check_finite(h, "mlp output")
    return h, GradTape(params, inputs, pres, h)


def mlp_backward(tape: GradTape, output_grad: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Gradients of sum(output * output_grad) w.r.t. every parameter and the input."""
    if tape.used:
        raise UsageError("gradient tape already consumed; run a new forward pass")
    tape.used = True
    params = tape.params
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != tape.output.shape:
        raise DimensionError(f"output_grad shape {g.shape} != output shape {tape.output.shape}")
    last = len(params.weights) - 1
    gws, gbs = [None] * (last + 1), [None] * (last + 1)
    for k in range(last, -1, -1):
        z = tape.pre_activations[k]
        if k < last:
            g = g * (z > 0)
        elif params.output == "sigmoid":
            g = g * tape.output * (1.0 - tape.output)
        h = tape.layer_inputs[k]
        fan_in, fan_out = params.weights[k].shape
        gws[k] = h.reshape(-1, fan_in).T @ g.reshape(-1, fan_out)
        gbs[k] = g.reshape(-1, fan_out).sum(axis=0)
        g = g @ params.weights[k].T
    grads = MlpParams(tuple(gws), tuple(gbs), params.output)
    return grads, g


@dataclass(frozen=True)
class AdamState:
    m: MlpParams
    v: MlpParams
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: MlpParams, grads: MlpParams) -> tuple[MlpParams, AdamState]:
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t

    def update(p, g, m, v):
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        check_finite(g, "gradient")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        p = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        return p, m, v

    new_w, new_mw, new_vw, new_b, new_mb, new_vb = [], [], [], [], [], []
    for k in range(len(params.weights)):
        p, m, v = update(params.weights[k], grads.weights[k], state.m.weights[k], state.v.weights[k])
        new_w.append(p), new_mw.append(m), new_vw.append(v)
        p, m, v = update(params.biases[k], grads.biases[k], state.m.biases[k], state.v.biases[k])
        new_b.append(p), new_mb.append(m), new_vb.append(v)
    out = MlpParams(tuple(new_w), tuple(new_b), params.output)
    m = MlpParams(tuple(new_mw), tuple(new_mb), params.output)
    v = MlpParams(tuple(new_vw), tuple(new_vb), params.output)
    return out, replace(state, m=m, v=v, step=t)


def time_embed(step, dim: int) -> np.ndarray:
    """Sinusoidal embedding: first half sin(step * f_k), second half cos(step * f_k),
    f_k = 10000 ** (-2k / dim). Accepts a scalar or an array of steps."""
    if dim % 2:
        raise DimensionError("embedding dim must be even")
    half = dim // 2
    freqs = 10000.0 ** (-2.0 * np.arange(half) / dim)
    phase = np.asarray(step, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


# -- checkpoint file ---------------------------------------------------------
#
# b"CDIFF1" | u32 meta_len | meta (utf-8 JSON) | u32 n_blocks |
#   per block: u32 name_len | name | u32 ndim | ndim * u64 | float64 LE payload

MAGIC = b"CDIFF1"


def save_blocks(path, blocks: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_bytes(b"".join(parts))
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_blocks(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    data = path.read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise ParseError(f"{path}: truncated at offset {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise ParseError(f"{path}: bad magic, not a checkpoint file")
    (meta_len,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(meta_len).decode())
    except ValueError as exc:
        raise ParseError(f"{path}: corrupt metadata at offset {len(MAGIC) + 4}: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    blocks = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        blocks[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(data):
        raise ParseError(f"{path}: {len(data) - pos} trailing bytes at offset {pos}")
    return blocks, meta


def mlp_to_blocks(prefix: str, params: MlpParams) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in params.named().items()}


def mlp_from_blocks(prefix: str, blocks: dict[str, np.ndarray], output: str) -> MlpParams:
    ws, bs, k = [], [], 0
    while f"{prefix}/w{k}" in blocks:
        ws.append(blocks[f"{prefix}/w{k}"])
        bs.append(blocks[f"{prefix}/b{k}"])
        k += 1
    if not ws:
        raise ParseError(f"checkpoint has no block named {prefix}/w0")
    return MlpParams(tuple(ws), tuple(bs), output)
