"""Representation network phi: R^d -> R^{d_out} with exact gradients.

A small fixed architecture: L hidden blocks of affine -> GELU (-> dropout in
train mode), an affine output projection, then row-wise L2 normalization so
embeddings live on the unit sphere. Differentiation is hand-rolled
reverse-mode for exactly this architecture and is checked against central
finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

NORM_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"CFNET1"
CHECKPOINT_VERSION = 1

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    """Exact GELU, x * Phi(x) with the Gaussian CDF (no tanh approximation)."""
    return x * ndtr(x)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx GELU(x) = Phi(x) + x * pdf(x)."""
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass(frozen=True)
class NetArch:
    input_dim: int
    hidden_width: int = 256
    hidden_layers: int = 2
    output_dim: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        dims = (self.input_dim, self.hidden_width, self.hidden_layers, self.output_dim)
        if any(int(v) != v or v < 1 for v in dims):
            raise ValueError(f"architecture dims must be integers >= 1, got {dims}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]


@dataclass
class NetParams:
    """Layer parameters plus gradient buffers of identical shapes."""

    arch: NetArch
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    g_weights: list[np.ndarray]
    g_biases: list[np.ndarray]

    def zero_grad(self) -> None:
        for g in self.g_weights:
            g.fill(0.0)
        for g in self.g_biases:
            g.fill(0.0)

    def copy(self) -> "NetParams":
        return NetParams(
            arch=self.arch,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            g_weights=[g.copy() for g in self.g_weights],
            g_biases=[g.copy() for g in self.g_biases],
        )

    def param_arrays(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def grad_arrays(self) -> list[np.ndarray]:
        return list(self.g_weights) + list(self.g_biases)


def init(arch: NetArch, seed: int) -> NetParams:
    """Fan-in-scaled uniform weights, zero biases; deterministic given seed."""
    rng = np.random.default_rng(seed)
    dims = arch.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetParams(
        arch=arch,
        weights=weights,
        biases=biases,
        g_weights=[np.zeros_like(w) for w in weights],
        g_biases=[np.zeros_like(b) for b in biases],
    )


@dataclass
class ForwardCache:
    """Intermediate state from a train-mode forward pass, consumed by backward."""

    inputs: list[np.ndarray]      # activation entering each affine layer
    preacts: list[np.ndarray]     # hidden pre-activations (before GELU)
    masks: list[np.ndarray]       # dropout mask * inverse keep-prob (or None)
    proj: np.ndarray              # output projection before normalization
    norms: np.ndarray             # clamped row norms, shape (m, 1)
    z: np.ndarray                 # normalized output rows


def forward(
    p: NetParams,
    X: np.ndarray,
    mode: str = "eval",
    seed: int = 0,
    return_cache: bool = False,
):
    """Map inputs to unit-norm embeddings.

    Train mode applies inverted dropout after each hidden GELU, seeded for
    reproducibility; eval mode is deterministic. With ``return_cache`` the
    cache needed by :func:`backward` is returned alongside the output.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != p.arch.input_dim:
        raise ValueError(f"input shape {X.shape} does not match input_dim {p.arch.input_dim}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite network input")

    rate = p.arch.dropout_rate
    use_dropout = mode == "train" and rate > 0.0
    rng = np.random.default_rng(seed) if use_dropout else None

    inputs, preacts, masks = [], [], []
    a = X
    for l in range(p.arch.hidden_layers):
        inputs.append(a)
        h = a @ p.weights[l] + p.biases[l]
        preacts.append(h)
        a = gelu(h)
        if use_dropout:
            keep = rng.random(a.shape) >= rate
            m = keep / (1.0 - rate)
            a = a * m
            masks.append(m)
        else:
            masks.append(None)
    inputs.append(a)
    u = a @ p.weights[-1] + p.biases[-1]
    nu = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), NORM_FLOOR)
    z = u / nu
    if not return_cache:
        return z
    return z, ForwardCache(inputs=inputs, preacts=preacts, masks=masks, proj=u, norms=nu, z=z)


def backward(p: NetParams, cache: ForwardCache, d_out: np.ndarray) -> None:
    """Fill the gradient buffers of ``p`` from dLoss/dOutput.

    Gradients are exact for the forward pass that produced ``cache``,
    including the normalization Jacobian and the sampled dropout masks.
    Buffers are overwritten, not accumulated.
    """
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.shape != cache.z.shape:
        raise ValueError(f"upstream gradient shape {d_out.shape} != output shape {cache.z.shape}")

    # Through z = u / nu: where the floor clamps, nu is constant in u.
    z, nu = cache.z, cache.norms
    raw_norm = np.linalg.norm(cache.proj, axis=1, keepdims=True)
    clamped = raw_norm < NORM_FLOOR
    du = (d_out - z * np.sum(z * d_out, axis=1, keepdims=True)) / nu
    if np.any(clamped):
        du = np.where(clamped, d_out / nu, du)

    a = cache.inputs[-1]
    p.g_weights[-1][...] = a.T @ du
    p.g_biases[-1][...] = du.sum(axis=0)
    da = du @ p.weights[-1].T

    for l in range(p.arch.hidden_layers - 1, -1, -1):
        if cache.masks[l] is not None:
            da = da * cache.masks[l]
        dh = da * gelu_grad(cache.preacts[l])
        p.g_weights[l][...] = cache.inputs[l].T @ dh
        p.g_biases[l][...] = dh.sum(axis=0)
        if l > 0:
            da = dh @ p.weights[l].T


def save_params(p: NetParams, path: str | Path, metadata: dict | None = None) -> None:
    """Write a versioned binary checkpoint; round trip is bit-exact."""
    header = {
        "arch": {
            "input_dim": p.arch.input_dim,
            "hidden_width": p.arch.hidden_width,
            "hidden_layers": p.arch.hidden_layers,
            "output_dim": p.arch.output_dim,
            "dropout_rate": p.arch.dropout_rate,
        },
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<6sIQ", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for l in range(len(p.weights)):
            fh.write(np.ascontiguousarray(p.weights[l], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(p.biases[l], dtype="<f8").tobytes())


def load_params(path: str | Path) -> tuple[NetParams, dict]:
    """Read a checkpoint written by :func:`save_params`; returns (params, metadata)."""
    raw = Path(path).read_bytes()
    head = struct.calcsize("<6sIQ")
    if len(raw) < head or raw[:6] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a {CHECKPOINT_MAGIC.decode()} checkpoint: {path}")
    _, version, blob_len = struct.unpack_from("<6sIQ", raw, 0)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[head:head + blob_len].decode())
    arch = NetArch(**header["arch"])
    p = init(arch, seed=0)
    off = head + blob_len
    for l in range(len(p.weights)):
        for arr in (p.weights[l], p.biases[l]):
            flat = np.frombuffer(raw, dtype="<f8", count=arr.size, offset=off)
            arr[...] = flat.reshape(arr.shape)
            off += arr.size * 8
    if off != len(raw):
        raise ValueError("checkpoint has trailing or missing parameter bytes")
    p.zero_grad()
    return p, header["metadata"]
