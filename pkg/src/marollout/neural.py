"""Small dense networks with hand-written backprop, categorical heads and Adam."""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

CHECKPOINT_VERSION = 1


class StaleCacheError(RuntimeError):
    pass


class Mlp:
    """Fully connected net with tanh hidden layers and a linear output.

    ``weights[k]`` has shape ``(sizes[k], sizes[k+1])`` so a batch of row
    vectors is pushed through as ``x @ W + b``.
    """

    def __init__(self, sizes: Sequence[int], weights: Optional[List[np.ndarray]] = None,
                 biases: Optional[List[np.ndarray]] = None):
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output size")
        self.sizes = tuple(int(s) for s in sizes)
        if weights is None:
            weights = [np.zeros((a, b)) for a, b in zip(self.sizes, self.sizes[1:])]
        if biases is None:
            biases = [np.zeros(b) for b in self.sizes[1:]]
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[k], self.sizes[k + 1]) or b.shape != (self.sizes[k + 1],):
                raise ValueError(f"layer {k}: inconsistent parameter shapes")
        self.version = 0

    @classmethod
    def initialized(cls, sizes: Sequence[int], rng: np.random.Generator,
                    output_scale: float = 1.0) -> "Mlp":
        """Orthogonal init (gain sqrt(2) on hidden layers), zero biases."""
        weights = []
        n_layers = len(sizes) - 1
        for k, (a, b) in enumerate(zip(sizes, sizes[1:])):
            q, r = np.linalg.qr(rng.standard_normal((max(a, b), min(a, b))))
            q = q * np.sign(np.diag(r))
            w = q if a >= b else q.T
            gain = output_scale if k == n_layers - 1 else np.sqrt(2.0)
            weights.append(gain * w[:a, :b])
        return cls(sizes, weights)

    @property
    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, "MlpCache"]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {x.shape[-1]}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = np.tanh(h)
            acts.append(h)
        out = h[0] if squeeze else h
        return out, MlpCache(acts, squeeze, id(self), self.version)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: "MlpCache", output_grad: np.ndarray) -> List[np.ndarray]:
        """Gradients of ``sum(output * output_grad)``, ordered like ``params``."""
        if cache.owner != id(self) or cache.version != self.version:
            raise StaleCacheError("cache does not belong to the current parameters")
        g = np.asarray(output_grad, dtype=np.float64)
        if cache.squeezed:
            g = g[None, :]
        grads: List[np.ndarray] = [None] * (2 * len(self.weights))
        for k in range(len(self.weights) - 1, -1, -1):
            inp = cache.acts[k]
            grads[2 * k] = inp.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            if k > 0:
                g = (g @ self.weights[k].T) * (1.0 - inp ** 2)
        return grads

    def apply_update(self, new_params: Sequence[np.ndarray]) -> None:
        for k in range(len(self.weights)):
            self.weights[k] = new_params[2 * k]
            self.biases[k] = new_params[2 * k + 1]
        self.version += 1

    def param_bytes(self) -> bytes:
        return b"".join(p.tobytes() for p in self.params)


@dataclass
class MlpCache:
    acts: List[np.ndarray]
    squeezed: bool
    owner: int
    version: int


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_categorical(logits: np.ndarray, rng: np.random.Generator) -> Tuple[int, float]:
    """Draw one action from softmax(logits) by inverse CDF."""
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    cdf = np.cumsum(np.exp(logp))
    a = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    a = min(a, len(logp) - 1)
    return a, float(logp[a])


def entropy(logits: np.ndarray) -> np.ndarray:
    logp = log_softmax(logits)
    return -(np.exp(logp) * logp).sum(axis=-1)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 1e-4, **kw) -> "AdamState":
        return cls(lr=lr, m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> List[np.ndarray]:
    """One bias-corrected Adam descent step; returns new arrays, mutates ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adam_step")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param {k}: shape {p.shape} vs grad {g.shape}")
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        out.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def save_arrays(path, named: dict, meta: dict) -> None:
    """Write arrays plus a JSON header to an ``.npz`` checkpoint."""
    meta = dict(meta, format_version=CHECKPOINT_VERSION)
    payload = {k: np.asarray(v) for k, v in named.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_arrays(path) -> Tuple[dict, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        arrays = {k: data[k].copy() for k in data.files if k != "__meta__"}
    return arrays, meta
