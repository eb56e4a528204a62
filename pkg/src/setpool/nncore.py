"""Small dense networks with hand-written backpropagation.

Everything is float64 numpy. A network is an ordered list of affine layers,
each followed by an elementwise activation. ``forward`` and ``backward`` accept
either a single input vector or a 2-D batch (one row per input); for a batch the
returned parameter gradients are summed over rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    """Input of the wrong dimension or an invalid index."""


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class Layer:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class DenseNet:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for k in range(1, len(self.layers)):
            if self.layers[k].weight.shape[1] != self.layers[k - 1].weight.shape[0]:
                raise ShapeError(
                    f"layer {k} expects {self.layers[k].weight.shape[1]} inputs, "
                    f"layer {k - 1} produces {self.layers[k - 1].weight.shape[0]}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.weight.shape[0] for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "DenseNet":
        if len(arrays) != 2 * len(self.layers):
            raise ShapeError("array count does not match layer count")
        layers = []
        for k, layer in enumerate(self.layers):
            w, b = arrays[2 * k], arrays[2 * k + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError(f"layer {k}: shape mismatch")
            layers.append(Layer(np.array(w, dtype=np.float64), np.array(b, dtype=np.float64), layer.activation))
        return DenseNet(layers)

    def copy(self) -> "DenseNet":
        return self.with_arrays(self.arrays())

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_dense(dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> DenseNet:
    """Uniform fan-in/fan-out initialisation with zero biases."""
    if len(activations) != len(dims) - 1:
        raise ShapeError("need one activation per layer")
    layers = []
    for n_in, n_out, act in zip(dims[:-1], dims[1:], activations):
        bound = np.sqrt(6.0 / (n_in + n_out))
        layers.append(Layer(rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out), act))
    return DenseNet(layers)


def zeros_like_net(net: DenseNet) -> DenseNet:
    return net.with_arrays([np.zeros_like(a) for a in net.arrays()])


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError(f"expected input of length {net.input_dim}, got shape {x.shape}")
    return x, single


def forward_cache(net: DenseNet, x) -> tuple[np.ndarray, list]:
    xb, single = _as_batch(net, x)
    cache = []
    a = xb
    for layer in net.layers:
        z = a @ layer.weight.T + layer.bias
        out = _act(layer.activation, z)
        cache.append((a, z, out))
        a = out
    return (a[0] if single else a), cache


def forward(net: DenseNet, x) -> np.ndarray:
    return forward_cache(net, x)[0]


@dataclass
class Gradients:
    """Per-layer gradients plus the gradient with respect to the input."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input: np.ndarray | None = field(default=None)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "Gradients":
        return cls(list(arrays[0::2]), list(arrays[1::2]))

    @classmethod
    def zeros(cls, net: DenseNet) -> "Gradients":
        return cls.from_arrays([np.zeros_like(a) for a in net.arrays()])

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients.from_arrays([a + b for a, b in zip(self.arrays(), other.arrays())])

    def scale(self, c: float) -> "Gradients":
        return Gradients.from_arrays([c * a for a in self.arrays()])

    def flat(self) -> np.ndarray:
        return flatten(self.arrays())

    def matches(self, net: DenseNet) -> bool:
        return [a.shape for a in self.arrays()] == [a.shape for a in net.arrays()]


def backward_cache(net: DenseNet, cache: list, upstream: np.ndarray) -> Gradients:
    g = upstream
    ws, bs = [], []
    for layer, (a_in, z, out) in zip(reversed(net.layers), reversed(cache)):
        dz = g * _act_grad(layer.activation, z, out)
        ws.append(dz.T @ a_in)
        bs.append(dz.sum(axis=0))
        g = dz @ layer.weight
    return Gradients(ws[::-1], bs[::-1], g)


def backward(net: DenseNet, x, upstream) -> Gradients:
    """Gradient of <upstream, forward(net, x)> w.r.t. every parameter and the input.

    For a batch input, ``upstream`` holds one row per input row and parameter
    gradients are summed over the batch.
    """
    xb, single = _as_batch(net, x)
    u = np.asarray(upstream, dtype=np.float64)
    if single:
        u = u[None, :] if u.ndim == 1 else u
    if u.shape != (xb.shape[0], net.output_dim):
        raise ShapeError(f"upstream shape {u.shape} does not match output {(xb.shape[0], net.output_dim)}")
    _, cache = forward_cache(net, xb)
    grads = backward_cache(net, cache, u)
    if single:
        grads.input = grads.input[0]
    return grads


def apply_step(net: DenseNet, grads: Gradients, lr: float) -> DenseNet:
    """Return ``net + lr * grads`` (pass a negative lr to descend)."""
    return net.with_arrays([a + lr * g for a, g in zip(net.arrays(), grads.arrays())])


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] == 0:
        raise ShapeError("log_softmax of an empty vector")
    s = v - v.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def cross_entropy(logits, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ShapeError(f"label {label} outside [0, {logits.shape[-1]})")
    return float(-log_softmax(logits)[label])


def cross_entropy_grad(logits, label: int) -> np.ndarray:
    """d cross_entropy / d logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ShapeError(f"label {label} outside [0, {logits.shape[-1]})")
    g = softmax(logits)
    g[label] -= 1.0
    return g


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.ravel(a) for a in arrays])


def unflatten(vec: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    total = sum(a.size for a in like)
    if vec.size != total:
        raise ShapeError(f"flat vector has {vec.size} entries, expected {total}")
    out, i = [], 0
    for a in like:
        out.append(np.array(vec[i:i + a.size]).reshape(a.shape))
        i += a.size
    return out


class Adam:
    """Adam over a fixed list of arrays; ``step`` ascends when ``ascend`` is set."""

    def __init__(self, shapes: Sequence[tuple], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, arrays, grads, lr: float, ascend: bool = False) -> list[np.ndarray]:
        self.t += 1
        sign = 1.0 if ascend else -1.0
        out = []
        for k, (a, g) in enumerate(zip(arrays, grads)):
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / (1 - self.beta1 ** self.t)
            vhat = self.v[k] / (1 - self.beta2 ** self.t)
            out.append(a + sign * lr * mhat / (np.sqrt(vhat) + self.eps))
        return out

    def state_arrays(self) -> list[np.ndarray]:
        return self.m + self.v + [np.array([self.t], dtype=np.float64)]

    def load_state_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        n = len(self.m)
        self.m = [np.array(a) for a in arrays[:n]]
        self.v = [np.array(a) for a in arrays[n:2 * n]]
        self.t = int(arrays[2 * n][0])
