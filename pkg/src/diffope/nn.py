"""Small dense feed-forward networks with exact reverse-mode gradients.

All parameters are float64.  Forward passes accept a single vector or a
batch ``(n, d)``; backward returns parameter gradients summed over the batch
plus the gradient with respect to the input.
"""

from __future__ import annotations

import numpy as np

from .rng import RngStream

_ACTIVATIONS = ("relu", "sigmoid")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.where(z > 0.0, 1.0, 0.0)
    if name == "sigmoid":
        return a * (1.0 - a)
    raise ValueError(f"unknown activation {name!r}")


class Mlp:
    """Fully connected net: affine layers with a hidden activation, linear output."""

    def __init__(self, layer_dims, weights, biases, activation: str = "relu"):
        if len(layer_dims) < 2:
            raise ValueError("need at least input and output dims")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        self.layer_dims = [int(d) for d in layer_dims]
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activation = activation
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i + 1], self.layer_dims[i]):
                raise ValueError(f"layer {i}: weight shape {w.shape} does not match dims")
            if b.shape != (self.layer_dims[i + 1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} does not match dims")

    @classmethod
    def zeros(cls, layer_dims, activation: str = "relu") -> "Mlp":
        weights = [np.zeros((layer_dims[i + 1], layer_dims[i])) for i in range(len(layer_dims) - 1)]
        biases = [np.zeros(layer_dims[i + 1]) for i in range(len(layer_dims) - 1)]
        return cls(layer_dims, weights, biases, activation)

    @classmethod
    def init_random(cls, layer_dims, rng: RngStream, activation: str = "relu") -> "Mlp":
        """He-style initialization, deterministic given the stream."""
        weights, biases = [], []
        for i in range(len(layer_dims) - 1):
            fan_in = layer_dims[i]
            scale = np.sqrt(2.0 / fan_in)
            weights.append(scale * rng.normal((layer_dims[i + 1], layer_dims[i])))
            biases.append(np.zeros(layer_dims[i + 1]))
        return cls(layer_dims, weights, biases, activation)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping per-layer activations for the backward pass."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.layer_dims[0]:
            raise ValueError(f"input dim {h.shape[1]} != expected {self.layer_dims[0]}")
        pre, acts = [], [h]
        for i in range(self.n_layers):
            z = h @ self.weights[i].T + self.biases[i]
            pre.append(z)
            h = z if i == self.n_layers - 1 else _act(self.activation, z)
            acts.append(h)
        y = acts[-1][0] if single else acts[-1]
        return y, (pre, acts, single)

    def backward(self, cache, upstream: np.ndarray):
        """Exact reverse-mode gradients.

        ``upstream`` is dL/dy with the same leading shape as the cached
        forward input.  Returns ``(grads, dx)`` where ``grads`` is a list of
        ``(dW, db)`` per layer (summed over the batch) and ``dx`` the gradient
        with respect to the input.
        """
        pre, acts, single = cache
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != acts[-1].shape and not single:
            raise ValueError(f"upstream shape {g.shape} != output shape {acts[-1].shape}")
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * self.n_layers  # type: ignore
        dz = g
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                dz = dz * _act_grad(self.activation, pre[i], acts[i + 1])
            dW = dz.T @ acts[i]
            db = dz.sum(axis=0)
            grads[i] = (dW, db)
            dz = dz @ self.weights[i]
        dx = dz[0] if single else dz
        return grads, dx

    # -- flat parameter views (optimizer / checkpoint plumbing) --

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params():
            raise ValueError("flat parameter vector has wrong length")
        pos = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[i] = flat[pos : pos + b.size].reshape(b.shape).copy()
            pos += b.size

    def copy(self) -> "Mlp":
        return Mlp(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )


def grads_flat(net: Mlp, grads) -> np.ndarray:
    """Flatten per-layer (dW, db) pairs in the same order as ``get_flat``."""
    parts = []
    for dW, db in grads:
        parts.append(dW.ravel())
        parts.append(db.ravel())
    return np.concatenate(parts)


class Adam:
    """Adaptive-moment optimizer over a flat float64 parameter vector."""

    def __init__(self, n_params: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.step_count = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        if params.shape != self.m.shape or grads.shape != self.m.shape:
            raise ValueError("parameter/gradient size mismatch")
        self.step_count += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads * grads
        m_hat = self.m / (1.0 - self.beta1 ** self.step_count)
        v_hat = self.v / (1.0 - self.beta2 ** self.step_count)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def sinusoidal_embedding(k, width: int, max_period: float = 10000.0) -> np.ndarray:
    """Sine-cosine embedding of a (batch of) diffusion step index.

    Returns shape ``(width,)`` for scalar ``k`` and ``(n, width)`` for arrays.
    ``width`` must be even.
    """
    if width % 2 != 0:
        raise ValueError("embedding width must be even")
    k_arr = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = k_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return emb[0] if np.isscalar(k) or np.asarray(k).ndim == 0 else emb
