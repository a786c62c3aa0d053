"""Minimal feed-forward network with explicit reverse-mode gradients.

The package trains small multilayer perceptrons whose loss is a kernel
discrepancy of the network outputs, so all that is needed is: a forward pass
that caches activations, a backward pass mapping d(loss)/d(outputs) to
parameter gradients, and Adam. Everything is float64 numpy; a network
instance is owned by one training loop, while read-only snapshots can be
evaluated concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

Array = np.ndarray

FORMAT_NAME = "cgmmd-mlp"
FORMAT_VERSION = 1


class Mlp:
    """ReLU MLP with identity output layer.

    ``layer_dims`` chains input through hidden sizes to the output, e.g.
    (11, 32, 32, 1). Weights are (d_in, d_out) so activations are row
    batches: out = x @ W + b.
    """

    def __init__(self, layer_dims, weights, biases):
        self.layer_dims = tuple(int(d) for d in layer_dims)
        if len(self.layer_dims) < 2 or any(d < 1 for d in self.layer_dims):
            raise ValueError(f"need a chain of positive layer dims, got {layer_dims}")
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        expected = list(zip(self.layer_dims[:-1], self.layer_dims[1:]))
        if len(self.weights) != len(expected) or len(self.biases) != len(expected):
            raise ValueError("layer count does not match layer_dims")
        for (din, dout), w, b in zip(expected, self.weights, self.biases):
            if w.shape != (din, dout) or b.shape != (dout,):
                raise ValueError(f"layer shape mismatch: expected {(din, dout)}, "
                                 f"got W {w.shape}, b {b.shape}")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def parameters(self) -> list[Array]:
        """Flat parameter list, weights and biases interleaved per layer."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        return Mlp(self.layer_dims, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])


def init_mlp(layer_dims, seed: int = 0) -> Mlp:
    """He-style fan-in uniform initialization, biases zero, seeded."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for din, dout in zip(layer_dims[:-1], layer_dims[1:]):
        limit = np.sqrt(6.0 / din)
        weights.append(rng.uniform(-limit, limit, size=(din, dout)))
        biases.append(np.zeros(dout))
    return Mlp(layer_dims, weights, biases)


def forward(net: Mlp, x) -> tuple[Array, list]:
    """Run the network on a row batch; returns (outputs, cache).

    The cache holds each layer's input and pre-activation, which is exactly
    what :func:`backward` needs.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"input must be a (batch, dim) array, got shape {x.shape}")
    if x.shape[1] != net.in_dim:
        raise ValueError(f"input dimension {x.shape[1]} != network input {net.in_dim}")
    cache = []
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        cache.append((h, z))
        h = z if i == last else np.maximum(z, 0.0)
    return h, cache


def backward(net: Mlp, cache: list, out_grads) -> list[Array]:
    """Parameter gradients of sum(out_grads * outputs) for a cached forward.

    Returns gradients aligned with ``net.parameters()``.
    """
    g = np.asarray(out_grads, dtype=float)
    if len(cache) != len(net.weights):
        raise ValueError("cache does not match this network")
    batch, z_last = cache[-1]
    if g.shape != z_last.shape:
        raise ValueError(f"out_grads shape {g.shape} != output shape {z_last.shape}")
    w_grads = [None] * len(net.weights)
    b_grads = [None] * len(net.biases)
    for i in range(len(net.weights) - 1, -1, -1):
        h_in, z = cache[i]
        if i < len(net.weights) - 1:
            g = g * (z > 0.0)
        w_grads[i] = h_in.T @ g
        b_grads[i] = g.sum(axis=0)
        if i > 0:
            g = g @ net.weights[i].T
    grads = []
    for wg, bg in zip(w_grads, b_grads):
        grads.append(wg)
        grads.append(bg)
    return grads


class Adam:
    """Adam with bias correction; moments are allocated on the first step."""

    def __init__(self, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: list[Array], grads: list[Array]) -> None:
        """Update parameter arrays in place."""
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ValueError("parameter/gradient count changed under the optimizer")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    n_params: int
    passed: bool


def grad_check(net: Mlp, loss_fn, tolerance: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic parameter gradients with central finite differences.

    ``loss_fn(net)`` must return ``(value, grads)`` where grads aligns with
    ``net.parameters()``; finite differences only use the value. The error is
    the worst per-tensor relative deviation ||a - f|| / (||a|| + ||f||).
    """
    _, analytic = loss_fn(net)
    params = net.parameters()
    n_params = int(sum(p.size for p in params))
    if n_params == 0:
        return GradCheckReport(0.0, 0, True)
    worst = 0.0
    for p, a in zip(params, analytic):
        fd = np.zeros_like(p)
        for idx in np.ndindex(*p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up, _ = loss_fn(net)
            p[idx] = orig - step
            down, _ = loss_fn(net)
            p[idx] = orig
            fd[idx] = (up - down) / (2.0 * step)
        denom = np.linalg.norm(a) + np.linalg.norm(fd) + 1e-12
        worst = max(worst, float(np.linalg.norm(a - fd) / denom))
    return GradCheckReport(worst, n_params, worst < tolerance)


def draw_inputs_away_from_kinks(net: Mlp, rng: np.random.Generator, count: int,
                                margin: float = 1e-6, max_tries: int = 200) -> Array:
    """Standard-normal inputs whose hidden pre-activations avoid the ReLU kink.

    Finite differences are only trustworthy where the loss is smooth, so rows
    with any |pre-activation| < margin are redrawn.
    """
    rows = []
    for _ in range(max_tries):
        if len(rows) == count:
            break
        x = rng.standard_normal((1, net.in_dim))
        _, cache = forward(net, x)
        hidden = cache[:-1]
        if all(np.min(np.abs(z)) > margin for _, z in hidden) or not hidden:
            rows.append(x[0])
    if len(rows) < count:
        raise RuntimeError("could not find enough kink-free inputs")
    return np.array(rows)


# ---------------------------------------------------------------------------
# serialization


def mlp_to_dict(net: Mlp) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "layer_dims": list(net.layer_dims),
        "layers": [{"weight": w.tolist(), "bias": b.tolist()}
                   for w, b in zip(net.weights, net.biases)],
    }


def mlp_from_dict(doc: dict) -> Mlp:
    try:
        if doc["format"] != FORMAT_NAME:
            raise ConfigError(f"not a {FORMAT_NAME} document")
        if doc["version"] != FORMAT_VERSION:
            raise ConfigError(f"unsupported model format version {doc['version']}")
        dims = doc["layer_dims"]
        weights = [np.asarray(layer["weight"], dtype=float) for layer in doc["layers"]]
        biases = [np.asarray(layer["bias"], dtype=float) for layer in doc["layers"]]
        return Mlp(dims, weights, biases)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model file: {exc}") from exc


def save_mlp(net: Mlp, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mlp_to_dict(net), fh, sort_keys=True, separators=(",", ":"))


def load_mlp(path) -> Mlp:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model file {path}: {exc}") from exc
    return mlp_from_dict(doc)
