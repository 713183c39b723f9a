"""Small numpy neural-network engine.

Multilayer perceptrons with hand-written reverse mode, Adam and Polyak
averaging. Arrays are float32 during training; every function follows the
dtype of the parameter store, so casting a store to float64 gives a
gradient-check friendly copy of the same network.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

Grads = Dict[str, np.ndarray]

ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: Tuple[int, ...]
    hidden_activation: str = "tanh"
    init_scheme: str = "xavier_uniform"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigError(f"MlpSpec needs at least two widths, got {widths}")
        if any(w < 1 for w in widths):
            raise ConfigError(f"MlpSpec widths must be >= 1, got {widths}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ConfigError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.init_scheme != "xavier_uniform":
            raise ConfigError(f"unknown init scheme {self.init_scheme!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))

    @classmethod
    def from_hidden(cls, n_in: int, hidden: Sequence[int], n_out: int, activation="tanh"):
        return cls((n_in, *hidden, n_out), activation)


@dataclass
class ParamStore:
    """Named parameter arrays of one MLP (``W0, b0, W1, b1, ...``).

    ``W{i}`` has shape ``(fan_in, fan_out)`` so a layer computes ``h @ W + b``.
    """

    spec: MlpSpec
    entries: Dict[str, np.ndarray]
    version: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    @property
    def dtype(self):
        return self.entries["W0"].dtype

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.entries.values())

    def copy(self) -> "ParamStore":
        return ParamStore(self.spec, {k: v.copy() for k, v in self.entries.items()}, self.version)

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(
            self.spec, {k: v.astype(dtype) for k, v in self.entries.items()}, self.version
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.entries.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k, v in self.entries.items():
            v[...] = vec[i : i + v.size].reshape(v.shape)
            i += v.size

    def zeros_like(self) -> Grads:
        return {k: np.zeros_like(v) for k, v in self.entries.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.entries.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def layer_names(spec: MlpSpec) -> List[str]:
    names = []
    for i in range(spec.n_layers):
        names += [f"W{i}", f"b{i}"]
    return names


def mlp_init(spec: MlpSpec, seed: int, dtype=np.float32) -> ParamStore:
    """Xavier-uniform weights, zero biases, fully determined by ``seed``."""
    if not isinstance(spec, MlpSpec):
        spec = MlpSpec(tuple(spec))
    rng = np.random.default_rng(int(seed))
    entries = {}
    w = spec.layer_widths
    for i in range(spec.n_layers):
        limit = np.sqrt(6.0 / (w[i] + w[i + 1]))
        entries[f"W{i}"] = rng.uniform(-limit, limit, size=(w[i], w[i + 1])).astype(dtype)
        entries[f"b{i}"] = np.zeros(w[i + 1], dtype=dtype)
    return ParamStore(spec, entries)


def mlp_zeros(spec: MlpSpec, dtype=np.float32) -> ParamStore:
    store = mlp_init(spec, 0, dtype)
    for v in store.entries.values():
        v[...] = 0
    return store


def _as_input(params: ParamStore, x) -> np.ndarray:
    x = np.asarray(x, dtype=params.dtype)
    if x.shape[-1:] != (params.spec.layer_widths[0],):
        raise ShapeError(
            f"input width {x.shape[-1:] or '()'} does not match network input "
            f"{params.spec.layer_widths[0]}"
        )
    return x


def _forward(params: ParamStore, x: np.ndarray) -> List[np.ndarray]:
    """Return the list of layer outputs; element 0 is the input itself."""
    e = params.entries
    n = params.spec.n_layers
    relu = params.spec.hidden_activation == "relu"
    outs = [x]
    h = x
    for i in range(n):
        h = h @ e[f"W{i}"] + e[f"b{i}"]
        if i < n - 1:
            h = np.maximum(h, 0) if relu else np.tanh(h)
        outs.append(h)
    return outs


def mlp_forward(params: ParamStore, x) -> np.ndarray:
    """Final-layer pre-activation for input of shape ``(..., n_in)``."""
    return _forward(params, _as_input(params, x))[-1]


def mlp_forward_cached(params: ParamStore, x) -> Tuple[np.ndarray, List[np.ndarray]]:
    outs = _forward(params, _as_input(params, x))
    return outs[-1], outs


def mlp_backward(
    params: ParamStore,
    x,
    upstream,
    cache: Optional[List[np.ndarray]] = None,
    need_input_grad: bool = True,
) -> Tuple[Grads, Optional[np.ndarray]]:
    """Gradients of ``sum(upstream * mlp_forward(params, x))``.

    Returns parameter gradients keyed like ``params.entries`` and the gradient
    with respect to ``x``. Pass the ``cache`` from :func:`mlp_forward_cached`
    to skip the recomputation.
    """
    if cache is None:
        cache = _forward(params, _as_input(params, x))
    out = cache[-1]
    delta = np.asarray(upstream, dtype=params.dtype)
    if delta.shape != out.shape:
        raise ShapeError(f"upstream shape {delta.shape} != output shape {out.shape}")
    e = params.entries
    n = params.spec.n_layers
    relu = params.spec.hidden_activation == "relu"
    grads: Grads = {}
    for i in range(n - 1, -1, -1):
        h_in = cache[i]
        if h_in.ndim == 1:
            grads[f"W{i}"] = np.outer(h_in, delta)
            grads[f"b{i}"] = delta.copy()
        else:
            h2 = h_in.reshape(-1, h_in.shape[-1])
            d2 = delta.reshape(-1, delta.shape[-1])
            grads[f"W{i}"] = h2.T @ d2
            grads[f"b{i}"] = d2.sum(axis=0)
        if i == 0 and not need_input_grad:
            break
        delta = delta @ e[f"W{i}"].T
        if i > 0:
            if relu:
                delta = delta * (h_in > 0)
            else:
                delta = delta * (1 - h_in * h_in)
    input_grad = delta if need_input_grad else None
    return {k: grads[k] for k in params.entries}, input_grad


def add_grads(a: Grads, b: Grads) -> Grads:
    return {k: a[k] + b[k] for k in a}


@dataclass
class AdamState:
    m: Grads
    v: Grads
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")


def adam_init(params, lr: float = 3e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    """Fresh optimiser state for a ParamStore or a plain dict of arrays."""
    entries = params.entries if isinstance(params, ParamStore) else params
    return AdamState(
        m={k: np.zeros_like(v) for k, v in entries.items()},
        v={k: np.zeros_like(v) for k, v in entries.items()},
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(state: AdamState, params, grads: Grads):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``.

    Raises NumericError without touching anything if a gradient is not finite.
    """
    entries = params.entries if isinstance(params, ParamStore) else params
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k!r}; update aborted")
        if g.shape != entries[k].shape:
            raise ShapeError(f"gradient {k!r} shape {g.shape} != {entries[k].shape}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        entries[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if isinstance(params, ParamStore):
        params.version += 1
    return params, state


def polyak_update(target: ParamStore, online: ParamStore, tau: float) -> ParamStore:
    """``target <- tau * online + (1 - tau) * target`` in place."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    for k, t in target.entries.items():
        o = online.entries[k]
        if o.shape != t.shape:
            raise ShapeError(f"incongruent stores at {k!r}")
        if tau == 1.0:
            t[...] = o
        elif tau != 0.0:
            t *= 1.0 - tau
            t += tau * o
    target.version += 1
    return target
