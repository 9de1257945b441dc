"""Dense float64 arithmetic, the toy denoiser and a small reverse-mode tape.

Tensors are plain ``numpy.ndarray`` objects (float64, C order). The tape only
knows the handful of ops the denoiser, LoRA adapters and router need.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from scipy.special import expit

from .fpq import FpQuantizerParams, fp_grid, fp_quantize

__all__ = [
    "silu",
    "time_embedding",
    "Linear",
    "DenoiserModel",
    "GradientTape",
    "Node",
    "EAGER",
    "forward",
    "backward",
]


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * expit(x)


def _sigmoid(x):
    return expit(x)


def time_embedding(t, d: int) -> np.ndarray:
    """Sinusoidal embedding, interleaved: ``[sin(t w0), cos(t w0), sin(t w1), ...]``.

    ``t`` may be a scalar (returns shape (d,)) or a 1-D array (returns (len(t), d)).
    """
    if d <= 0 or d % 2:
        raise ValueError(f"time embedding dimension must be positive and even, got {d}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("timesteps must be non-negative")
    k = np.arange(d // 2, dtype=np.float64)
    omega = 10000.0 ** (-2.0 * k / d)
    phase = t_arr[..., None] * omega
    emb = np.empty(phase.shape[:-1] + (d,), dtype=np.float64)
    emb[..., 0::2] = np.sin(phase)
    emb[..., 1::2] = np.cos(phase)
    return emb


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Node:
    __slots__ = ("value", "parents", "backward_fn", "name")

    def __init__(self, value, parents=(), backward_fn=None, name=None):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape


def _val(x):
    return x.value if isinstance(x, Node) else x


class _Eager:
    """Tape-free twin of :class:`GradientTape`; every op works on arrays."""

    def param(self, name, value):
        return value

    def value(self, x):
        return _val(x)

    def matmul(self, a, b, transpose_b=False):
        return a @ (b.T if transpose_b else b)

    def add(self, a, b):
        return a + b

    def mul(self, a, b):
        return a * b

    def scale(self, a, c):
        return a * c

    def silu(self, a):
        return silu(a)

    def fake_quant(self, a, params):
        return a if params is None else fp_quantize(a, params)

    def getitem(self, a, idx):
        return a[idx]

    def reshape(self, a, shape):
        return a.reshape(shape)

    def sum(self, a):
        return float(np.sum(a))

    def softmax(self, logits):
        return _softmax(logits)

    def onehot_ste(self, logits):
        return _onehot(logits)

    def mse(self, a, b, weights=None):
        return _weighted_mse(a, b, weights)


EAGER = _Eager()


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _onehot(logits):
    idx = np.argmax(logits, axis=-1)  # first maximum wins ties
    out = np.zeros_like(logits)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def _weighted_mse(a, b, weights):
    a = _val(a)
    b = _val(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    d2 = (a - b) ** 2
    if weights is None:
        return float(np.mean(d2))
    w = np.asarray(weights, dtype=np.float64).reshape((-1,) + (1,) * (a.ndim - 1))
    return float(np.mean(w * d2))


class GradientTape:
    """Records ops whose inputs depend on a trainable parameter.

    Nodes that cannot reach a trainable parameter are returned as plain
    arrays, so their gradients are never built.
    """

    def __init__(self, trainable: Iterable[str] | Callable[[str], bool] = ()):
        if callable(trainable):
            self._is_trainable = trainable
        else:
            names = frozenset(trainable)
            self._is_trainable = names.__contains__
        self._nodes: list[Node] = []
        self._params: dict[str, Node] = {}

    def _record(self, value, parents, backward_fn):
        node = Node(value, parents, backward_fn)
        self._nodes.append(node)
        return node

    def param(self, name, value):
        if not self._is_trainable(name):
            return value
        if name in self._params:
            return self._params[name]
        node = Node(np.asarray(value, dtype=np.float64), name=name)
        self._nodes.append(node)
        self._params[name] = node
        return node

    def value(self, x):
        return _val(x)

    def matmul(self, a, b, transpose_b=False):
        av, bv = _val(a), _val(b)
        bm = bv.T if transpose_b else bv
        out = av @ bm
        if not isinstance(a, Node) and not isinstance(b, Node):
            return out

        def bw(g):
            ga = g @ bm.T if isinstance(a, Node) else None
            gb = None
            if isinstance(b, Node):
                gb = av.T @ g
                if transpose_b:
                    gb = gb.T
            return ga, gb

        return self._record(out, (a, b), bw)

    def add(self, a, b):
        av, bv = _val(a), _val(b)
        out = av + bv
        if not isinstance(a, Node) and not isinstance(b, Node):
            return out
        sa, sb = np.shape(av), np.shape(bv)
        return self._record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def mul(self, a, b):
        av, bv = _val(a), _val(b)
        out = av * bv
        if not isinstance(a, Node) and not isinstance(b, Node):
            return out
        sa, sb = np.shape(av), np.shape(bv)
        return self._record(
            out, (a, b), lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb))
        )

    def scale(self, a, c):
        if not isinstance(a, Node):
            return a * c
        return self._record(a.value * c, (a,), lambda g: (g * c,))

    def silu(self, a):
        if not isinstance(a, Node):
            return silu(a)
        x = a.value
        s = _sigmoid(x)
        return self._record(silu(x), (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))

    def fake_quant(self, a, params: FpQuantizerParams | None):
        """Quantize forward; pass the gradient through inside the grid range."""
        if params is None:
            return a
        if not isinstance(a, Node):
            return fp_quantize(a, params)
        grid = fp_grid(params)
        x = a.value
        inside = (x >= grid[0]) & (x <= grid[-1])
        return self._record(fp_quantize(x, params), (a,), lambda g: (g * inside,))

    def getitem(self, a, idx):
        if not isinstance(a, Node):
            return a[idx]
        shape = a.value.shape

        def bw(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        return self._record(a.value[idx], (a,), bw)

    def reshape(self, a, shape):
        if not isinstance(a, Node):
            return a.reshape(shape)
        old = a.value.shape
        return self._record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))

    def sum(self, a):
        if not isinstance(a, Node):
            return float(np.sum(a))
        shape = a.value.shape
        return self._record(np.float64(a.value.sum()), (a,), lambda g: (np.full(shape, g),))

    def softmax(self, logits):
        if not isinstance(logits, Node):
            return _softmax(logits)
        p = _softmax(logits.value)
        return self._record(p, (logits,), lambda g: (_softmax_vjp(p, g),))

    def onehot_ste(self, logits):
        """Hard argmax one-hot forward, softmax Jacobian backward."""
        if not isinstance(logits, Node):
            return _onehot(logits)
        p = _softmax(logits.value)
        return self._record(_onehot(logits.value), (logits,), lambda g: (_softmax_vjp(p, g),))

    def mse(self, a, b, weights=None):
        """Mean squared difference; ``weights`` scales each leading-axis row."""
        out = np.float64(_weighted_mse(a, b, weights))
        if not isinstance(a, Node) and not isinstance(b, Node):
            return float(out)
        av, bv = _val(a), _val(b)
        if weights is None:
            w = 1.0
        else:
            w = np.asarray(weights, dtype=np.float64).reshape((-1,) + (1,) * (av.ndim - 1))
        coef = 2.0 / av.size

        def bw(g):
            d = g * coef * w * (av - bv)
            return (d if isinstance(a, Node) else None, -d if isinstance(b, Node) else None)

        return self._record(out, (a, b), bw)

    def backward(self, loss) -> dict[str, np.ndarray]:
        if not self._nodes or not isinstance(loss, Node):
            raise RuntimeError("tape holds no recorded computation reaching a trainable parameter")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self._nodes):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not isinstance(parent, Node):
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        return {
            name: np.array(grads.get(id(node), np.zeros_like(node.value)))
            for name, node in self._params.items()
        }


def _softmax_vjp(p, g):
    return p * (g - np.sum(p * g, axis=-1, keepdims=True))


@dataclass
class Linear:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str | None = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenoiserModel:
    """MLP noise predictor: SiLU hidden blocks, time embedding added per block.

    ``layers[0]`` maps the input to the hidden width and ``layers[-1]`` maps
    back; every hidden block ``i`` adds ``time_proj[i](emb(t))`` before SiLU.
    """

    layers: list[Linear]
    time_proj: list[Linear]
    time_embed_dim: int
    input_dim: int

    @classmethod
    def init(cls, input_dim=2, hidden=64, n_hidden=3, time_embed_dim=32, rng=None, zero=False):
        if n_hidden < 1:
            raise ValueError("need at least one hidden block")
        rng = np.random.default_rng(0) if rng is None else rng

        def lin(n_in, n_out, act):
            if zero:
                w = np.zeros((n_out, n_in))
            else:
                w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))
            return Linear(w, np.zeros(n_out), act)

        layers = [lin(input_dim, hidden, "silu")]
        layers += [lin(hidden, hidden, "silu") for _ in range(n_hidden - 1)]
        layers.append(lin(hidden, input_dim, None))
        time_proj = [lin(time_embed_dim, hidden, None) for _ in range(n_hidden)]
        return cls(layers, time_proj, time_embed_dim, input_dim)

    @property
    def n_hidden(self) -> int:
        return len(self.time_proj)

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.weight", layer.weight), (f"layers.{i}.bias", layer.bias)]
        for i, proj in enumerate(self.time_proj):
            out += [(f"time_proj.{i}.weight", proj.weight), (f"time_proj.{i}.bias", proj.bias)]
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        group, idx, attr = name.split(".")
        target = getattr(self, group)[int(idx)]
        setattr(target, attr, np.array(value, dtype=np.float64))

    def input_flags(self) -> list[bool]:
        """True for layers whose input is a SiLU output."""
        return [i > 0 and self.layers[i - 1].activation == "silu" for i in range(len(self.layers))]

    def time_terms(self, t, ops=EAGER):
        """Per-block time contributions, shape (batch or 1, hidden) each."""
        t_arr = np.atleast_1d(np.asarray(t))
        emb = time_embedding(t_arr, self.time_embed_dim)
        terms = []
        for i, proj in enumerate(self.time_proj):
            w = ops.param(f"time_proj.{i}.weight", proj.weight)
            b = ops.param(f"time_proj.{i}.bias", proj.bias)
            terms.append(ops.add(ops.matmul(emb, w, transpose_b=True), b))
        return terms


def forward(model: DenoiserModel, x, t, tape: GradientTape | None = None, probe: dict | None = None):
    """Predicted noise for ``x`` (shape (batch, n) or (n,)) at timestep(s) ``t``.

    ``probe`` (dict site -> list) collects the input of every linear layer
    under keys ``layer{i}.act``.
    """
    ops = tape if tape is not None else EAGER
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != model.input_dim:
        raise ValueError(
            f"layer 0 expects {model.input_dim} input features, got shape {x.shape}"
        )
    terms = model.time_terms(t, ops)
    h = x
    for i, layer in enumerate(model.layers):
        if probe is not None:
            probe.setdefault(f"layer{i}.act", []).append(np.array(ops.value(h)))
        if ops.value(h).shape[-1] != layer.in_features:
            raise ValueError(
                f"layer {i} expects {layer.in_features} input features, got {ops.value(h).shape[-1]}"
            )
        w = ops.param(f"layers.{i}.weight", layer.weight)
        b = ops.param(f"layers.{i}.bias", layer.bias)
        h = ops.add(ops.matmul(h, w, transpose_b=True), b)
        if i < model.n_hidden:
            h = ops.add(h, terms[i])
        if layer.activation == "silu":
            h = ops.silu(h)
    if squeeze and tape is None:
        return h[0]
    return h


def backward(tape: GradientTape, loss) -> dict[str, np.ndarray]:
    return tape.backward(loss)
