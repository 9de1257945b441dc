"""Low-rank adapters on quantized layers, the LoRA hub and the timestep router."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fpq import FpQuantizerParams, fp_quantize
from .nn import EAGER, DenoiserModel, GradientTape, Node, time_embedding

__all__ = [
    "LoraAdapter",
    "LoraHub",
    "Router",
    "QuantizedDenoiser",
    "route",
    "quantized_forward",
    "allocation_histogram",
    "adapter_layers",
]


@dataclass
class LoraAdapter:
    """Weight delta ``(alpha / rank) * A @ B`` with A (out, r) and B (r, in)."""

    A: np.ndarray
    B: np.ndarray
    alpha: float = 1.0

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scale * (self.A @ self.B)

    @classmethod
    def init(cls, out_features, in_features, rank, rng, alpha=None):
        # A = 0 keeps the initial delta exactly zero
        B = rng.normal(0.0, 1.0 / np.sqrt(in_features), size=(rank, in_features))
        return cls(np.zeros((out_features, rank)), B, float(rank if alpha is None else alpha))


def adapter_layers(model: DenoiserModel) -> list[int]:
    """Linear layers that get adapters: all but the input and output layers."""
    return list(range(1, len(model.layers) - 1))


class LoraHub:
    """``h`` adapters for each adapted layer, keyed by layer index."""

    def __init__(self, adapters: dict[int, list[LoraAdapter]]):
        sizes = {len(v) for v in adapters.values()}
        if len(sizes) > 1:
            raise ValueError("every layer needs the same number of adapters")
        for layer, group in adapters.items():
            shapes = {(a.A.shape, a.B.shape) for a in group}
            if len(shapes) != 1:
                raise ValueError(f"adapters of layer {layer} differ in shape")
        self.adapters = dict(sorted(adapters.items()))

    @classmethod
    def init(cls, model: DenoiserModel, hub_size: int, rank: int, rng, alpha=None):
        if hub_size < 1:
            raise ValueError("hub size must be >= 1")
        adapters = {}
        for i in adapter_layers(model):
            w = model.layers[i].weight
            adapters[i] = [LoraAdapter.init(w.shape[0], w.shape[1], rank, rng, alpha) for _ in range(hub_size)]
        return cls(adapters)

    @property
    def layers(self) -> list[int]:
        return list(self.adapters)

    @property
    def hub_size(self) -> int:
        return len(next(iter(self.adapters.values()))) if self.adapters else 0

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, group in self.adapters.items():
            for k, ad in enumerate(group):
                out += [(f"lora.{i}.{k}.A", ad.A), (f"lora.{i}.{k}.B", ad.B)]
        return out


@dataclass
class Router:
    """Shared MLP from the time embedding to ``n_layers x hub_size`` logits."""

    w1: np.ndarray  # (d, d)
    b1: np.ndarray
    w2: np.ndarray  # (n_layers * hub_size, d)
    b2: np.ndarray
    n_layers: int
    hub_size: int

    @property
    def embed_dim(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def init(cls, n_layers, hub_size, embed_dim, rng=None, zero=False):
        d = embed_dim
        if zero:
            return cls(np.zeros((d, d)), np.zeros(d), np.zeros((n_layers * hub_size, d)),
                       np.zeros(n_layers * hub_size), n_layers, hub_size)
        w1 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
        w2 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_layers * hub_size, d))
        return cls(w1, np.zeros(d), w2, np.zeros(n_layers * hub_size), n_layers, hub_size)

    def named_parameters(self):
        return [("router.w1", self.w1), ("router.b1", self.b1), ("router.w2", self.w2), ("router.b2", self.b2)]

    def logits(self, t, ops=EAGER):
        emb = time_embedding(np.atleast_1d(np.asarray(t)), self.embed_dim)
        h = ops.add(ops.matmul(emb, ops.param("router.w1", self.w1), transpose_b=True),
                    ops.param("router.b1", self.b1))
        h = ops.silu(h)
        z = ops.add(ops.matmul(h, ops.param("router.w2", self.w2), transpose_b=True),
                    ops.param("router.b2", self.b2))
        return ops.reshape(z, (-1, self.n_layers, self.hub_size))


def route(router: Router, t, tape: GradientTape | None = None):
    """Per-layer hard selection for timestep(s) ``t``.

    Returns ``(one_hot, probs)``, each shaped (len(t), n_layers, hub_size).
    Under a tape the one-hot is a node whose backward uses the softmax Jacobian.
    """
    ops = tape if tape is not None else EAGER
    logits = router.logits(t, ops)
    probs = EAGER.softmax(ops.value(logits))
    return ops.onehot_ste(logits), probs


class QuantizedDenoiser:
    """Frozen denoiser with fake-quantized weights and layer inputs.

    ``weight_params[i]`` / ``act_params[i]`` are ``None`` for pass-through.
    """

    def __init__(self, model: DenoiserModel, weight_params, act_params):
        n = len(model.layers)
        if len(weight_params) != n or len(act_params) != n:
            raise ValueError(f"need quantizer params for all {n} layers")
        self.model = model
        self.weight_params = list(weight_params)
        self.act_params = list(act_params)
        self.qweights = [
            layer.weight if p is None else fp_quantize(layer.weight, p)
            for layer, p in zip(model.layers, self.weight_params)
        ]

    @classmethod
    def passthrough(cls, model: DenoiserModel) -> "QuantizedDenoiser":
        n = len(model.layers)
        return cls(model, [None] * n, [None] * n)

    def sites(self) -> dict[str, FpQuantizerParams | None]:
        out = {}
        for i in range(len(self.model.layers)):
            out[f"layer{i}.weight"] = self.weight_params[i]
            out[f"layer{i}.act"] = self.act_params[i]
        return out


def quantized_forward(qmodel: QuantizedDenoiser, hub: LoraHub | None, router: Router | None, x, t,
                      tape: GradientTape | None = None, selection=None):
    """Noise prediction of the quantized model with routed adapters.

    ``selection`` overrides the router: an array (batch or 1, n_layers, h) of
    one-hot rows. Without either, adapter 0 is used on every layer.
    """
    ops = tape if tape is not None else EAGER
    model = qmodel.model
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[-1] != model.input_dim:
        raise ValueError(f"layer 0 expects {model.input_dim} input features, got shape {x.shape}")
    adapted = hub.adapters if hub is not None else {}
    sel = None
    if adapted:
        if selection is not None:
            sel = np.asarray(selection, dtype=np.float64)
        elif router is not None:
            sel, _ = route(router, t, tape)
        else:
            sel = np.zeros((1, len(adapted), hub.hub_size))
            sel[:, :, 0] = 1.0
        sel_shape = ops.value(sel).shape
        if sel_shape[1:] != (len(adapted), hub.hub_size):
            raise ValueError(f"selection shape {sel_shape} does not match hub {(len(adapted), hub.hub_size)}")
    terms = model.time_terms(t, ops)
    slot = {layer: j for j, layer in enumerate(adapted)}
    h = x
    for i, layer in enumerate(model.layers):
        hq = ops.fake_quant(h, qmodel.act_params[i])
        out = ops.matmul(hq, qmodel.qweights[i], transpose_b=True)
        if i in adapted:
            j = slot[i]
            for k, ad in enumerate(adapted[i]):
                pick = ops.getitem(sel, (slice(None), j, slice(k, k + 1)))
                if not isinstance(pick, Node) and not np.any(pick):
                    continue
                if ad.A.shape != (layer.out_features, ad.rank) or ad.B.shape != (ad.rank, layer.in_features):
                    raise ValueError(f"adapter {k} of layer {i} does not fit weight {layer.weight.shape}")
                A = ops.param(f"lora.{i}.{k}.A", ad.A)
                B = ops.param(f"lora.{i}.{k}.B", ad.B)
                z = ops.matmul(ops.matmul(hq, B, transpose_b=True), A, transpose_b=True)
                out = ops.add(out, ops.mul(ops.scale(z, ad.scale), pick))
        out = ops.add(out, layer.bias)
        if i < model.n_hidden:
            out = ops.add(out, terms[i])
        if layer.activation == "silu":
            out = ops.silu(out)
        h = out
    if squeeze and tape is None:
        return h[0]
    return h


def allocation_histogram(router: Router, T: int) -> np.ndarray:
    """Counts of shape (n_layers, hub_size, T): entry [l, k, t] is 1 when
    layer ``l`` uses adapter ``k`` at timestep ``t``."""
    onehot, _ = route(router, np.arange(T))
    return np.transpose(onehot, (1, 2, 0)).astype(np.int64)
