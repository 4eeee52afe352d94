"""Small fully-connected networks with hand-written backpropagation.

A network is a list of affine layers, each followed by an elementwise
activation.  ``forward`` returns the output together with a cache holding
every layer input and pre-activation; ``backward`` consumes that cache and
returns parameter gradients in the same order as ``Mlp.params()``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .numerics import DTYPE, ShapeError, as_matrix


def elu(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def softplus(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _linear(x):
    return np.asarray(x, dtype=DTYPE)


def _linear_grad(x):
    return np.ones_like(np.asarray(x, dtype=DTYPE))


def _sigmoid_grad(x):
    s = expit(x)
    return s * (1.0 - s)


# name -> (activation, derivative w.r.t. the pre-activation)
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "elu": (elu, elu_grad),
    "linear": (_linear, _linear_grad),
    "sigmoid": (expit, _sigmoid_grad),
    "softplus": (softplus, expit),
}


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str = "elu"


@dataclass
class Cache:
    net_id: int
    version: int
    inputs: list
    pres: list


@dataclass
class Mlp:
    """Parameters of a feed-forward network (a.k.a. ``MlpParams``)."""

    layers: list[Layer]
    version: int = field(default=0, compare=False)

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        activations: Sequence[str],
        rng: np.random.Generator,
        zero_last: bool = False,
    ) -> "Mlp":
        """Gaussian init with std sqrt(1/fan_in), zero biases.

        ``sizes`` lists every width including input and output, so a net with
        ``k`` layers needs ``k + 1`` sizes and ``k`` activations.
        """
        if len(sizes) != len(activations) + 1:
            raise ValueError("need exactly one activation per layer")
        layers = []
        for i, act in enumerate(activations):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            fan_in, fan_out = int(sizes[i]), int(sizes[i + 1])
            last = i == len(activations) - 1
            if zero_last and last:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in)
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def weight_matrices(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.layers]

    def zeros_like(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.params()]

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)

    def forward(self, x):
        return forward(self, x)

    def backward(self, cache, output_grad):
        return backward(self, cache, output_grad)

    def to_dict(self) -> dict:
        doc = {}
        for i, layer in enumerate(self.layers):
            for name, arr in (("weight", layer.weight), ("bias", layer.bias)):
                doc[f"layer{i}.{name}"] = {
                    "shape": list(arr.shape),
                    "values": [float(v) for v in arr.ravel()],
                }
            doc[f"layer{i}.activation"] = layer.activation
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "Mlp":
        layers = []
        i = 0
        while f"layer{i}.weight" in doc:
            arrs = []
            for name in ("weight", "bias"):
                entry = doc[f"layer{i}.{name}"]
                arrs.append(np.asarray(entry["values"], dtype=DTYPE).reshape(entry["shape"]))
            layers.append(Layer(arrs[0], arrs[1], doc[f"layer{i}.activation"]))
            i += 1
        if not layers:
            raise ValueError("document holds no layers")
        return cls(layers)


MlpParams = Mlp


def forward(net: Mlp, x) -> tuple[np.ndarray, Cache]:
    a = as_matrix(x, "x")
    if a.shape[1] != net.in_dim:
        raise ShapeError(f"input has {a.shape[1]} columns, network expects {net.in_dim}")
    inputs, pres = [], []
    for layer in net.layers:
        inputs.append(a)
        pre = a @ layer.weight + layer.bias
        pres.append(pre)
        a = ACTIVATIONS[layer.activation][0](pre)
    return a, Cache(id(net), net.version, inputs, pres)


def backward(net: Mlp, cache: Cache, output_grad) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse-mode pass; returns (param grads in ``params()`` order, input grad)."""
    if cache.net_id != id(net) or cache.version != net.version or len(cache.pres) != len(net.layers):
        raise ValueError("cache does not belong to this network state; rerun forward")
    g = as_matrix(output_grad, "output_grad")
    if g.shape != cache.pres[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {cache.pres[-1].shape}")
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        g = g * ACTIVATIONS[layer.activation][1](cache.pres[i])
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(0)
        g = g @ layer.weight.T
    return grads, g


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list | None = None
    v: list | None = None


def _flat_params(nets) -> list[np.ndarray]:
    out = []
    for item in nets:
        if isinstance(item, Mlp):
            out.extend(item.params())
        else:
            out.append(item)
    return out


def adam_step(state: AdamState, nets, grads: Sequence[np.ndarray]) -> AdamState:
    """In-place ADAM update of ``nets``.

    ``nets`` is an Mlp or a sequence of Mlps and bare float arrays; ``grads``
    concatenates each item's ``params()``-ordered gradients.
    """
    if isinstance(nets, Mlp):
        nets = [nets]
    params = _flat_params(nets)
    if len(params) != len(grads):
        raise ShapeError(f"got {len(grads)} gradients for {len(params)} parameter arrays")
    for k, (p, g) in enumerate(zip(params, grads)):
        if p.shape != np.shape(g):
            raise ShapeError(f"gradient {k} has shape {np.shape(g)}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter array {k} (layer {k // 2})")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    for net in nets:
        if isinstance(net, Mlp):
            net.version += 1
    return state


def grad_check(function, params: Sequence[np.ndarray], step: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``function()`` must evaluate the current contents of ``params`` and
    return ``(value, grads)`` with ``grads`` aligned to ``params``.  Arrays
    are perturbed in place and restored.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    _, analytic = function()
    analytic = [np.array(g, dtype=DTYPE, copy=True) for g in analytic]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.reshape(-1)
        ga = np.reshape(ga, -1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = function()[0]
            flat[k] = orig - step
            fm = function()[0]
            flat[k] = orig
            num = (fp - fm) / (2.0 * step)
            err = abs(ga[k] - num) / max(abs(ga[k]), abs(num), floor)
            worst = max(worst, err)
    return worst
