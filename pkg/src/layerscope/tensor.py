"""Dense float64 numerical kernel.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every layer type
used by the encoder and the probes has a forward function and a hand-written
backward function here; ``grad_check`` compares them against central
differences.
"""
from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

Tensor = np.ndarray

LN_EPS = 1e-5
PROB_FLOOR = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)


class DimensionError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor(x, shape: tuple[int, ...] | None = None) -> Tensor:
    t = np.asarray(x, dtype=np.float64)
    if shape is not None and t.shape != tuple(shape):
        raise DimensionError(f"expected shape {tuple(shape)}, got {t.shape}")
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable, truthy = keep) gives excluded entries weight
    exactly zero; every row must keep at least one entry.
    """
    x = as_tensor(x)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_backward(p: Tensor, dp: Tensor) -> Tensor:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    return layer_norm_forward(x, gain, bias, eps)[0]


def layer_norm_forward(x, gain, bias, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layer_norm_backward(dout, cache):
    """Returns (dx, dgain, dbias); parameter grads are summed over leading axes."""
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    lead = tuple(range(dout.ndim - 1))
    dgain = np.sum(dout * xhat, axis=lead)
    dbias = np.sum(dout, axis=lead)
    dxhat = dout * gain
    dx = inv / d * (
        d * dxhat
        - np.sum(dxhat, axis=-1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def gelu(x: Tensor) -> Tensor:
    return gelu_forward(x)[0]


def gelu_forward(x: Tensor):
    """tanh-approximated GELU (as in the original BERT code); returns (out, cache)."""
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t), (x, x2, t)


def gelu_backward(dout: Tensor, cache) -> Tensor:
    x, x2, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def gelu_grad(x: Tensor) -> Tensor:
    return gelu_backward(np.ones_like(x), gelu_forward(x)[1])


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None):
    """Inverted dropout. Returns (out, scale_mask); mask is None when inactive."""
    if rate <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def cross_entropy(probs, gold: int) -> float:
    p = as_tensor(probs).reshape(-1)
    if not 0 <= gold < p.shape[0]:
        raise IndexError(f"gold index {gold} out of range for {p.shape[0]} classes")
    return float(-math.log(max(p[gold], PROB_FLOOR)))


def softmax_cross_entropy(logits: Tensor, gold: np.ndarray, mask: np.ndarray | None = None):
    """Mean cross-entropy over rows of ``logits`` (..., C) and its logit gradient."""
    p = softmax_rows(logits, mask)
    flat = p.reshape(-1, p.shape[-1])
    g = np.asarray(gold).reshape(-1)
    picked = np.maximum(flat[np.arange(flat.shape[0]), g], PROB_FLOOR)
    n = flat.shape[0]
    loss = float(-np.sum(np.log(picked)) / n)
    d = flat.copy()
    d[np.arange(n), g] -= 1.0
    return loss, (d / n).reshape(p.shape), p


def grad_check(
    f: Callable[[], float],
    params: Mapping[str, Tensor] | Tensor,
    analytic: Mapping[str, Tensor] | Tensor,
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between ``analytic`` gradients and central differences.

    ``f`` evaluates the loss at the current contents of ``params``, which are
    perturbed in place and restored. With ``max_entries`` only a random subset
    of entries per tensor is checked.
    """
    if isinstance(params, np.ndarray):
        params, analytic = {"_": params}, {"_": analytic}
    worst = 0.0
    for name, p in params.items():
        g = np.asarray(analytic[name])
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or make_rng(0)).choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            ana = float(gflat[i])
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
    return worst


class Adam:
    """Adam over a dict of parameter arrays, updated in place."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: Mapping[str, Tensor], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr == 0.0:
                continue
            self.params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(grads: Mapping[str, Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total
