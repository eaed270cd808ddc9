"""Transformer building blocks with hand-written backward passes.

All weights use the out x in orientation, so a projection maps row inputs
``X -> X W^T``. In that layout the per-head query matrix of head ``i`` is
``wq[i*dk:(i+1)*dk].T``. Any of ``wq``, ``wk``, ``wv`` may be replaced by an
:class:`~deltalora.adapters.AdapterLinear`.

Block wiring (pre-norm residual, parameter-free layer norm)::

    H = X + Drop(MHA(LN(X)))
    Y = H + Drop(FFN(LN(H)))
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterLinear, adapter_backward, adapter_forward
from .linalg import Rng, ShapeError

LN_EPS = 1e-5


@dataclass
class MhaParams:
    wq: np.ndarray | AdapterLinear
    wk: np.ndarray | AdapterLinear
    wv: np.ndarray | AdapterLinear
    wo: np.ndarray
    heads: int
    causal: bool = False

    def __post_init__(self):
        d = self.wo.shape[0]
        if d % self.heads:
            raise ShapeError(f"model width {d} is not divisible by {self.heads} heads")
        for name in ("wq", "wk", "wv"):
            if _weight(getattr(self, name)).shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}")

    @property
    def d_k(self) -> int:
        return self.wo.shape[0] // self.heads


@dataclass
class FfnParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        d_ff, d = self.w1.shape
        if self.b1.shape != (d_ff,) or self.w2.shape != (d, d_ff) or self.b2.shape != (d,):
            raise ShapeError(
                f"ffn shapes do not chain: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )


@dataclass
class BlockParams:
    mha: MhaParams
    ffn: FfnParams
    inter_block_dropout_p: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.inter_block_dropout_p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")


def _weight(w) -> np.ndarray:
    return w.W if isinstance(w, AdapterLinear) else w


# -- generic pieces ---------------------------------------------------------


@dataclass
class _Cache:
    """Forward activations; a cache can feed exactly one backward pass."""

    values: dict = field(default_factory=dict)
    consumed: bool = False

    def take(self) -> dict:
        if self.consumed:
            raise RuntimeError("stale cache: backward already ran on this forward pass")
        self.consumed = True
        return self.values


def linear_forward(w, x: np.ndarray, rng: Rng | None = None):
    if isinstance(w, AdapterLinear):
        return adapter_forward(w, x, rng)
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight {w.shape}")
    return x @ w.T, x


def linear_backward(w, cache, g: np.ndarray, grads: dict, name: str) -> np.ndarray:
    """Accumulate parameter gradients into ``grads`` and return the input gradient."""
    if isinstance(w, AdapterLinear):
        ag = adapter_backward(cache, g)
        grads[f"{name}.lora_A"] = ag.A
        grads[f"{name}.lora_B"] = ag.B
        return ag.input
    x = cache
    grads[name] = g.reshape(-1, g.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    return g @ w


def softmax(s: np.ndarray) -> np.ndarray:
    z = s - np.max(s, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_norm(x: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    y = xc * inv
    return y, (y, inv)


def layer_norm_backward(cache, g: np.ndarray) -> np.ndarray:
    y, inv = cache
    return inv * (g - g.mean(axis=-1, keepdims=True) - y * (g * y).mean(axis=-1, keepdims=True))


def dropout(x: np.ndarray, p: float, rng: Rng | None):
    """Inverted dropout; ``rng=None`` means inference and returns ``x`` unchanged."""
    if p == 0.0 or rng is None:
        return x, None
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


# -- multi-head attention ---------------------------------------------------


def _split(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, heads, d // heads), -2, -3)


def _join(x: np.ndarray) -> np.ndarray:
    *lead, h, n, dk = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, n, h * dk)


def mha_forward(X: np.ndarray, p: MhaParams, rng: Rng | None = None):
    """Multi-head self-attention over ``X`` of shape ``(..., n, d)``."""
    if X.shape[-1] != p.wo.shape[0]:
        raise ShapeError(f"input width {X.shape[-1]} does not match attention width {p.wo.shape[0]}")
    q, cq = linear_forward(p.wq, X, rng)
    k, ck = linear_forward(p.wk, X, rng)
    v, cv = linear_forward(p.wv, X, rng)
    Q, K, V = _split(q, p.heads), _split(k, p.heads), _split(v, p.heads)
    S = Q @ np.swapaxes(K, -1, -2) / math.sqrt(p.d_k)
    if p.causal:
        n = X.shape[-2]
        S = np.where(np.tril(np.ones((n, n), dtype=bool)), S, -np.inf)
    P = softmax(S)
    O = _join(P @ V)
    out = O @ p.wo.T
    cache = _Cache(dict(X=X, cq=cq, ck=ck, cv=cv, Q=Q, K=K, V=V, P=P, O=O))
    return out, cache


def mha_backward(p: MhaParams, cache: _Cache, g_out: np.ndarray):
    """Return ``(grads, g_X)``; ``grads`` is keyed by projection name."""
    c = cache.take()
    grads: dict = {}
    O = c["O"]
    grads["wo"] = g_out.reshape(-1, g_out.shape[-1]).T @ O.reshape(-1, O.shape[-1])
    gO = _split(g_out @ p.wo, p.heads)
    P, Q, K, V = c["P"], c["Q"], c["K"], c["V"]
    gP = gO @ np.swapaxes(V, -1, -2)
    gV = np.swapaxes(P, -1, -2) @ gO
    gS = P * (gP - np.sum(gP * P, axis=-1, keepdims=True)) / math.sqrt(p.d_k)
    gQ = gS @ K
    gK = np.swapaxes(gS, -1, -2) @ Q
    gX = linear_backward(p.wq, c["cq"], _join(gQ), grads, "wq")
    gX = gX + linear_backward(p.wk, c["ck"], _join(gK), grads, "wk")
    gX = gX + linear_backward(p.wv, c["cv"], _join(gV), grads, "wv")
    return grads, gX


# -- feed-forward -----------------------------------------------------------


def ffn_forward(x: np.ndarray, p: FfnParams):
    """``W2 ReLU(W1 x + b1) + b2`` applied to the last axis of ``x``."""
    if x.shape[-1] != p.w1.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match ffn width {p.w1.shape[1]}")
    pre = x @ p.w1.T + p.b1
    act = np.maximum(pre, 0.0)
    out = act @ p.w2.T + p.b2
    return out, _Cache(dict(x=x, pre=pre, act=act))


def ffn_backward(p: FfnParams, cache: _Cache, g_out: np.ndarray):
    c = cache.take()
    d_ff, d = p.w1.shape
    g2 = g_out.reshape(-1, d)
    act = c["act"].reshape(-1, d_ff)
    grads = {"w2": g2.T @ act, "b2": g2.sum(axis=0)}
    g_pre = (g_out @ p.w2) * (c["pre"] > 0.0)
    g_pre2 = g_pre.reshape(-1, d_ff)
    grads["w1"] = g_pre2.T @ c["x"].reshape(-1, d)
    grads["b1"] = g_pre2.sum(axis=0)
    return grads, g_pre @ p.w1


# -- block ------------------------------------------------------------------


def block_forward(X: np.ndarray, p: BlockParams, rng: Rng | None = None):
    U, ln1 = layer_norm(X)
    a, ca = mha_forward(U, p.mha, rng)
    a, m1 = dropout(a, p.inter_block_dropout_p, rng)
    H = X + a
    V, ln2 = layer_norm(H)
    f, cf = ffn_forward(V, p.ffn)
    f, m2 = dropout(f, p.inter_block_dropout_p, rng)
    Y = H + f
    return Y, _Cache(dict(ln1=ln1, ca=ca, m1=m1, ln2=ln2, cf=cf, m2=m2, shape=X.shape))


def block_backward(p: BlockParams, cache: _Cache, g_out: np.ndarray):
    """Gradients for every block parameter plus the input gradient.

    Keys are ``attn.<proj>`` (adapted projections yield ``attn.<proj>.lora_A``
    and ``.lora_B`` instead of the frozen weight) and ``ffn.<name>``.
    """
    c = cache.take()
    if g_out.shape != c["shape"]:
        raise ShapeError(f"upstream gradient {g_out.shape} does not match block output {c['shape']}")
    grads = {}
    gf = g_out if c["m2"] is None else g_out * c["m2"]
    fg, gV = ffn_backward(p.ffn, c["cf"], gf)
    gH = g_out + layer_norm_backward(c["ln2"], gV)
    ga = gH if c["m1"] is None else gH * c["m1"]
    ag, gU = mha_backward(p.mha, c["ca"], ga)
    gX = gH + layer_norm_backward(c["ln1"], gU)
    grads.update({f"attn.{k}": v for k, v in ag.items()})
    grads.update({f"ffn.{k}": v for k, v in fg.items()})
    return grads, gX


# -- losses -----------------------------------------------------------------


def loss_mse(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all entries and its gradient."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def loss_xent(logits: np.ndarray, classes) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy of ``logits[..., V]`` against integer ``classes``."""
    classes = np.asarray(classes)
    if logits.shape[:-1] != classes.shape:
        raise ShapeError(f"logits {logits.shape} vs classes {classes.shape}")
    V = logits.shape[-1]
    if classes.size and (classes.min() < 0 or classes.max() >= V):
        raise IndexError(f"class index out of range for {V} classes")
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    flat = logp.reshape(-1, V)
    idx = classes.reshape(-1)
    count = idx.size
    loss = -float(flat[np.arange(count), idx].sum()) / count
    g = np.exp(logp).reshape(-1, V)
    g[np.arange(count), idx] -= 1.0
    return loss, (g / count).reshape(logits.shape)
