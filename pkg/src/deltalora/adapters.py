"""Low-rank adapter layer: forward, exact backward, merge, and delta helpers.

Weights use the ``h = W x`` orientation: ``W`` is ``c x d`` (out x in),
``A`` is ``c x r`` and ``B`` is ``r x d``. Inputs are row batches of shape
``(..., d)`` so a layer maps ``X -> X W^T + (alpha/r) X B^T A^T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import Matrix, Rng, ShapeError, kaiming_uniform, matmul


@dataclass
class AdapterLinear:
    W: Matrix
    A: Matrix
    B: Matrix
    alpha: float
    lowrank_dropout_p: float = 0.0

    def __post_init__(self):
        c, d = self.W.shape
        r = self.A.shape[1]
        if self.A.shape[0] != c or self.B.shape != (r, d):
            raise ShapeError(
                f"adapter shapes inconsistent: W {self.W.shape}, A {self.A.shape}, B {self.B.shape}"
            )
        if r > min(c, d):
            raise ShapeError(f"rank {r} exceeds min({c}, {d})")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 <= self.lowrank_dropout_p < 1.0:
            raise ValueError("lowrank_dropout_p must lie in [0, 1)")

    @classmethod
    def wrap(cls, W: Matrix, r: int, alpha: float, rng: Rng, lowrank_dropout_p: float = 0.0):
        """Attach a fresh adapter to ``W``: A is Kaiming-uniform, B is zero."""
        c, d = W.shape
        if r < 1:
            raise ShapeError("rank must be positive")
        A = kaiming_uniform(c, r, rng)
        B = np.zeros((r, d))
        return cls(W, A, B, alpha, lowrank_dropout_p)

    @property
    def r(self) -> int:
        return self.A.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.r


@dataclass
class AdapterCache:
    layer: AdapterLinear
    x: np.ndarray
    branch_x: np.ndarray
    bx: np.ndarray
    mask: np.ndarray | None = None
    consumed: bool = False


@dataclass
class AdapterGrads:
    A: Matrix
    B: Matrix
    input: np.ndarray
    W_virtual: Matrix | None = None
    AB_virtual: Matrix | None = None


@dataclass
class DeltaSnapshot:
    A_prev: Matrix
    B_prev: Matrix

    @classmethod
    def take(cls, layer: AdapterLinear) -> "DeltaSnapshot":
        return cls(layer.A.copy(), layer.B.copy())


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def adapter_forward(layer: AdapterLinear, x: np.ndarray, rng: Rng | None = None):
    """Return ``(h, cache)`` with ``h = W x + (alpha/r) A B x`` applied row-wise.

    With ``lowrank_dropout_p > 0`` the low-rank branch consumes an inverted-
    dropout copy of ``x``; the base path always sees ``x``. Passing no ``rng``
    selects inference mode, in which dropout is skipped.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.W.shape[1]:
        raise ShapeError(f"input width {x.shape[-1]} does not match layer {layer.W.shape}")
    p = layer.lowrank_dropout_p
    if p > 0.0 and rng is not None:
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
        branch_x = x * mask
    else:
        mask = None
        branch_x = x
    bx = branch_x @ layer.B.T
    h = x @ layer.W.T + layer.scale * (bx @ layer.A.T)
    return h, AdapterCache(layer, x, branch_x, bx, mask)


def adapter_backward(cache: AdapterCache, g_out: np.ndarray, virtual: bool = False) -> AdapterGrads:
    """Exact gradients of the loss w.r.t. A, B and the input.

    ``virtual=True`` additionally returns the gradient w.r.t. W and the
    gradient w.r.t. the adapter's weight update ``(alpha/r) A B`` treated as
    a free ``c x d`` matrix. Neither is used for
    training; they exist to check that the two coincide when the branch
    sees the undropped input.
    """
    if cache.consumed:
        raise RuntimeError("adapter cache already consumed by a backward pass")
    layer = cache.layer
    if g_out.shape[:-1] != cache.x.shape[:-1] or g_out.shape[-1] != layer.W.shape[0]:
        raise ShapeError(f"upstream gradient {g_out.shape} does not match forward output")
    cache.consumed = True
    s = layer.scale
    G = _flat(g_out)
    X = _flat(cache.x)
    Xb = _flat(cache.branch_x)
    BX = _flat(cache.bx)

    # h = X W^T + s * (Xb B^T) A^T
    gA = s * (G.T @ BX)
    g_bx = s * (G @ layer.A)
    gB = g_bx.T @ Xb
    g_branch = g_bx @ layer.B
    if cache.mask is not None:
        g_branch = g_branch * _flat(cache.mask)
    g_in = G @ layer.W + g_branch
    grads = AdapterGrads(gA, gB, g_in.reshape(cache.x.shape))
    if virtual:
        grads.W_virtual = G.T @ X
        grads.AB_virtual = G.T @ Xb
    return grads


def delta_product(snap: DeltaSnapshot, A_new: Matrix, B_new: Matrix) -> Matrix:
    """``A_new B_new - A_prev B_prev`` by two products and a subtraction."""
    if A_new.shape != snap.A_prev.shape or B_new.shape != snap.B_prev.shape:
        raise ShapeError(
            f"snapshot shapes {snap.A_prev.shape}, {snap.B_prev.shape} "
            f"vs new {A_new.shape}, {B_new.shape}"
        )
    return matmul(A_new, B_new) - matmul(snap.A_prev, snap.B_prev)


def delta_expansion(A: Matrix, B: Matrix, gA_hat: Matrix, gB_hat: Matrix, eta: float, beta: float) -> Matrix:
    """Term-by-term expansion of the product change after one decoupled-decay step.

    Evaluates the eight terms of
    ``(A - eta gA - eta beta A)(B - eta gB - eta beta B) - A B``.
    """
    if gA_hat.shape != A.shape or gB_hat.shape != B.shape or A.shape[1] != B.shape[0]:
        raise ShapeError(
            f"inconsistent shapes A {A.shape}, B {B.shape}, gA {gA_hat.shape}, gB {gB_hat.shape}"
        )
    AB = A @ B
    A_gB = A @ gB_hat
    gA_B = gA_hat @ B
    gA_gB = gA_hat @ gB_hat
    eta2 = eta * eta
    return (
        -eta * A_gB
        - eta * beta * AB
        - eta * gA_B
        + eta2 * gA_gB
        + eta2 * beta * gA_B
        - eta * beta * AB
        + eta2 * beta * A_gB
        + eta2 * beta * beta * AB
    )


def merge(layer: AdapterLinear) -> Matrix:
    """Fold the adapter into a single weight ``W + (alpha/r) A B``."""
    return layer.W + layer.scale * (layer.A @ layer.B)


__all__ = [
    "AdapterLinear",
    "AdapterCache",
    "AdapterGrads",
    "DeltaSnapshot",
    "adapter_forward",
    "adapter_backward",
    "delta_product",
    "delta_expansion",
    "merge",
]

