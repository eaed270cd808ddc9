"""Randomized property checks behind the ``verify`` command.

Every check returns a :class:`PropertyResult` carrying the worst deviation seen
and the seed that produced it. Comparisons are strict (``deviation < tol``),
so a tolerance of zero fails every floating-point property.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapters import (
    AdapterLinear,
    DeltaSnapshot,
    adapter_backward,
    adapter_forward,
    delta_expansion,
    delta_product,
    merge,
)
from .linalg import make_rng
from .model import ModelConfig
from .nn import (
    BlockParams,
    FfnParams,
    MhaParams,
    block_backward,
    block_forward,
    ffn_backward,
    ffn_forward,
    loss_mse,
    loss_xent,
    mha_backward,
    mha_forward,
)
from .optim import AdamWState, TrainConfig, adamw_step
from .tasks import gen_teacher_student
from .trainer import train

DEFAULT_TOLERANCES = {
    "gradient_identity": 1e-12,
    "delta_expansion": 1e-12,
    "merge_equivalence": 1e-12,
    "adamw_oracle": 1e-12,
    "finite_difference": 1e-5,
    "telescoping": 1e-10,
}

FD_STEP = 1e-5


@dataclass
class PropertyResult:
    name: str
    passed: bool
    max_dev: float
    tol: float
    seed: int | None
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" seed={self.seed}" if self.seed is not None else ""
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: max_dev={self.max_dev:.3e} tol={self.tol:.1e}{where}{extra}"


class _Worst:
    """Tracks the largest deviation and the seed that produced it."""

    def __init__(self):
        self.dev = 0.0
        self.seed = None

    def update(self, dev: float, seed: int) -> None:
        if self.seed is None or dev > self.dev or math.isnan(dev):
            self.dev, self.seed = dev, seed


# -- finite differences -----------------------------------------------------


def numeric_grad(f, arr: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` in Frobenius norm; 0 when both are below 1e-10."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-10:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def _rand_mha(rng, adapters: bool = False):
    heads = int(rng.integers(1, 4))
    d = heads * int(rng.integers(1, 4))
    ws = [rng.normal(0, 1 / math.sqrt(d), size=(d, d)) for _ in range(4)]
    p = MhaParams(ws[0], ws[1], ws[2], ws[3], heads, bool(rng.integers(0, 2)))
    if adapters:
        r = int(rng.integers(1, d + 1))
        for proj in ("wq", "wv"):
            w = getattr(p, proj)
            layer = AdapterLinear(w, rng.normal(size=(d, r)), rng.normal(size=(r, d)) * 0.5, float(rng.uniform(0.5, 4)))
            setattr(p, proj, layer)
    return p, d


def _rand_ffn(rng, d):
    f = int(rng.integers(1, 9))
    return FfnParams(rng.normal(size=(f, d)) / math.sqrt(d), rng.normal(size=f),
                     rng.normal(size=(d, f)) / math.sqrt(f), rng.normal(size=d))


def _tensor_list(obj):
    out = []
    for name in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"):
        w = getattr(obj, name, None)
        if w is None:
            continue
        if isinstance(w, AdapterLinear):
            out += [(f"{name}.lora_A", w.A), (f"{name}.lora_B", w.B)]
        else:
            out.append((name, w))
    return out


def fd_mha(seed: int) -> float:
    rng = make_rng(seed)
    p, d = _rand_mha(rng, adapters=bool(seed % 2))
    n = int(rng.integers(1, 5))
    X = rng.normal(size=(int(rng.integers(1, 3)), n, d))
    R = rng.normal(size=X.shape)

    def f():
        return float(np.sum(mha_forward(X, p)[0] * R))

    out, cache = mha_forward(X, p)
    grads, gX = mha_backward(p, cache, R)
    worst = rel_error(gX, numeric_grad(f, X))
    for name, arr in _tensor_list(p):
        worst = max(worst, rel_error(grads[name], numeric_grad(f, arr)))
    return worst


def fd_ffn(seed: int) -> float:
    rng = make_rng(seed)
    d = int(rng.integers(1, 7))
    p = _rand_ffn(rng, d)
    x = rng.normal(size=(int(rng.integers(1, 4)), d))
    R = rng.normal(size=x.shape)

    def f():
        return float(np.sum(ffn_forward(x, p)[0] * R))

    _, cache = ffn_forward(x, p)
    grads, gx = ffn_backward(p, cache, R)
    worst = rel_error(gx, numeric_grad(f, x))
    for name, arr in _tensor_list(p):
        worst = max(worst, rel_error(grads[name], numeric_grad(f, arr)))
    return worst


def fd_block(seed: int) -> float:
    rng = make_rng(seed)
    mha, d = _rand_mha(rng, adapters=bool(seed % 2))
    blk = BlockParams(mha, _rand_ffn(rng, d))
    X = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 5)), d))
    R = rng.normal(size=X.shape)

    def f():
        return float(np.sum(block_forward(X, blk)[0] * R))

    _, cache = block_forward(X, blk)
    grads, gX = block_backward(blk, cache, R)
    worst = rel_error(gX, numeric_grad(f, X))
    for name, arr in _tensor_list(mha):
        worst = max(worst, rel_error(grads[f"attn.{name}"], numeric_grad(f, arr)))
    for name, arr in _tensor_list(blk.ffn):
        worst = max(worst, rel_error(grads[f"ffn.{name}"], numeric_grad(f, arr)))
    return worst


def _rand_adapter(rng, max_dim: int = 8):
    c = int(rng.integers(1, max_dim + 1))
    d = int(rng.integers(1, max_dim + 1))
    r = int(rng.integers(1, min(c, d) + 1))
    return AdapterLinear(rng.normal(size=(c, d)), rng.normal(size=(c, r)), rng.normal(size=(r, d)),
                         float(rng.uniform(0.5, 8.0)))


def fd_adapter(seed: int) -> float:
    rng = make_rng(seed)
    layer = _rand_adapter(rng)
    x = rng.normal(size=(int(rng.integers(1, 5)), layer.W.shape[1]))
    R = rng.normal(size=(x.shape[0], layer.W.shape[0]))

    def f():
        return float(np.sum(adapter_forward(layer, x)[0] * R))

    _, cache = adapter_forward(layer, x)
    g = adapter_backward(cache, R)
    return max(
        rel_error(g.A, numeric_grad(f, layer.A)),
        rel_error(g.B, numeric_grad(f, layer.B)),
        rel_error(g.input, numeric_grad(f, x)),
    )


def fd_losses(seed: int) -> float:
    rng = make_rng(seed)
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    pred = rng.normal(size=shape)
    target = rng.normal(size=shape)
    _, g = loss_mse(pred, target)
    worst = rel_error(g, numeric_grad(lambda: loss_mse(pred, target)[0], pred))
    logits = rng.normal(size=shape) * 2
    classes = rng.integers(0, shape[1], size=shape[0])
    _, g = loss_xent(logits, classes)
    return max(worst, rel_error(g, numeric_grad(lambda: loss_xent(logits, classes)[0], logits)))


FD_CHECKS = {"mha": fd_mha, "ffn": fd_ffn, "block": fd_block, "adapter": fd_adapter, "losses": fd_losses}


def check_finite_differences(seeds, tol: float) -> PropertyResult:
    worst = _Worst()
    worst_path = ""
    for name, fn in FD_CHECKS.items():
        for s in seeds:
            dev = fn(s)
            if worst.seed is None or dev > worst.dev:
                worst_path = name
            worst.update(dev, s)
    return PropertyResult("finite_difference", worst.dev < tol, worst.dev, tol, worst.seed,
                          f"{len(FD_CHECKS)} paths x {len(seeds)} configs, worst path {worst_path}")


# -- adapter identities -----------------------------------------------------


def identity_deviation(seed: int, dropout_p: float = 0.0) -> tuple[float, float]:
    """Max-abs and Frobenius distance between the W-gradient and the AB-gradient."""
    rng = make_rng(seed)
    layer = _rand_adapter(rng, 16)
    r = min(layer.r, 4)
    layer = AdapterLinear(layer.W, layer.A[:, :r].copy(), layer.B[:r].copy(), layer.alpha, dropout_p)
    x = rng.normal(size=(int(rng.integers(1, 6)), layer.W.shape[1]))
    g_out = rng.normal(size=(x.shape[0], layer.W.shape[0]))
    _, cache = adapter_forward(layer, x, rng)
    g = adapter_backward(cache, g_out, virtual=True)
    diff = g.W_virtual - g.AB_virtual
    return float(np.max(np.abs(diff))), float(np.linalg.norm(diff))


def check_gradient_identity(seeds, tol: float, inject_dropout: float = 0.0) -> PropertyResult:
    worst = _Worst()
    for s in seeds:
        worst.update(identity_deviation(s, inject_dropout)[0], s)
    detail = f"{len(seeds)} layers" + (f", injected low-rank dropout p={inject_dropout}" if inject_dropout else "")
    return PropertyResult("gradient_identity", worst.dev < tol, worst.dev, tol, worst.seed, detail)


def check_dropout_counterexample(seeds, p: float = 0.5, threshold: float = 1e-6, min_frac: float = 0.99) -> PropertyResult:
    hits = 0
    smallest, where = math.inf, None
    for s in seeds:
        dev = identity_deviation(s, p)[1]
        hits += dev > threshold
        if dev < smallest:
            smallest, where = dev, s
    need = math.ceil(min_frac * len(seeds))
    return PropertyResult("dropout_counterexample", hits >= need, smallest, threshold, where,
                          f"{hits}/{len(seeds)} seeds break the identity, need {need}; max_dev shows the smallest break")


def expansion_deviation(seed: int) -> float:
    """Product change after a real AdamW step vs the term-by-term expansion."""
    rng = make_rng(seed)
    c, d = (int(v) for v in rng.integers(2, 17, size=2))
    r = int(rng.integers(1, min(c, d, 4) + 1))
    A = rng.normal(size=(c, r))
    B = rng.normal(size=(r, d))
    eta = (1e-4, 1e-1)[seed % 2]
    beta = 0.0 if seed % 3 == 0 else float(rng.uniform(0.0, 0.1))
    sA, sB = AdamWState.for_param(A), AdamWState.for_param(B)
    # warm the moments so the step is not the trivial first one
    for _ in range(int(rng.integers(0, 4))):
        adamw_step(A, rng.normal(size=A.shape), sA, eta, beta)
        adamw_step(B, rng.normal(size=B.shape), sB, eta, beta)
    snap = DeltaSnapshot(A.copy(), B.copy())
    A_new, gA = adamw_step(A, rng.normal(size=A.shape), sA, eta, beta)
    B_new, gB = adamw_step(B, rng.normal(size=B.shape), sB, eta, beta)
    return float(np.max(np.abs(delta_product(snap, A_new, B_new) - delta_expansion(A, B, gA, gB, eta, beta))))


def check_delta_expansion(seeds, tol: float) -> PropertyResult:
    worst = _Worst()
    for s in seeds:
        worst.update(expansion_deviation(s), s)
    return PropertyResult("delta_expansion", worst.dev < tol, worst.dev, tol, worst.seed,
                          f"{len(seeds)} instances, eta in {{1e-4, 1e-1}}, beta=0 on every third")


def merge_deviation(layer: AdapterLinear, rng, n_inputs: int = 100) -> float:
    merged = merge(layer)
    off = AdapterLinear(layer.W, layer.A, layer.B, layer.alpha)
    worst = 0.0
    for _ in range(n_inputs):
        x = rng.normal(size=layer.W.shape[1])
        worst = max(worst, float(np.max(np.abs(adapter_forward(off, x)[0] - merged @ x))))
    return worst


# -- training-level properties ----------------------------------------------

VERIFY_MODEL = ModelConfig(d_model=8, heads=2, d_ff=16, layers=1, seq_len=4)


def small_task(seed: int, model_cfg: ModelConfig = VERIFY_MODEL):
    return gen_teacher_student(seed, model_cfg, n_train=64, n_eval=32, perturb_rank=4, perturb_scale=0.5)


def small_config(seed: int, **kw) -> TrainConfig:
    base = dict(eta=1e-2, T=60, mode="delta_lora", K=10, lam=2.0, r=2, alpha=4.0, beta=0.01, seed=seed, batch_size=8)
    base.update(kw)
    return TrainConfig(**base)


def state_bytes(result) -> bytes:
    st = result.state
    parts = []
    for name, arr in sorted(st.model.tensors().items()):
        parts += [name.encode(), arr.tobytes()]
    for name, s in sorted(st.opt.items()):
        parts += [name.encode(), s.m.tobytes(), s.v.tobytes(), str(s.t).encode()]
    return b"|".join(parts)


def check_mode_degeneration(seeds, T: int = 60) -> PropertyResult:
    failures = []
    for s in seeds:
        task = small_task(s)
        ref = state_bytes(train(task, small_config(s, T=T, mode="lora")))
        zero_lam = state_bytes(train(task, small_config(s, T=T, lam=0.0)))
        late = state_bytes(train(task, small_config(s, T=T, K=T)))
        if ref != zero_lam or ref != late:
            failures.append(s)
    # bitwise comparison; max_dev counts failing seeds
    return PropertyResult("mode_degeneration", not failures, float(len(failures)), 0.0,
                          failures[0] if failures else None, f"{len(seeds)} runs x (lambda=0, K>=T) vs lora, T={T}")


def telescoping_error(task, cfg: TrainConfig) -> float:
    """Relative Frobenius gap between accumulated W drift and the telescoped product difference."""
    fire = {}

    def grab(t, state, loss):
        if t == cfg.K:
            fire.update({n: (a.A.copy(), a.B.copy()) for n, a in state.model.adapters().items()})

    res = train(task, cfg, callback=grab)
    pre = task.pretrained.tensors()
    worst = 0.0
    for name, ad in res.state.model.adapters().items():
        A0, B0 = fire[name]
        drift = ad.W - pre[name]
        pred = cfg.delta_factor * (ad.A @ ad.B - A0 @ B0)
        worst = max(worst, float(np.linalg.norm(drift - pred) / np.linalg.norm(pred)))
    return worst


def check_telescoping(seeds, tol: float) -> PropertyResult:
    worst = _Worst()
    for s in seeds:
        worst.update(telescoping_error(small_task(s), small_config(s)), s)
    return PropertyResult("telescoping", worst.dev < tol, worst.dev, tol, worst.seed, f"{len(seeds)} runs")


def check_merge_equivalence(seeds, tol: float) -> PropertyResult:
    worst = _Worst()
    for s in seeds:
        res = train(small_task(s), small_config(s))
        rng = make_rng(s, 7)
        for layer in res.state.model.adapters().values():
            worst.update(merge_deviation(layer, rng), s)
    return PropertyResult("merge_equivalence", worst.dev < tol, worst.dev, tol, worst.seed,
                          f"{len(seeds)} trained models, 100 inputs per adapter")


def scalar_adamw(param: list[float], grads: list[list[float]], eta: float, beta: float,
                 b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> list[float]:
    """Plain-Python AdamW over a flat parameter list, one entry at a time."""
    p = list(param)
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            p[i] = p[i] - eta * (mh / (math.sqrt(vh) + eps)) - eta * beta * p[i]
    return p


def adamw_deviation(seed: int, steps: int = 100) -> float:
    rng = make_rng(seed)
    shape = tuple(int(v) for v in rng.integers(1, 6, size=2))
    param = rng.normal(size=shape)
    grads = [rng.normal(size=shape) * rng.uniform(0.01, 10) for _ in range(steps)]
    eta = float(rng.choice([1e-4, 1e-3, 1e-1]))
    beta = float(rng.choice([0.0, 0.01, 0.1]))
    ref = scalar_adamw(param.ravel().tolist(), [g.ravel().tolist() for g in grads], eta, beta)
    state = AdamWState.for_param(param)
    p = param
    for g in grads:
        p, _ = adamw_step(p, g, state, eta, beta)
    return float(np.max(np.abs(p.ravel() - np.array(ref))))


def check_adamw_oracle(seeds, tol: float) -> PropertyResult:
    worst = _Worst()
    for s in seeds:
        worst.update(adamw_deviation(s), s)
    return PropertyResult("adamw_oracle", worst.dev < tol, worst.dev, tol, worst.seed,
                          f"{len(seeds)} trajectories x 100 steps")


def run_all(base_seed: int = 0, tolerances: dict | None = None, inject_dropout: float = 0.0,
            quick: bool = False) -> list[PropertyResult]:
    tol = dict(DEFAULT_TOLERANCES)
    tol.update(tolerances or {})
    n = 20 if quick else 100

    def seeds(k):
        return list(range(base_seed, base_seed + k))

    return [
        check_gradient_identity(seeds(n), tol["gradient_identity"], inject_dropout),
        check_dropout_counterexample(seeds(100)),
        check_delta_expansion(seeds(50), tol["delta_expansion"]),
        check_merge_equivalence(seeds(3), tol["merge_equivalence"]),
        check_mode_degeneration(seeds(3)),
        check_adamw_oracle(seeds(10 if quick else 20), tol["adamw_oracle"]),
        check_finite_differences(seeds(20), tol["finite_difference"]),
        check_telescoping(seeds(3), tol["telescoping"]),
    ]
