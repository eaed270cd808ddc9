"""Training loops: Delta-LoRA, LoRA, full fine-tuning and query/value fine-tuning.

Every loop samples batch ``t`` as a pure function of ``(cfg.seed, t)`` and
steps parameters in sorted-name order, so runs are bit-reproducible.

In ``delta_lora`` mode the frozen base weight ``W`` of each adapter is moved
only by ``W += lam * (alpha/r) * (A_new B_new - A_old B_old)``, and only on
iterations with index ``t > K`` (the first update fires at ``t = K + 1``).
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .adapters import DeltaSnapshot, delta_product
from .linalg import flat_cosine, make_rng
from .model import TinyTransformer
from .optim import AdamWState, NonFiniteError, TrainConfig, adamw_step, lr_at

log = logging.getLogger(__name__)

_ADAPTER_STREAM = 202
_DROPOUT_STREAM = 303


@dataclass
class TrainState:
    model: TinyTransformer
    opt: dict[str, AdamWState]
    t: int = 0


@dataclass
class RunResult:
    loss_trace: list[tuple[int, float]]
    lr_trace: list[tuple[int, float]]
    eval_trace: list[tuple[int, float]]
    final_params: dict[str, np.ndarray]
    per_layer_cosine: list[tuple[str, float]]
    config_echo: dict
    seed: int
    wall_time: float
    state: TrainState = field(repr=False, default=None)

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1][1] if self.loss_trace else math.nan

    @property
    def final_eval(self) -> float:
        return self.eval_trace[-1][1] if self.eval_trace else math.nan


def trainable_names(model: TinyTransformer, mode: str) -> list[str]:
    names = sorted(model.tensors())
    if mode == "full_ft":
        return names
    if mode == "ft_qv":
        return [n for n in names if n.endswith((".attn.wq", ".attn.wv"))]
    return [n for n in names if n.endswith((".lora_A", ".lora_B"))]


def init_state(task, cfg: TrainConfig) -> TrainState:
    model = task.pretrained.copy()
    if cfg.mode in ("lora", "delta_lora"):
        model.add_adapters(cfg.r, cfg.alpha, make_rng(cfg.seed, _ADAPTER_STREAM), cfg.lowrank_dropout)
    tensors = model.tensors()
    opt = {
        n: AdamWState.for_param(tensors[n], cfg.beta1, cfg.beta2, cfg.eps)
        for n in trainable_names(model, cfg.mode)
    }
    return TrainState(model, opt, 0)


def _clip(grads: dict, names, max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(grads[n] * grads[n])) for n in names))
    if total > max_norm:
        factor = max_norm / total
        for n in names:
            grads[n] = grads[n] * factor


def _forward_backward(model: TinyTransformer, batch, loss_fn, cfg: TrainConfig, t: int):
    inputs, targets = batch
    rng = None
    if cfg.lowrank_dropout > 0 or model.cfg.dropout > 0:
        rng = make_rng(cfg.seed, _DROPOUT_STREAM, t)
    out, cache = model.forward(inputs, rng)
    loss, g = loss_fn(out, targets)
    if not math.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss} at step {t}")
    return loss, model.backward(cache, g)


def _adamw_update(model, grads, states, lr, cfg) -> dict[str, np.ndarray]:
    names = sorted(states)
    if cfg.clip_norm is not None:
        _clip(grads, names, cfg.clip_norm)
    tensors = model.tensors()
    g_hats = {}
    for n in names:
        new, g_hats[n] = adamw_step(tensors[n], grads[n], states[n], lr, cfg.beta)
        tensors[n][...] = new
    return g_hats


def apply_delta_lora_update(model: TinyTransformer, grads: dict, cfg: TrainConfig, t: int,
                            states: dict[str, AdamWState]) -> dict[str, np.ndarray]:
    """Optimizer half of one Delta-LoRA iteration, given the adapter gradients.

    Snapshots every (A, B), steps them with AdamW, then (if ``t > K``)
    propagates the change of the product into W. Returns the normalized
    gradients keyed by tensor name.
    """
    adapters = model.adapters()
    snaps = {name: DeltaSnapshot.take(ad) for name, ad in adapters.items()}
    g_hats = _adamw_update(model, grads, states, lr_at(cfg, t), cfg)
    factor = cfg.delta_factor
    if t > cfg.K and factor != 0.0:
        for name, ad in adapters.items():
            ad.W += factor * delta_product(snaps[name], ad.A, ad.B)
    return g_hats


def delta_lora_iteration(model: TinyTransformer, batch, loss_fn, cfg: TrainConfig, t: int,
                         states: dict[str, AdamWState]) -> float:
    loss, grads = _forward_backward(model, batch, loss_fn, cfg, t)
    apply_delta_lora_update(model, grads, cfg, t, states)
    return loss


def baseline_iteration(model: TinyTransformer, batch, loss_fn, cfg: TrainConfig, t: int,
                       states: dict[str, AdamWState]) -> float:
    """One AdamW step on whichever tensors ``states`` covers (lora, ft_qv, full_ft)."""
    loss, grads = _forward_backward(model, batch, loss_fn, cfg, t)
    _adamw_update(model, grads, states, lr_at(cfg, t), cfg)
    return loss


def layer_cosines(model: TinyTransformer, pretrained: TinyTransformer) -> list[tuple[str, float]]:
    after = model.target_weights()
    before = pretrained.target_weights()
    if sorted(after) != sorted(before):
        raise ValueError("models expose different adapted layers")
    return [(name, flat_cosine(after[name], before[name])) for name in sorted(after)]


def train(task, cfg: TrainConfig, state: TrainState | None = None, stop_at: int | None = None,
          callback=None, config_echo: dict | None = None) -> RunResult:
    """Run iterations ``state.t .. min(stop_at, T) - 1`` of the configured mode.

    ``callback(t, state, loss)`` runs after each iteration. Passing a state
    loaded from a checkpoint continues that run bit-exactly.
    """
    start = time.perf_counter()
    if state is None:
        state = init_state(task, cfg)
    end = cfg.T if stop_at is None else min(stop_at, cfg.T)
    step_fn = delta_lora_iteration if cfg.mode == "delta_lora" else baseline_iteration
    loss_trace, lr_trace, eval_trace = [], [], []
    for t in range(state.t, end):
        batch = task.batch(cfg.seed, t, cfg.batch_size)
        loss = step_fn(state.model, batch, task.loss, cfg, t, state.opt)
        state.t = t + 1
        loss_trace.append((t, loss))
        lr_trace.append((t, lr_at(cfg, t)))
        if cfg.eval_every and state.t % cfg.eval_every == 0 and state.t < end:
            eval_trace.append((state.t, task.evaluate(state.model)))
        if callback is not None:
            callback(t, state, loss)
    eval_trace.append((state.t, task.evaluate(state.model)))
    log.debug("mode=%s steps=%d final_eval=%.6g", cfg.mode, end, eval_trace[-1][1])
    return RunResult(
        loss_trace=loss_trace,
        lr_trace=lr_trace,
        eval_trace=eval_trace,
        final_params={k: v.copy() for k, v in state.model.tensors().items()},
        per_layer_cosine=layer_cosines(state.model, task.pretrained),
        config_echo=dict(config_echo) if config_echo is not None else cfg.to_dict(),
        seed=cfg.seed,
        wall_time=time.perf_counter() - start,
        state=state,
    )


SWEEPABLE = {"lambda": "lam", "K": "K"}


def sweep(task, cfg: TrainConfig, param: str, values, workers: int = 1) -> list[RunResult]:
    """One run per value of ``lambda`` or ``K``, same seed, results in input order."""
    if param not in SWEEPABLE:
        raise ValueError(f"can only sweep {sorted(SWEEPABLE)}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    attr = SWEEPABLE[param]
    cast = int if attr == "K" else float
    cfgs = [replace(cfg, **{attr: cast(v)}) for v in values]
    if workers <= 1:
        return [train(task, c) for c in cfgs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda c: train(task, c), cfgs))
