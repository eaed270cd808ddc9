"""AdamW written out explicitly so the normalized gradient is observable."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .linalg import Matrix, ShapeError


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class AdamWState:
    m: Matrix
    v: Matrix
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Matrix, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(np.zeros_like(param), np.zeros_like(param), 0, beta1, beta2, eps)


def adamw_step(param: Matrix, grad: Matrix, state: AdamWState, eta: float, beta: float):
    """One AdamW update with decoupled weight decay.

    Mutates ``state`` and returns ``(new_param, g_hat)`` where ``g_hat`` is the
    bias-corrected normalized gradient ``m_hat / (sqrt(v_hat) + eps)`` and
    ``new_param = param - eta * g_hat - eta * beta * param``.
    """
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError(f"param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient passed to adamw_step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * (grad * grad)
    m_hat = state.m / (1.0 - b1**state.t)
    v_hat = state.v / (1.0 - b2**state.t)
    g_hat = m_hat / (np.sqrt(v_hat) + state.eps)
    new_param = param - eta * g_hat - eta * beta * param
    return new_param, g_hat


MODES = ("delta_lora", "lora", "full_ft", "ft_qv")
SCHEDULES = ("constant", "linear")


@dataclass
class TrainConfig:
    eta: float
    T: int
    mode: str = "delta_lora"
    beta: float = 0.0
    K: int = 0
    lam: float = 0.0
    r: int = 4
    alpha: float = 4.0
    seed: int = 0
    warmup_steps: int = 0
    schedule: str = "constant"
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    lowrank_dropout: float = 0.0
    # False drops the alpha/r factor from the W update and uses lambda alone.
    delta_alpha_scale: bool = True
    eval_every: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.T < 0 or self.K < 0:
            raise ValueError("T and K must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lambda must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)

    @property
    def delta_factor(self) -> float:
        return self.lam * (self.alpha / self.r if self.delta_alpha_scale else 1.0)


def lr_at(cfg: TrainConfig, t: int) -> float:
    if cfg.schedule == "constant":
        return cfg.eta
    w = cfg.warmup_steps
    if t < w:
        return cfg.eta * t / w
    if cfg.T <= w:
        return cfg.eta
    return cfg.eta * max(0.0, (cfg.T - t) / (cfg.T - w))
