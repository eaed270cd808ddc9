"""Post-hoc reports: weight similarity to the pretrained model and sweep tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fileio import csv_text, dumps
from .linalg import flat_cosine


@dataclass
class CosineReport:
    rows: list[tuple[str, str, float]]
    meta: dict = field(default_factory=dict)

    def csv(self) -> str:
        return csv_text(["layer", "mode", "cosine"], [(l, m, repr(c)) for l, m, c in self.rows])

    def jsonl(self) -> str:
        return "".join(dumps({"layer": l, "mode": m, "cosine": c, **self.meta}) + "\n" for l, m, c in self.rows)

    def mean_by_mode(self) -> dict[str, float]:
        out: dict[str, list[float]] = {}
        for _, mode, c in self.rows:
            out.setdefault(mode, []).append(c)
        return {m: float(np.mean(v)) for m, v in out.items()}


def effective_weight(params: dict[str, np.ndarray], name: str, alpha: float | None) -> np.ndarray:
    """``W`` for plain layers, ``W + (alpha/r) A B`` when adapter factors are present."""
    W = params[name]
    A = params.get(f"{name}.lora_A")
    if A is None:
        return W
    B = params[f"{name}.lora_B"]
    return W + (alpha / A.shape[1]) * (A @ B)


def cosine_report(pretrained: dict[str, np.ndarray], results: dict, meta: dict | None = None) -> CosineReport:
    """Cosine of every fine-tuned (adapters merged) layer against its pretrained weight.

    ``pretrained`` maps layer name to weight and fixes the layer set;
    ``results`` maps mode to :class:`~deltalora.trainer.RunResult`.
    """
    rows = []
    for mode, res in results.items():
        params = res.final_params
        missing = [n for n in pretrained if n not in params]
        if missing:
            raise ValueError(f"run {mode!r} lacks layers {missing}")
        alpha = res.config_echo.get("alpha")
        for name in sorted(pretrained):
            rows.append((name, mode, flat_cosine(effective_weight(params, name, alpha), pretrained[name])))
    return CosineReport(rows, dict(meta or {}))


def summarize_sweep(results, param: str = "lambda") -> list[tuple[float, float, float]]:
    """``(param_value, final_train_loss, final_eval_metric)`` per run, input order kept."""
    key = param
    return [(r.config_echo[key], r.final_loss, r.final_eval) for r in results]


def sweep_csv(rows, param: str = "lambda") -> str:
    return csv_text([param, "final_train_loss", "final_eval_metric"], [(repr(v), repr(l), repr(e)) for v, l, e in rows])
