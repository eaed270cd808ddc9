"""Desk-scale tasks whose batches are pure functions of ``(seed, step)``."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .linalg import frobenius_norm, make_rng
from .model import ADAPTED, ModelConfig, TinyTransformer
from .nn import loss_mse, loss_xent

# Stream tags keep batch sampling independent of every other seeded draw.
_BATCH_STREAM = 101


@dataclass
class TeacherStudentTask:
    """Regression onto a known perturbation of the pretrained model.

    ``target`` equals ``pretrained`` except that each query and value weight
    carries an additive perturbation of rank ``perturb_rank`` plus a small
    dense component; ``perturbations`` records the exact matrices.
    """

    model_cfg: ModelConfig
    pretrained: TinyTransformer
    target: TinyTransformer
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    noise_std: float
    perturb_rank: int
    perturb_scale: float
    dense_scale: float
    perturbations: dict
    seed: int

    def batch(self, seed: int, step: int, batch_size: int):
        rng = make_rng(seed, _BATCH_STREAM, step)
        idx = rng.integers(0, len(self.x_train), size=batch_size)
        return self.x_train[idx], self.y_train[idx]

    def loss(self, out, targets):
        return loss_mse(out, targets)

    def evaluate(self, model: TinyTransformer) -> float:
        out, _ = model.forward(self.x_eval)
        return loss_mse(out, self.y_eval)[0]

    def train_loss(self, model: TinyTransformer) -> float:
        out, _ = model.forward(self.x_train)
        return loss_mse(out, self.y_train)[0]

    def descriptor(self) -> dict:
        return {
            "kind": "teacher_student",
            "seed": self.seed,
            "n_train": len(self.x_train),
            "n_eval": len(self.x_eval),
            "noise_std": self.noise_std,
            "perturb_rank": self.perturb_rank,
            "perturb_scale": self.perturb_scale,
            "dense_scale": self.dense_scale,
            "perturb_norms": {k: frobenius_norm(v) for k, v in sorted(self.perturbations.items())},
            "perturb_ranks": {
                k: int(np.linalg.matrix_rank(v)) for k, v in sorted(self.perturbations.items())
            },
        }


def gen_teacher_student(
    seed: int,
    model_cfg: ModelConfig,
    n_train: int = 256,
    n_eval: int = 128,
    noise_std: float = 0.0,
    perturb_rank: int = 8,
    perturb_scale: float = 0.5,
    dense_scale: float = 0.05,
) -> TeacherStudentTask:
    """Build a teacher-student regression task.

    Each adapted weight ``W`` of the target gets ``U V^T`` (rank
    ``perturb_rank``, Frobenius norm ``perturb_scale * |W|``) plus Gaussian
    noise with Frobenius norm ``dense_scale * |W|``.
    """
    if model_cfg.vocab is not None:
        raise ValueError("teacher-student task needs a regression model (vocab=None)")
    d = model_cfg.d_model
    if not 0 <= perturb_rank <= d:
        raise ValueError(f"perturb_rank must lie in [0, {d}]")
    if n_train < 1 or n_eval < 1:
        raise ValueError("sample counts must be positive")
    rng = make_rng(seed)
    pretrained = TinyTransformer.init(model_cfg, rng)
    target = pretrained.copy()
    perturbations = {}
    for i, blk in enumerate(target.blocks):
        for proj in ADAPTED:
            W = getattr(blk.mha, proj)
            base = frobenius_norm(W)
            delta = np.zeros_like(W)
            if perturb_rank > 0 and perturb_scale > 0:
                low = rng.normal(size=(d, perturb_rank)) @ rng.normal(size=(perturb_rank, d))
                delta += low * (perturb_scale * base / frobenius_norm(low))
            if dense_scale > 0:
                dense = rng.normal(size=W.shape)
                delta += dense * (dense_scale * base / frobenius_norm(dense))
            W += delta
            perturbations[f"blocks.{i}.attn.{proj}"] = delta

    shape = (model_cfg.seq_len, d)
    x_train = rng.normal(size=(n_train, *shape))
    x_eval = rng.normal(size=(n_eval, *shape))
    y_train = target.forward(x_train)[0]
    y_eval = target.forward(x_eval)[0]
    if noise_std > 0:
        y_train = y_train + noise_std * rng.normal(size=y_train.shape)
        y_eval = y_eval + noise_std * rng.normal(size=y_eval.shape)
    return TeacherStudentTask(
        model_cfg, pretrained, target, x_train, y_train, x_eval, y_eval,
        noise_std, perturb_rank, perturb_scale, dense_scale, perturbations, seed,
    )


@dataclass
class CharLmTask:
    """Next-byte prediction over a text file."""

    model_cfg: ModelConfig
    pretrained: TinyTransformer
    corpus_path: str
    vocab: bytes
    tokens: np.ndarray
    n_train: int
    seq_len: int
    split: float
    seed: int

    @property
    def train_tokens(self) -> np.ndarray:
        return self.tokens[: self.n_train]

    @property
    def val_tokens(self) -> np.ndarray:
        return self.tokens[self.n_train :]

    def _window(self, region_len: int) -> int:
        return min(self.seq_len, region_len - 1)

    def batch(self, seed: int, step: int, batch_size: int):
        data = self.train_tokens
        n = self._window(len(data))
        rng = make_rng(seed, _BATCH_STREAM, step)
        starts = rng.integers(0, len(data) - n, size=batch_size)
        windows = np.stack([data[s : s + n + 1] for s in starts])
        return windows[:, :-1], windows[:, 1:]

    def eval_windows(self):
        data = self.val_tokens
        n = self._window(len(data))
        starts = range(0, len(data) - n, n)
        windows = np.stack([data[s : s + n + 1] for s in starts])
        return windows[:, :-1], windows[:, 1:]

    def loss(self, out, targets):
        return loss_xent(out, targets)

    def evaluate(self, model: TinyTransformer) -> float:
        x, y = self.eval_windows()
        out, _ = model.forward(x)
        return loss_xent(out, y)[0]

    def descriptor(self) -> dict:
        return {
            "kind": "char_lm",
            "corpus_path": self.corpus_path,
            "seed": self.seed,
            "vocab_size": len(self.vocab),
            "n_tokens": int(len(self.tokens)),
            "n_train": self.n_train,
            "seq_len": self.seq_len,
            "split": self.split,
        }


def load_corpus(path, seq_len: int, seed: int, split: float = 0.9, model_cfg: ModelConfig | None = None) -> CharLmTask:
    """Byte-level corpus; the first ``floor(split * N)`` tokens train, the rest validate."""
    path = Path(path)
    raw = path.read_bytes()
    if not raw:
        raise ValueError(f"corpus {path} is empty")
    if not 0.0 < split < 1.0:
        raise ValueError("split must lie in (0, 1)")
    vocab = bytes(sorted(set(raw)))
    lookup = np.zeros(256, dtype=np.int64)
    lookup[np.frombuffer(vocab, dtype=np.uint8)] = np.arange(len(vocab))
    tokens = lookup[np.frombuffer(raw, dtype=np.uint8)]
    n_train = math.floor(split * len(tokens))
    if n_train < 2 or len(tokens) - n_train < 2:
        raise ValueError(f"corpus {path} is too short to split into train and validation windows")
    base = model_cfg or ModelConfig()
    mcfg = replace(base, vocab=len(vocab), seq_len=seq_len, causal=True)
    pretrained = TinyTransformer.init(mcfg, make_rng(seed))
    return CharLmTask(mcfg, pretrained, str(path), vocab, tokens, n_train, seq_len, split, seed)


def build_task(desc: dict, model_cfg: ModelConfig, seed: int):
    """Construct a task from its JSON descriptor."""
    desc = dict(desc)
    kind = desc.pop("kind")
    task_seed = desc.pop("seed", seed)
    if kind == "teacher_student":
        return gen_teacher_student(task_seed, model_cfg, **desc)
    if kind == "char_lm":
        return load_corpus(desc["corpus_path"], desc.get("seq_len", model_cfg.seq_len), task_seed,
                           desc.get("split", 0.9), model_cfg)
    raise ValueError(f"unknown task kind {kind!r}")
