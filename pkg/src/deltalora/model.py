"""A small stack of transformer blocks with named, in-place-updatable tensors.

Two input modes:

* regression (``vocab is None``): input and output are ``(batch, n, d)`` reals;
* language modelling: integer tokens ``(batch, n)`` go through a token and a
  position embedding, and a linear head produces ``(batch, n, vocab)`` logits.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import numpy as np

from .adapters import AdapterLinear, merge
from .linalg import Rng
from .nn import BlockParams, FfnParams, MhaParams, block_backward, block_forward

ADAPTED = ("wq", "wv")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 16
    heads: int = 2
    d_ff: int = 32
    layers: int = 1
    vocab: int | None = None
    seq_len: int = 8
    causal: bool = False
    dropout: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class TinyTransformer:
    def __init__(self, cfg: ModelConfig, blocks: list[BlockParams], embed=None, pos=None, head=None):
        self.cfg = cfg
        self.blocks = blocks
        self.embed = embed
        self.pos = pos
        self.head = head

    @classmethod
    def init(cls, cfg: ModelConfig, rng: Rng) -> "TinyTransformer":
        d, f = cfg.d_model, cfg.d_ff

        def normal(rows, cols):
            return rng.normal(0.0, 1.0 / math.sqrt(cols), size=(rows, cols))

        blocks = []
        for _ in range(cfg.layers):
            mha = MhaParams(normal(d, d), normal(d, d), normal(d, d), normal(d, d), cfg.heads, cfg.causal)
            ffn = FfnParams(normal(f, d), rng.normal(0.0, 0.1, size=f), normal(d, f), rng.normal(0.0, 0.1, size=d))
            blocks.append(BlockParams(mha, ffn, cfg.dropout))
        embed = pos = head = None
        if cfg.vocab is not None:
            embed = rng.normal(0.0, 1.0, size=(cfg.vocab, d))
            pos = rng.normal(0.0, 0.5, size=(cfg.seq_len, d))
            head = normal(cfg.vocab, d)
        return cls(cfg, blocks, embed, pos, head)

    def copy(self) -> "TinyTransformer":
        return copy.deepcopy(self)

    # -- tensors -----------------------------------------------------------

    def adapters(self) -> dict[str, AdapterLinear]:
        out = {}
        for i, blk in enumerate(self.blocks):
            for proj in ("wq", "wk", "wv"):
                w = getattr(blk.mha, proj)
                if isinstance(w, AdapterLinear):
                    out[f"blocks.{i}.attn.{proj}"] = w
        return out

    def tensors(self) -> dict[str, np.ndarray]:
        """Every tensor by name; values alias the live storage."""
        out = {}
        if self.embed is not None:
            out["embed"] = self.embed
            out["pos"] = self.pos
        for i, blk in enumerate(self.blocks):
            pre = f"blocks.{i}"
            for proj in ("wq", "wk", "wv"):
                w = getattr(blk.mha, proj)
                if isinstance(w, AdapterLinear):
                    out[f"{pre}.attn.{proj}"] = w.W
                    out[f"{pre}.attn.{proj}.lora_A"] = w.A
                    out[f"{pre}.attn.{proj}.lora_B"] = w.B
                else:
                    out[f"{pre}.attn.{proj}"] = w
            out[f"{pre}.attn.wo"] = blk.mha.wo
            for k in ("w1", "b1", "w2", "b2"):
                out[f"{pre}.ffn.{k}"] = getattr(blk.ffn, k)
        if self.head is not None:
            out["head"] = self.head
        return out

    def target_weights(self) -> dict[str, np.ndarray]:
        """Effective query/value weights, with adapters folded in."""
        out = {}
        for i, blk in enumerate(self.blocks):
            for proj in ADAPTED:
                w = getattr(blk.mha, proj)
                out[f"blocks.{i}.attn.{proj}"] = merge(w) if isinstance(w, AdapterLinear) else w.copy()
        return out

    def add_adapters(self, r: int, alpha: float, rng: Rng, lowrank_dropout_p: float = 0.0) -> None:
        for blk in self.blocks:
            for proj in ADAPTED:
                w = getattr(blk.mha, proj)
                setattr(blk.mha, proj, AdapterLinear.wrap(w, r, alpha, rng, lowrank_dropout_p))

    def merged(self) -> "TinyTransformer":
        """Copy of the model with every adapter folded into its base weight."""
        m = self.copy()
        for blk in m.blocks:
            for proj in ("wq", "wk", "wv"):
                w = getattr(blk.mha, proj)
                if isinstance(w, AdapterLinear):
                    setattr(blk.mha, proj, merge(w))
        return m

    # -- passes ------------------------------------------------------------

    def forward(self, inputs: np.ndarray, rng: Rng | None = None):
        if self.embed is not None:
            n = inputs.shape[-1]
            h = self.embed[inputs] + self.pos[:n]
        else:
            h = np.asarray(inputs, dtype=np.float64)
        caches = []
        for blk in self.blocks:
            h, c = block_forward(h, blk, rng)
            caches.append(c)
        if self.head is not None:
            out = h @ self.head.T
        else:
            out = h
        return out, dict(inputs=inputs, h=h, blocks=caches)

    def backward(self, cache: dict, g_out: np.ndarray) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        g = g_out
        if self.head is not None:
            h = cache["h"]
            grads["head"] = g.reshape(-1, g.shape[-1]).T @ h.reshape(-1, h.shape[-1])
            g = g @ self.head
        for i in reversed(range(len(self.blocks))):
            bg, g = block_backward(self.blocks[i], cache["blocks"][i], g)
            grads.update({f"blocks.{i}.{k}": v for k, v in bg.items()})
        if self.embed is not None:
            tokens = cache["inputs"]
            n = tokens.shape[-1]
            ge = np.zeros_like(self.embed)
            np.add.at(ge, tokens.reshape(-1), g.reshape(-1, g.shape[-1]))
            grads["embed"] = ge
            grads["pos"] = np.zeros_like(self.pos)
            grads["pos"][:n] = g.reshape(-1, n, g.shape[-1]).sum(axis=0)
        return grads
