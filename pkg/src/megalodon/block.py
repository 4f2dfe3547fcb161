"""Megalodon layer, SwiGLU FFN, the language-model stack and chunk streaming."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .attention import ChunkKvCache, GatedAttention
from .cema import CemaState
from .norms import LayerNormPlus1, TimestepNorm, TimestepNormState

BOS = 256


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    z_dim: int = 64
    v_dim: int = 128
    h_cema: int = 8
    heads: int = 2
    ffn_dim: int = 256
    chunk_size: int = 4096
    k_groups: int = 0  # 0 means "same as heads"
    vocab_size: int = 257
    rope_base: float = 100_000.0
    dropout_p: float = 0.0
    two_hop: bool = True
    cema_mode: str = "auto"
    norm_method: str = "scan"

    def __post_init__(self):
        if self.k_groups == 0:
            self.k_groups = self.heads
        for f in ("n_layers", "d_model", "z_dim", "v_dim", "h_cema", "heads", "ffn_dim", "chunk_size", "vocab_size"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.d_model % self.k_groups:
            raise ValueError(f"d_model={self.d_model} not divisible by k_groups={self.k_groups}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.z_dim % self.heads or self.v_dim % self.heads:
            raise ValueError("z_dim and v_dim must be divisible by heads")
        if (self.z_dim // self.heads) % 2:
            raise ValueError("per-head query/key width must be even for rotary embedding")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, val in values.items():
            if key not in known:
                continue
            default = getattr(cls, key)
            if isinstance(default, bool):
                out[key] = val if isinstance(val, bool) else str(val).lower() in ("1", "true", "yes")
            else:
                out[key] = type(default)(val)
        return cls(**out)


@dataclass
class LayerState:
    cema: CemaState | None = None
    norm: TimestepNormState | None = None
    kv: ChunkKvCache | None = None


@dataclass
class StreamState:
    """Everything one stream needs to continue where it stopped."""

    layers: list[LayerState]
    position: int = 0

    @classmethod
    def fresh(cls, n_layers: int) -> "StreamState":
        return cls([LayerState() for _ in range(n_layers)], 0)

    def tensors(self) -> list[Tensor]:
        out = []
        for ls in self.layers:
            if ls.cema is not None:
                out += [ls.cema.h_re, ls.cema.h_im]
            if ls.norm is not None:
                out += [ls.norm.mean, ls.norm.m2, ls.norm.mean_comp, ls.norm.m2_comp]
            if ls.kv is not None:
                out += [ls.kv.k, ls.kv.v]
        return out

    def nbytes(self) -> int:
        return sum(t.numel() * t.element_size() for t in self.tensors())

    def detach(self) -> "StreamState":
        layers = []
        for ls in self.layers:
            cema = None if ls.cema is None else CemaState(ls.cema.h_re.detach(), ls.cema.h_im.detach(), ls.cema.t_offset)
            norm = None
            if ls.norm is not None:
                n = ls.norm
                norm = TimestepNormState(n.count, n.mean.detach(), n.m2.detach(), n.mean_comp.detach(), n.m2_comp.detach())
            kv = None if ls.kv is None else ChunkKvCache(ls.kv.k.detach(), ls.kv.v.detach(), ls.kv.start)
            layers.append(LayerState(cema, norm, kv))
        return StreamState(layers, self.position)


def ffn_swiglu(x: Tensor, w1: Tensor, w2: Tensor, w3: Tensor) -> Tensor:
    return (F.silu(x @ w1) * (x @ w3)) @ w2


class SwiGLU(nn.Module):
    def __init__(self, d: int, f: int, generator: torch.Generator | None = None):
        super().__init__()
        self.w1 = nn.Parameter(torch.randn(d, f, generator=generator) / math.sqrt(d))
        self.w3 = nn.Parameter(torch.randn(d, f, generator=generator) / math.sqrt(d))
        self.w2 = nn.Parameter(torch.randn(f, d, generator=generator) / math.sqrt(f))

    def forward(self, x: Tensor) -> Tensor:
        return ffn_swiglu(x, self.w1, self.w2, self.w3)


class MegalodonLayer(nn.Module):
    """Pre-norm layer with the two-hop residual.

    ``Y_hat = Attn(TN(X)) + X`` then ``Y = FFN(LN(Y_hat)) + X``. With
    ``two_hop=False`` the second residual is ``Y_hat`` (plain pre-norm),
    kept only for comparison.
    """

    def __init__(self, cfg: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.two_hop = cfg.two_hop
        self.ts_norm = TimestepNorm(cfg.d_model, cfg.k_groups, method=cfg.norm_method)
        self.attention = GatedAttention(
            cfg.d_model, cfg.z_dim, cfg.v_dim, cfg.heads, cfg.h_cema, cfg.chunk_size,
            cfg.rope_base, cfg.dropout_p, cfg.cema_mode, generator,
        )
        self.ln = LayerNormPlus1(cfg.d_model)
        self.ffn = SwiGLU(cfg.d_model, cfg.ffn_dim, generator)

    def forward(self, x: Tensor, state: LayerState | None = None) -> tuple[Tensor, LayerState]:
        state = state or LayerState()
        xn, norm_state = self.ts_norm(x, state.norm)
        attn, cema_state, kv = self.attention(xn, state.cema, state.kv)
        y_hat = attn + x
        residual = x if self.two_hop else y_hat
        y = self.ffn(self.ln(y_hat)) + residual
        return y, LayerState(cema_state, norm_state, kv)


class MegalodonLM(nn.Module):
    """Byte-level causal language model with tied input/output embeddings."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        g = torch.Generator()
        g.manual_seed(seed)
        self.embed = nn.Parameter(torch.randn(cfg.vocab_size, cfg.d_model, generator=g) / math.sqrt(cfg.d_model))
        self.layers = nn.ModuleList(MegalodonLayer(cfg, g) for _ in range(cfg.n_layers))
        self.final_norm = LayerNormPlus1(cfg.d_model)

    def forward(self, tokens: Tensor, state: StreamState | None = None) -> tuple[Tensor, StreamState]:
        """``tokens`` has shape ``(n,)`` or ``(batch, n)``; returns logits ``(..., n, vocab)``."""
        tokens = torch.as_tensor(tokens)
        bad = (tokens < 0) | (tokens >= self.cfg.vocab_size)
        if bool(bad.any()):
            pos = int(bad.nonzero()[0][-1])
            raise ValueError(f"token id out of vocabulary at position {pos}")
        if state is None:
            state = StreamState.fresh(self.cfg.n_layers)
        if len(state.layers) != self.cfg.n_layers:
            raise ValueError(f"state has {len(state.layers)} layers, model has {self.cfg.n_layers}")
        x = self.embed[tokens] * math.sqrt(self.cfg.d_model)
        new_layers = []
        for layer, ls in zip(self.layers, state.layers):
            x, ls = layer(x, ls)
            new_layers.append(ls)
        logits = self.final_norm(x) @ self.embed.t()
        return logits, StreamState(new_layers, state.position + tokens.shape[-1])


def model_forward(model: MegalodonLM, tokens: Tensor, state: StreamState | None = None, training: bool = False):
    model.train(training)
    return model(tokens, state)


def stream_forward(
    model: MegalodonLM,
    chunks: Iterable[Tensor],
    state: StreamState | None = None,
    on_chunk=None,
) -> Iterator[Tensor]:
    """Run ``model`` over consecutive token chunks, yielding each chunk's logits.

    Every chunk except the last must hold exactly ``chunk_size`` tokens so
    attention windows line up with the one-shot forward. Only the carried
    state survives between chunks. ``on_chunk(state)`` is called after each.
    """
    c = model.cfg.chunk_size
    state = state or StreamState.fresh(model.cfg.n_layers)
    short_seen = False
    for chunk in chunks:
        chunk = torch.as_tensor(chunk)
        n = chunk.shape[-1]
        if short_seen:
            raise ValueError(f"interior chunk at position {state.position} is not aligned to chunk_size={c}")
        if state.position % c:
            raise ValueError(f"chunk starts at position {state.position}, not a multiple of chunk_size={c}")
        if n > c:
            raise ValueError(f"chunk of {n} tokens exceeds chunk_size={c}")
        short_seen = n < c
        with torch.no_grad():
            logits, state = model(chunk, state)
        if on_chunk is not None:
            on_chunk(state)
        yield logits


def chunk_tokens(tokens: Tensor, size: int) -> list[Tensor]:
    return [tokens[..., i : i + size] for i in range(0, tokens.shape[-1], size)]
