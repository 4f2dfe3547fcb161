"""Normalized gated attention with chunk-local causal softmax."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .cema import CEMA, CemaParams, CemaState, cema_forward_chunk, cema_forward_recurrent
from .numerics import stable_softmax

ZNORM_EPS = 1e-6


@dataclass
class AttentionParams:
    w_z: Tensor  # (d, z)
    b_z: Tensor
    kappa_q: Tensor  # (z,)
    mu_q: Tensor
    kappa_k: Tensor
    mu_k: Tensor
    w_v: Tensor  # (d, v)
    b_v: Tensor
    w_gamma: Tensor  # (d, v)
    b_gamma: Tensor
    w_h: Tensor  # (d, d)
    u_h: Tensor  # (v, d)
    b_h: Tensor
    heads: int = 1
    rope_base: float = 100_000.0

    def __post_init__(self):
        z, v = self.w_z.shape[1], self.w_v.shape[1]
        if z % self.heads or v % self.heads:
            raise ValueError(f"z={z} and v={v} must be divisible by heads={self.heads}")


@dataclass
class ChunkKvCache:
    """Rotated keys and values for the already-seen positions of the current chunk.

    ``start`` is the absolute position of the chunk's first token.
    """

    k: Tensor  # (..., heads, m, dk)
    v: Tensor  # (..., heads, m, dv)
    start: int

    @property
    def length(self) -> int:
        return self.k.shape[-2]


def shared_rep(x_ema: Tensor, w_z: Tensor, b_z: Tensor, eps: float = ZNORM_EPS) -> Tensor:
    """Affine projection followed by per-timestep L2 normalization (no activation)."""
    z = x_ema @ w_z + b_z
    norm = torch.linalg.vector_norm(z, dim=-1, keepdim=True)
    return z / norm.clamp_min(eps)


def qk_project(z_norm: Tensor, kappa: Tensor, mu: Tensor) -> Tensor:
    return kappa * z_norm + mu


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, heads*e) -> (..., heads, n, e), contiguous slices per head."""
    *lead, n, width = x.shape
    return x.reshape(*lead, n, heads, width // heads).transpose(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, n, e = x.shape
    return x.transpose(-2, -3).reshape(*lead, n, heads * e)


def rotary_embed(x: Tensor, positions: Tensor, base: float = 100_000.0) -> Tensor:
    """Rotate feature pairs ``(x[i], x[i + e/2])`` by ``pos * base^(-2i/e)``."""
    e = x.shape[-1]
    if e % 2:
        raise ValueError(f"rotary embedding needs an even head dim, got {e}")
    half = e // 2
    inv_freq = base ** (-2.0 * torch.arange(half, dtype=torch.float64) / e)
    ang = positions.to(torch.float64).unsqueeze(-1) * inv_freq
    cos, sin = torch.cos(ang).to(x.dtype), torch.sin(ang).to(x.dtype)
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def dropkey_mask(
    scores: Tensor,
    p: float,
    seed: int | None = None,
    allowed: Tensor | None = None,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Set allowed off-diagonal scores to -inf with probability ``p``.

    The diagonal of the last two axes is never dropped, so every row keeps
    at least its self entry.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return scores
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else seed)
    drop = torch.rand(scores.shape, generator=generator, dtype=torch.float64) < p
    eye = torch.eye(scores.shape[-2], scores.shape[-1], dtype=torch.bool)
    drop &= ~eye
    if allowed is not None:
        drop &= allowed
    return scores.masked_fill(drop, float("-inf"))


def _block_attention(
    q: Tensor, k: Tensor, v: Tensor, chunk: int, dropout_p: float, generator: torch.Generator | None
) -> Tensor:
    """Causal softmax attention inside consecutive blocks of ``chunk`` positions.

    All inputs start at a chunk boundary; ``q``, ``k``, ``v`` have equal length.
    """
    n = q.shape[-2]
    if n < chunk:
        chunk = n  # a single partial block needs no padding
    nblocks = -(-n // chunk)
    pad = nblocks * chunk - n
    if pad:
        q, k, v = (F.pad(t, (0, 0, 0, pad)) for t in (q, k, v))
    qb = q.reshape(*q.shape[:-2], nblocks, chunk, q.shape[-1])
    kb = k.reshape(*k.shape[:-2], nblocks, chunk, k.shape[-1])
    vb = v.reshape(*v.shape[:-2], nblocks, chunk, v.shape[-1])
    scores = qb @ kb.transpose(-1, -2)
    causal = torch.ones(chunk, chunk, dtype=torch.bool).tril()
    if dropout_p > 0.0:
        scores = dropkey_mask(scores, dropout_p, allowed=causal, generator=generator)
    weights = stable_softmax(scores, causal.expand(scores.shape))
    out = weights @ vb
    return out.reshape(*out.shape[:-3], nblocks * chunk, out.shape[-1])[..., :n, :]


def chunked_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    chunk: int,
    dropout_p: float = 0.0,
    seed: int | None = None,
    training: bool = False,
) -> Tensor:
    """Chunk-wise causal attention over ``(..., n, e)`` inputs, no 1/sqrt(e) scaling."""
    if chunk < 1:
        raise ValueError("chunk size must be >= 1")
    gen = None
    if training and dropout_p > 0.0:
        gen = torch.Generator()
        gen.manual_seed(0 if seed is None else seed)
    return _block_attention(q, k, v, chunk, dropout_p if training else 0.0, gen)


def attend_with_cache(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    position: int,
    chunk: int,
    cache: ChunkKvCache | None,
    dropout_p: float = 0.0,
    generator: torch.Generator | None = None,
) -> tuple[Tensor, ChunkKvCache]:
    """Chunked attention for new positions ``position..position+n-1``.

    ``cache`` holds the keys/values of this chunk's earlier positions. The
    returned cache covers only the chunk that contains the last new token
    (empty when the block ends on a chunk boundary).
    """
    n = q.shape[-2]
    chunk_start = position - position % chunk
    offset = position - chunk_start
    if offset:
        if cache is None or cache.start != chunk_start or cache.length != offset:
            raise ValueError(f"kv cache does not cover positions {chunk_start}..{position - 1}")
        k_all = torch.cat([cache.k, k], dim=-2)
        v_all = torch.cat([cache.v, v], dim=-2)
        q_all = torch.cat([q.new_zeros(*q.shape[:-2], offset, q.shape[-1]), q], dim=-2)
    else:
        k_all, v_all, q_all = k, v, q
    out = _block_attention(q_all, k_all, v_all, chunk, dropout_p, generator)[..., offset:, :]
    end = position + n
    tail = end % chunk
    keep = k_all.shape[-2] - tail
    new_cache = ChunkKvCache(k_all[..., keep:, :], v_all[..., keep:, :], end - tail)
    return out, new_cache


def gated_attention_sublayer(
    x_norm: Tensor,
    params: AttentionParams,
    cema_params: CemaParams,
    cema_state: CemaState | None = None,
    chunk_c: int = 4096,
    training: bool = False,
    kv_cache: ChunkKvCache | None = None,
    dropout_p: float = 0.0,
    seed: int | None = None,
    cema_mode: str = "fft",
) -> tuple[Tensor, CemaState, ChunkKvCache]:
    """One normalized gated attention pass over ``x_norm`` of shape ``(..., n, d)``.

    The absolute position of the first token is the number of steps the CEMA
    state has already consumed; rotary phases use it.
    """
    position = 0 if cema_state is None else cema_state.t_offset
    if cema_mode == "recurrent":
        x_ema, cema_state = cema_forward_recurrent(x_norm, cema_params, cema_state)
    else:
        x_ema, cema_state = cema_forward_chunk(x_norm, cema_params, cema_state)

    z = shared_rep(x_ema, params.w_z, params.b_z)
    q = split_heads(qk_project(z, params.kappa_q, params.mu_q), params.heads)
    k = split_heads(qk_project(z, params.kappa_k, params.mu_k), params.heads)
    pos = torch.arange(position, position + x_norm.shape[-2])
    q = rotary_embed(q, pos, params.rope_base)
    k = rotary_embed(k, pos, params.rope_base)
    v = split_heads(F.silu(x_norm @ params.w_v + params.b_v), params.heads)

    gen = None
    p = dropout_p if training else 0.0
    if p > 0.0:
        gen = torch.Generator()
        gen.manual_seed(0 if seed is None else seed)
    o, kv_cache = attend_with_cache(q, k, v, position, chunk_c, kv_cache, p, gen)
    o = merge_heads(o)

    gate = F.silu(x_ema @ params.w_gamma + params.b_gamma)
    out = F.silu(x_ema @ params.w_h + (gate * o) @ params.u_h + params.b_h)
    return out, cema_state, kv_cache


class GatedAttention(nn.Module):
    def __init__(
        self,
        d: int,
        z: int,
        v: int,
        heads: int,
        h_cema: int,
        chunk: int,
        rope_base: float = 100_000.0,
        dropout_p: float = 0.0,
        cema_mode: str = "auto",
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.heads, self.chunk, self.rope_base = heads, chunk, rope_base
        self.dropout_p = dropout_p
        self.cema = CEMA(d, h_cema, cema_mode, generator)

        def lin(i, o):
            return nn.Parameter(torch.randn(i, o, generator=generator) / math.sqrt(i))

        self.w_z, self.b_z = lin(d, z), nn.Parameter(torch.zeros(z))
        qk_init = 2.0 * math.sqrt(heads)
        self.kappa_q = nn.Parameter(torch.full((z,), qk_init))
        self.kappa_k = nn.Parameter(torch.full((z,), qk_init))
        self.mu_q = nn.Parameter(0.02 * torch.randn(z, generator=generator))
        self.mu_k = nn.Parameter(0.02 * torch.randn(z, generator=generator))
        self.w_v, self.b_v = lin(d, v), nn.Parameter(torch.zeros(v))
        self.w_gamma, self.b_gamma = lin(d, v), nn.Parameter(torch.zeros(v))
        self.w_h, self.u_h = lin(d, d), lin(v, d)
        self.b_h = nn.Parameter(torch.zeros(d))

    def params(self) -> AttentionParams:
        return AttentionParams(
            self.w_z, self.b_z, self.kappa_q, self.mu_q, self.kappa_k, self.mu_k,
            self.w_v, self.b_v, self.w_gamma, self.b_gamma, self.w_h, self.u_h, self.b_h,
            self.heads, self.rope_base,
        )

    def forward(
        self, x_norm: Tensor, cema_state: CemaState | None = None, kv_cache: ChunkKvCache | None = None
    ) -> tuple[Tensor, CemaState, ChunkKvCache]:
        seed = None
        if self.training and self.dropout_p > 0.0:
            seed = int(torch.randint(0, 2**31 - 1, (1,)))
        return gated_attention_sublayer(
            x_norm, self.params(), self.cema.params(), cema_state, self.chunk, self.training,
            kv_cache, self.dropout_p, seed, self.cema.resolved_mode(),
        )
