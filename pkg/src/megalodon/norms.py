"""Timestep normalization and plus-1 layer normalization."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

DEFAULT_EPS = 1e-5


@dataclass
class NormAffine:
    """Per-feature affine. ``gamma`` is the offset from one, so the scale is ``gamma + 1``."""

    gamma: Tensor
    beta_shift: Tensor
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @classmethod
    def identity(cls, d: int, dtype=torch.float64, eps: float = DEFAULT_EPS) -> "NormAffine":
        return cls(torch.zeros(d, dtype=dtype), torch.zeros(d, dtype=dtype), eps)


@dataclass
class TimestepNormState:
    """Running group statistics.

    ``count`` is the number of scalar samples seen per group (timesteps times
    group width); ``m2`` is the Welford sum of squared deviations. The
    ``*_comp`` tensors hold Kahan compensation for ``mean`` and ``m2``.
    """

    count: int
    mean: Tensor  # (..., k)
    m2: Tensor
    mean_comp: Tensor
    m2_comp: Tensor

    @classmethod
    def fresh(cls, k: int, batch: tuple[int, ...] = (), dtype=torch.float64, device=None) -> "TimestepNormState":
        z = torch.zeros(*batch, k, dtype=dtype, device=device)
        return cls(0, z, z.clone(), z.clone(), z.clone())

    @property
    def groups(self) -> int:
        return self.mean.shape[-1]

    def variance(self) -> Tensor:
        return self.m2 / max(self.count, 1)


def _grouped(x: Tensor, k: int) -> Tensor:
    d = x.shape[-1]
    if k < 1 or d % k:
        raise ValueError(f"feature dim {d} is not divisible by k_groups={k}")
    return x.reshape(*x.shape[:-1], k, d // k)


def _affine(xhat: Tensor, affine: NormAffine | None) -> Tensor:
    if affine is None:
        return xhat
    return (affine.gamma + 1.0) * xhat + affine.beta_shift


def timestep_norm(
    x: Tensor,
    k_groups: int,
    state: TimestepNormState | None = None,
    affine: NormAffine | None = None,
    method: str = "scan",
) -> tuple[Tensor, TimestepNormState]:
    """Normalize ``x`` (``(..., n, d)``) with cumulative per-group mean and variance.

    The statistics at step ``t`` cover every element of the group in all
    steps up to and including ``t``, plus whatever history ``state`` holds.
    ``method="scan"`` computes all prefixes at once with shifted cumulative
    sums merged into the carried state; ``method="welford"`` walks the
    timesteps with Kahan-compensated Welford updates.
    """
    xg = _grouped(x, k_groups)
    if state is None:
        state = TimestepNormState.fresh(k_groups, tuple(x.shape[:-2]), x.dtype, x.device)
    elif state.groups != k_groups:
        raise ValueError(f"state has {state.groups} groups, expected {k_groups}")
    eps = affine.eps if affine is not None else DEFAULT_EPS
    if method == "scan":
        mean, var, new_state = _scan_stats(xg, state)
    elif method == "welford":
        mean, var, new_state = _welford_stats(xg, state)
    else:
        raise ValueError(f"unknown method {method!r}")
    xhat = (xg - mean.unsqueeze(-1)) * torch.rsqrt(var.unsqueeze(-1) + eps)
    return _affine(xhat.reshape(x.shape), affine), new_state


def _scan_stats(xg: Tensor, state: TimestepNormState) -> tuple[Tensor, Tensor, TimestepNormState]:
    n, dg = xg.shape[-3], xg.shape[-1]
    na = state.count
    if na > 0:
        shift = state.mean
    else:
        shift = xg[..., 0, :, :].mean(-1)
    c = xg - shift.unsqueeze(-2).unsqueeze(-1)
    s1 = torch.cumsum(c.sum(-1), dim=-2)  # (..., n, k)
    s2 = torch.cumsum((c * c).sum(-1), dim=-2)
    nb = dg * torch.arange(1, n + 1, dtype=xg.dtype, device=xg.device).unsqueeze(-1)
    mb = s1 / nb
    m2b = (s2 - s1 * mb).clamp_min(0.0)
    ntot = na + nb
    if na > 0:
        # Chan et al. merge of the carried block (mean offset 0 after the shift) with each prefix
        delta = mb
        mean_shifted = delta * (nb / ntot)
        m2 = state.m2.unsqueeze(-2) + m2b + delta * delta * (na * nb / ntot)
    else:
        mean_shifted = mb
        m2 = m2b
    mean = shift.unsqueeze(-2) + mean_shifted
    var = m2 / ntot
    z = torch.zeros_like(state.mean)
    new_state = TimestepNormState(na + n * dg, mean[..., -1, :], m2[..., -1, :], z, z.clone())
    return mean, var, new_state


def _kahan_add(total: Tensor, comp: Tensor, value: Tensor) -> tuple[Tensor, Tensor]:
    y = value - comp
    t = total + y
    return t, (t - total) - y


def _welford_stats(xg: Tensor, state: TimestepNormState) -> tuple[Tensor, Tensor, TimestepNormState]:
    n, dg = xg.shape[-3], xg.shape[-1]
    count = state.count
    mean, m2 = state.mean, state.m2
    mean_c, m2_c = state.mean_comp, state.m2_comp
    means, variances = [], []
    for t in range(n):
        block = xg[..., t, :, :]
        bmean = block.mean(-1)
        bm2 = ((block - bmean.unsqueeze(-1)) ** 2).sum(-1)
        ntot = count + dg
        delta = bmean - mean
        mean, mean_c = _kahan_add(mean, mean_c, delta * (dg / ntot))
        m2, m2_c = _kahan_add(m2, m2_c, bm2 + delta * delta * (count * dg / ntot))
        if bool((m2 < 0).any()):
            raise ArithmeticError(f"negative variance accumulator at step {t}")
        count = ntot
        means.append(mean)
        variances.append(m2 / count)
    if n == 0:
        return xg.new_zeros(xg.shape[:-1]), xg.new_zeros(xg.shape[:-1]), state
    new_state = TimestepNormState(count, mean, m2, mean_c, m2_c)
    return torch.stack(means, -2), torch.stack(variances, -2), new_state


def layer_norm_plus1(x: Tensor, affine: NormAffine | None = None) -> Tensor:
    eps = affine.eps if affine is not None else DEFAULT_EPS
    mu = x.mean(-1, keepdim=True)
    var = ((x - mu) ** 2).mean(-1, keepdim=True)
    return _affine((x - mu) * torch.rsqrt(var + eps), affine)


class TimestepNorm(nn.Module):
    def __init__(self, d: int, k_groups: int, eps: float = DEFAULT_EPS, method: str = "scan"):
        super().__init__()
        _grouped(torch.zeros(1, d), k_groups)
        self.k_groups = k_groups
        self.eps = eps
        self.method = method
        self.gamma = nn.Parameter(torch.zeros(d))
        self.beta = nn.Parameter(torch.zeros(d))

    def affine(self) -> NormAffine:
        return NormAffine(self.gamma, self.beta, self.eps)

    def forward(self, x: Tensor, state: TimestepNormState | None = None) -> tuple[Tensor, TimestepNormState]:
        return timestep_norm(x, self.k_groups, state, self.affine(), self.method)


class LayerNormPlus1(nn.Module):
    def __init__(self, d: int, eps: float = DEFAULT_EPS):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.zeros(d))
        self.beta = nn.Parameter(torch.zeros(d))

    def affine(self) -> NormAffine:
        return NormAffine(self.gamma, self.beta, self.eps)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm_plus1(x, self.affine())
