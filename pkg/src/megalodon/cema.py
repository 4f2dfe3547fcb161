"""Complex exponential moving average (CEMA).

Each feature ``j`` is expanded into ``h`` complex hidden channels that follow

    h_t = alpha * e^{i theta} * (beta * x_t) + (1 - alpha * delta) * e^{i theta} * h_{t-1}
    y_t = Re(eta^T h_t)

Complex numbers are carried as explicit ``(re, im)`` tensor pairs. Three
evaluation routes are provided: a step-by-step scan that carries state, a
kernel/FFT convolution for zero state, and a chunk route that is the FFT
convolution plus the closed-form contribution of a carried state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

from .numerics import causal_fft_conv


@dataclass
class CemaParams:
    """Raw CEMA parameters; ``alpha_raw``/``delta_raw`` are pre-logistic."""

    alpha_raw: Tensor  # (d, h)
    delta_raw: Tensor  # (d, h)
    beta: Tensor  # (d, h)
    eta_re: Tensor  # (d, h)
    eta_im: Tensor  # (d, h)
    omega: Tensor  # (d,)

    @property
    def dim(self) -> int:
        return self.beta.shape[0]

    @property
    def ndim_h(self) -> int:
        return self.beta.shape[1]

    def alpha(self) -> Tensor:
        return torch.sigmoid(self.alpha_raw)

    def delta(self) -> Tensor:
        return torch.sigmoid(self.delta_raw)

    @classmethod
    def from_values(cls, alpha, delta, beta, eta_re, eta_im, omega, dtype=torch.float64) -> "CemaParams":
        """Build from already-mapped ``alpha, delta`` in [0, 1] (used by tests and tools)."""
        t = lambda v: torch.as_tensor(v, dtype=dtype)
        return cls(torch.logit(t(alpha)), torch.logit(t(delta)), t(beta), t(eta_re), t(eta_im), t(omega))


@dataclass
class CemaState:
    h_re: Tensor  # (..., d, h)
    h_im: Tensor
    t_offset: int = 0

    @classmethod
    def zeros(cls, d: int, h: int, batch: tuple[int, ...] = (), dtype=torch.float64, device=None) -> "CemaState":
        z = torch.zeros(*batch, d, h, dtype=dtype, device=device)
        return cls(z, z.clone(), 0)

    def is_zero(self) -> bool:
        return self.t_offset == 0 and not bool(self.h_re.any()) and not bool(self.h_im.any())


def init_cema_params(d: int, h: int, generator: torch.Generator | None = None, dtype=torch.float32) -> CemaParams:
    def noise(*shape):
        return 0.02 * torch.randn(*shape, generator=generator, dtype=torch.float64)

    alpha_raw = math.log(0.9 / 0.1) + noise(d, h)
    delta_raw = math.log(0.3 / 0.7) + noise(d, h)
    std = 1.0 / math.sqrt(h)
    beta = std * torch.randn(d, h, generator=generator, dtype=torch.float64)
    eta_re = std * torch.randn(d, h, generator=generator, dtype=torch.float64)
    eta_im = std * torch.randn(d, h, generator=generator, dtype=torch.float64)
    omega = torch.rand(d, generator=generator, dtype=torch.float64)
    return CemaParams(*(v.to(dtype) for v in (alpha_raw, delta_raw, beta, eta_re, eta_im, omega)))


def theta_angles(params: CemaParams) -> Tensor:
    """Arguments ``2*pi*k/h * omega_j`` for ``k = 1..h``, shape (d, h)."""
    h = params.ndim_h
    k = torch.arange(1, h + 1, dtype=params.omega.dtype, device=params.omega.device)
    return params.omega.unsqueeze(-1) * (2.0 * math.pi * k / h)


def _decay(params: CemaParams) -> Tensor:
    """``1 - alpha*delta``, kept strictly below one even when both logistics underflow."""
    decay = 1.0 - params.alpha() * params.delta()
    return decay.clamp(max=1.0 - 0.5 * torch.finfo(decay.dtype).eps)


def _coefficients(params: CemaParams) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Input coefficient ``p = alpha e^{i theta} beta`` and multiplier ``q = (1 - alpha delta) e^{i theta}``."""
    alpha, delta = params.alpha(), params.delta()
    theta = theta_angles(params)
    cos, sin = torch.cos(theta), torch.sin(theta)
    scale = alpha * params.beta
    decay = _decay(params)
    return scale * cos, scale * sin, decay * cos, decay * sin


def decay_modulus(params: CemaParams) -> Tensor:
    """``|q| = |1 - alpha*delta|``; strictly inside the unit disc for finite raw params."""
    return _decay(params).abs()


def _check_dims(x: Tensor, params: CemaParams, state: CemaState | None = None) -> None:
    if x.shape[-1] != params.dim:
        raise ValueError(f"feature axis mismatch: input has {x.shape[-1]}, params expect {params.dim}")
    if state is not None:
        if state.h_re.shape[-2] != params.dim:
            raise ValueError(f"state feature axis {state.h_re.shape[-2]} != params {params.dim}")
        if state.h_re.shape[-1] != params.ndim_h:
            raise ValueError(f"state hidden axis {state.h_re.shape[-1]} != params {params.ndim_h}")


def cema_forward_recurrent(x: Tensor, params: CemaParams, state: CemaState | None = None) -> tuple[Tensor, CemaState]:
    """Step-by-step scan over the time axis of ``x`` (shape ``(..., n, d)``)."""
    _check_dims(x, params, state)
    if state is None:
        state = CemaState.zeros(params.dim, params.ndim_h, tuple(x.shape[:-2]), x.dtype, x.device)
    pr, pi, qr, qi = _coefficients(params)
    hr, hi = state.h_re, state.h_im
    ys = []
    for t in range(x.shape[-2]):
        u = x[..., t, :].unsqueeze(-1)
        hr, hi = pr * u + (qr * hr - qi * hi), pi * u + (qr * hi + qi * hr)
        ys.append((params.eta_re * hr - params.eta_im * hi).sum(-1))
    y = torch.stack(ys, dim=-2) if ys else x.new_zeros(x.shape)
    return y, CemaState(hr, hi, state.t_offset + x.shape[-2])


def _powers(params: CemaParams, exponents: Tensor) -> tuple[Tensor, Tensor]:
    """``q ** s`` for integer ``s`` along a new trailing axis, via polar form."""
    decay = _decay(params)
    s = exponents.to(decay.dtype)
    mag = decay.unsqueeze(-1).pow(s)
    ang = theta_angles(params).unsqueeze(-1) * s
    return mag * torch.cos(ang), mag * torch.sin(ang)


def cema_kernel(params: CemaParams, length: int) -> Tensor:
    """Real convolution kernel ``K_j[s] = Re(sum_k eta q^s p)``, shape (d, length)."""
    if length < 1:
        raise ValueError("kernel length must be >= 1")
    pr, pi, _, _ = _coefficients(params)
    s = torch.arange(length, device=pr.device)
    wr, wi = _powers(params, s)  # (d, h, L)
    # Re(eta * q^s * p)
    cr = params.eta_re * pr - params.eta_im * pi
    ci = params.eta_re * pi + params.eta_im * pr
    return (cr.unsqueeze(-1) * wr - ci.unsqueeze(-1) * wi).sum(-2)


def cema_forward_fft(x: Tensor, params: CemaParams, state: CemaState | None = None) -> Tensor:
    """Zero-state CEMA as a per-feature causal FFT convolution."""
    if state is not None and not state.is_zero():
        raise ValueError("fft path requires zero state")
    _check_dims(x, params)
    kernel = cema_kernel(params, x.shape[-2])
    return causal_fft_conv(x.transpose(-1, -2), kernel).transpose(-1, -2)


def cema_forward_chunk(x: Tensor, params: CemaParams, state: CemaState | None = None) -> tuple[Tensor, CemaState]:
    """FFT convolution plus the closed-form effect of a carried state.

    ``y_t += Re(eta^T q^{t} h_0)`` for ``t = 1..n`` and the returned state is
    ``q^n h_0 + sum_t q^{n-t} p x_t``. Matches the recurrent scan to rounding.
    """
    _check_dims(x, params, state)
    n = x.shape[-2]
    if state is None:
        state = CemaState.zeros(params.dim, params.ndim_h, tuple(x.shape[:-2]), x.dtype, x.device)
    if n == 0:
        return x.new_zeros(x.shape), state
    y = cema_forward_fft(x, params)
    pr, pi, _, _ = _coefficients(params)

    steps = torch.arange(1, n + 1, device=x.device)
    wr, wi = _powers(params, steps)  # (d, h, n): q^1..q^n
    if state.t_offset or bool(state.h_re.any()) or bool(state.h_im.any()):
        # Re(eta * q^t * h0)
        hr, hi = state.h_re.unsqueeze(-1), state.h_im.unsqueeze(-1)
        zr = wr * hr - wi * hi
        zi = wr * hi + wi * hr
        carry = (params.eta_re.unsqueeze(-1) * zr - params.eta_im.unsqueeze(-1) * zi).sum(-2)
        y = y + carry.transpose(-1, -2)
        qn_r, qn_i = wr[..., -1], wi[..., -1]
        base_r = qn_r * state.h_re - qn_i * state.h_im
        base_i = qn_r * state.h_im + qn_i * state.h_re
    else:
        base_r = base_i = None

    # sum_t q^{n-t} x_t, exponents n-1 .. 0
    rev_r = torch.cat([wr[..., : n - 1].flip(-1), torch.ones_like(wr[..., :1])], dim=-1)
    rev_i = torch.cat([wi[..., : n - 1].flip(-1), torch.zeros_like(wi[..., :1])], dim=-1)
    xt = x.transpose(-1, -2).unsqueeze(-2)  # (..., d, 1, n)
    sr = (rev_r * xt).sum(-1)
    si = (rev_i * xt).sum(-1)
    new_r = pr * sr - pi * si
    new_i = pr * si + pi * sr
    if base_r is not None:
        new_r = new_r + base_r
        new_i = new_i + base_i
    return y, CemaState(new_r, new_i, state.t_offset + n)


def damped_ema_scan(x: Tensor, alpha: Tensor, delta: Tensor, beta: Tensor, eta: Tensor) -> Tensor:
    """Real multi-dimensional damped EMA, written as an independent scalar loop.

    Used as the reference that CEMA must reduce to when all angles are zero.
    """
    n, d = x.shape
    h = beta.shape[1]
    y = torch.zeros_like(x)
    for j in range(d):
        state = [0.0] * h
        for t in range(n):
            acc = 0.0
            for k in range(h):
                a = float(alpha[j, k])
                state[k] = a * float(beta[j, k]) * float(x[t, j]) + (1.0 - a * float(delta[j, k])) * state[k]
                acc += float(eta[j, k]) * state[k]
            y[t, j] = acc
    return y


class CEMA(nn.Module):
    """Learnable CEMA layer over inputs of shape ``(batch, n, d)``."""

    def __init__(self, d: int, h: int, mode: str = "auto", generator: torch.Generator | None = None):
        super().__init__()
        if mode not in ("auto", "fft", "recurrent"):
            raise ValueError(f"unknown cema mode {mode!r}")
        self.mode = mode
        p = init_cema_params(d, h, generator)
        self.alpha_raw = nn.Parameter(p.alpha_raw)
        self.delta_raw = nn.Parameter(p.delta_raw)
        self.beta = nn.Parameter(p.beta)
        self.eta_re = nn.Parameter(p.eta_re)
        self.eta_im = nn.Parameter(p.eta_im)
        self.omega = nn.Parameter(p.omega)

    def params(self) -> CemaParams:
        return CemaParams(self.alpha_raw, self.delta_raw, self.beta, self.eta_re, self.eta_im, self.omega)

    def resolved_mode(self) -> str:
        """``auto`` trains through the FFT route and infers with the exact scan."""
        if self.mode == "auto":
            return "fft" if self.training else "recurrent"
        return self.mode

    def forward(self, x: Tensor, state: CemaState | None = None) -> tuple[Tensor, CemaState]:
        if self.resolved_mode() == "recurrent":
            return cema_forward_recurrent(x, self.params(), state)
        return cema_forward_chunk(x, self.params(), state)


