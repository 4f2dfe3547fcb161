"""Numeric primitives shared by every layer.

Radix-2 FFT and causal convolution, masked softmax, compensated summation
and a central-difference gradient checker. Everything here is a pure
function of its inputs.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def _bit_reverse_index(n: int) -> Tensor:
    bits = n.bit_length() - 1
    idx = torch.arange(n)
    rev = torch.zeros_like(idx)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _complex_dtype(dtype: torch.dtype) -> torch.dtype:
    return torch.complex128 if dtype == torch.float64 else torch.complex64


def _twiddles(m: int, sign: float, dtype: torch.dtype) -> Tensor:
    ang = sign * 2.0 * math.pi * torch.arange(m // 2, dtype=torch.float64) / m
    return torch.polar(torch.ones_like(ang), ang).to(dtype)


def _fft_complex(z: Tensor, inverse: bool = False) -> Tensor:
    """Iterative radix-2 decimation-in-time transform of a complex tensor."""
    n = z.shape[-1]
    if n & (n - 1):
        raise ValueError(f"fft length {n} is not a power of two")
    z = z.index_select(-1, _bit_reverse_index(n).to(z.device))
    lead = z.shape[:-1]
    sign = 1.0 if inverse else -1.0
    m = 2
    while m <= n:
        half = m // 2
        z = z.reshape(*lead, n // m, 2, half)
        even = z[..., 0, :]
        odd = z[..., 1, :] * _twiddles(m, sign, z.dtype)
        z = torch.stack([even + odd, even - odd], dim=-2).reshape(*lead, n)
        m *= 2
    return z / n if inverse else z


def fft(re: Tensor, im: Tensor, inverse: bool = False) -> tuple[Tensor, Tensor]:
    """Radix-2 Cooley-Tukey DFT along the last axis on ``(re, im)`` pairs.

    The inverse includes the ``1/N`` factor. Length must be a power of two.
    """
    z = _fft_complex(torch.complex(re, im), inverse)
    return z.real, z.imag


def rfft(x: Tensor) -> Tensor:
    """Spectrum bins ``0..N/2`` of a real signal, via one complex FFT of half length."""
    n = x.shape[-1]
    if n < 2:
        return x.to(_complex_dtype(x.dtype))
    half = n // 2
    z = _fft_complex(torch.complex(x[..., 0::2], x[..., 1::2]))
    z_ext = torch.cat([z, z[..., :1]], dim=-1)
    zr = z_ext.flip(-1).conj()  # Z[N/2 - k]
    even = 0.5 * (z_ext + zr)
    odd = -0.5j * (z_ext - zr)
    w = torch.polar(torch.ones(half + 1, dtype=torch.float64),
                    -2.0 * math.pi * torch.arange(half + 1, dtype=torch.float64) / n).to(z.dtype)
    return even + w * odd


def irfft(spec: Tensor, n: int) -> Tensor:
    """Inverse of :func:`rfft` for an even length ``n``."""
    if n < 2:
        return spec.real
    half = n // 2
    xr = spec[..., : half + 1].flip(-1).conj()  # X[N/2 - k]
    even = 0.5 * (spec + xr)
    w = torch.polar(torch.ones(half + 1, dtype=torch.float64),
                    2.0 * math.pi * torch.arange(half + 1, dtype=torch.float64) / n).to(spec.dtype)
    odd = 0.5 * (spec - xr) * w
    z = _fft_complex((even + 1j * odd)[..., :half], inverse=True)
    return torch.stack([z.real, z.imag], dim=-1).reshape(*z.shape[:-1], n)


def causal_fft_conv(signal: Tensor, kernel: Tensor) -> Tensor:
    """Causal convolution ``out[t] = sum_s kernel[s] * signal[t - s]`` along the last axis.

    Both inputs are zero-padded to the next power of two >= n + L - 1 so the
    circular product equals the linear one; leading axes broadcast.
    """
    n, L = signal.shape[-1], kernel.shape[-1]
    if n == 0 or L == 0:
        raise ValueError("empty sequence")
    size = max(2, next_pow2(n + L - 1))
    sig = rfft(F.pad(signal, (0, size - n)))
    ker = rfft(F.pad(kernel, (0, size - L)))
    return irfft(sig * ker, size)[..., :n]


def direct_causal_conv(signal: Tensor, kernel: Tensor) -> Tensor:
    """O(nL) reference for :func:`causal_fft_conv`."""
    n, L = signal.shape[-1], kernel.shape[-1]
    out = torch.zeros_like(signal)
    for s in range(min(n, L)):
        out[..., s:] += kernel[..., s : s + 1] * signal[..., : n - s]
    return out


def stable_softmax(scores: Tensor, mask: Tensor | None = None, dim: int = -1) -> Tensor:
    """Softmax with masked entries treated as -inf before the max shift.

    ``mask`` is True where an entry participates. Masked outputs are exactly 0.
    """
    if mask is None:
        mask = torch.ones_like(scores, dtype=torch.bool)
    if not bool(mask.any(dim=dim).all()):
        raise ValueError("fully masked row")
    filled = scores.masked_fill(~mask, float("-inf"))
    shift = filled.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(filled - shift)
    return e / e.sum(dim=dim, keepdim=True)


def kahan_sum(values: Sequence[float] | np.ndarray, dtype=np.float64, lanes: int = 1024) -> float:
    """Compensated (Kahan) summation.

    The input is dealt round-robin into ``lanes`` independent Kahan
    accumulators, which are then combined by a final Kahan pass. Every
    addition is performed in ``dtype`` so the 32-bit behaviour is real.
    """
    x = np.asarray(values, dtype=dtype).ravel()
    if x.size == 0:
        return 0.0
    lanes = max(1, min(lanes, x.size))
    pad = (-x.size) % lanes
    x = np.concatenate([x, np.zeros(pad, dtype=dtype)]).reshape(-1, lanes)
    total = np.zeros(lanes, dtype=dtype)
    comp = np.zeros(lanes, dtype=dtype)
    for row in x:
        y = row - comp
        t = total + y
        comp = (t - total) - y
        total = t
    s = dtype(0.0)
    c = dtype(0.0)
    for v in total:
        y = v - c
        t = s + y
        c = (t - s) - y
        s = t
    return float(s)


def naive_sum(values: Sequence[float] | np.ndarray, dtype=np.float64) -> float:
    """Left-to-right accumulation in ``dtype`` (uncompensated baseline)."""
    x = np.asarray(values, dtype=dtype).ravel()
    return float(np.cumsum(x, dtype=dtype)[-1]) if x.size else 0.0


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x0: np.ndarray | Sequence[float], eps: float = 1e-6
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x0, dtype=np.float64).ravel()
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + eps
        fp = float(f(x))
        x[i] = orig - eps
        fm = float(f(x))
        x[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-coordinate ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
