"""Oracle and equivalence checks runnable without a corpus (``megalodon selftest``).

Every check returns a :class:`CheckResult`; ``run_all`` prints one line per
check. The toy-training criteria need a corpus and live in the test suite.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.func import functional_call

from .attention import AttentionParams, gated_attention_sublayer
from .block import MegalodonLayer, MegalodonLM, ModelConfig, chunk_tokens, stream_forward
from .cema import (CemaParams, CemaState, cema_forward_chunk, cema_forward_fft, cema_forward_recurrent,
                   damped_ema_scan)
from .harness import TrainConfig, adamw_step
from .norms import NormAffine, TimestepNormState, layer_norm_plus1, timestep_norm
from .numerics import finite_diff_grad, grad_rel_error

F64 = torch.float64


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def random_cema_params(d: int, h: int, g: torch.Generator, zero_angle: bool = False) -> CemaParams:
    u = lambda lo, hi: lo + (hi - lo) * torch.rand(d, h, generator=g, dtype=F64)
    omega = torch.zeros(d, dtype=F64) if zero_angle else torch.rand(d, generator=g, dtype=F64)
    return CemaParams.from_values(
        u(0.05, 0.95), u(0.05, 0.95),
        torch.randn(d, h, generator=g, dtype=F64), torch.randn(d, h, generator=g, dtype=F64),
        torch.randn(d, h, generator=g, dtype=F64), omega,
    )


def gradient_error(loss_fn: Callable[[Sequence[torch.Tensor]], torch.Tensor], tensors: Sequence[torch.Tensor],
                   eps: float = 1e-5) -> float:
    """Largest per-coordinate relative error between autograd and central differences."""
    leaves = [t.detach().clone().requires_grad_(True) for t in tensors]
    loss = loss_fn(leaves)
    grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    analytic = np.concatenate([
        (torch.zeros_like(t) if g is None else g).detach().reshape(-1).numpy() for t, g in zip(leaves, grads)
    ])
    sizes = [t.numel() for t in leaves]

    def f(flat: np.ndarray) -> float:
        parts, pos = [], 0
        for t, n in zip(leaves, sizes):
            parts.append(torch.from_numpy(flat[pos : pos + n].copy()).reshape(t.shape))
            pos += n
        with torch.no_grad():
            return float(loss_fn(parts))

    x0 = np.concatenate([t.detach().reshape(-1).numpy() for t in leaves])
    numeric = finite_diff_grad(f, x0, eps)
    return float(grad_rel_error(analytic, numeric).max())


def small_config(**overrides) -> ModelConfig:
    base = dict(n_layers=2, d_model=8, z_dim=8, v_dim=8, h_cema=2, heads=2, ffn_dim=16, chunk_size=4)
    base.update(overrides)
    return ModelConfig(**base)


# --------------------------------------------------------------------------
# checks
# --------------------------------------------------------------------------


def check_cema_dual_path(n_configs: int = 100, seed: int = 0) -> CheckResult:
    g = torch.Generator().manual_seed(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n_configs):
        n = int(torch.randint(1, 257, (1,), generator=g))
        d = int(torch.randint(1, 9, (1,), generator=g))
        h = int(torch.randint(1, 9, (1,), generator=g))
        p = random_cema_params(d, h, g)
        x = torch.randn(n, d, generator=g, dtype=F64)
        y_rec, _ = cema_forward_recurrent(x, p)
        y_fft = cema_forward_fft(x, p)
        worst = max(worst, float((y_rec - y_fft).abs().max()))
    dt = time.perf_counter() - t0
    return CheckResult("cema recurrent == fft", worst < 1e-9 and dt < 10.0,
                       f"max err {worst:.2e} over {n_configs} configs in {dt:.1f}s")


def check_cema_real_reduction(seed: int = 1) -> CheckResult:
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for d, h, n in [(1, 1, 10), (3, 4, 40), (5, 8, 64)]:
        p = random_cema_params(d, h, g, zero_angle=True)
        x = torch.randn(n, d, generator=g, dtype=F64)
        y, _ = cema_forward_recurrent(x, p)
        ref = damped_ema_scan(x, p.alpha(), p.delta(), p.beta, p.eta_re)
        worst = max(worst, float((y - ref).abs().max()))
    return CheckResult("cema theta=0 == damped EMA", worst < 1e-12, f"max err {worst:.2e}")


def prefix_norm_oracle(x: torch.Tensor, k: int, eps: float) -> torch.Tensor:
    """Recompute mean/variance over the whole prefix at every t with numpy."""
    a = x.numpy()
    n, d = a.shape
    w = d // k
    out = np.empty_like(a)
    for t in range(n):
        for grp in range(k):
            block = a[: t + 1, grp * w : (grp + 1) * w]
            mu = block.mean()
            var = ((block - mu) ** 2).mean()
            out[t, grp * w : (grp + 1) * w] = (a[t, grp * w : (grp + 1) * w] - mu) / math.sqrt(var + eps)
    return torch.from_numpy(out)


def check_timestep_norm(seed: int = 2) -> CheckResult:
    g = torch.Generator().manual_seed(seed)
    x = 3.0 + 2.0 * torch.randn(50, 12, generator=g, dtype=F64)
    ref = prefix_norm_oracle(x, 3, 1e-5)
    err_prefix = 0.0
    for method in ("scan", "welford"):
        y, _ = timestep_norm(x, 3, method=method)
        err_prefix = max(err_prefix, float((y - ref).abs().max()))
    err_stream = 0.0
    for method in ("scan", "welford"):
        full, _ = timestep_norm(x, 3, method=method)
        state, pieces = None, []
        for lo, hi in [(0, 7), (7, 8), (8, 30), (30, 50)]:
            y, state = timestep_norm(x[lo:hi], 3, state, method=method)
            pieces.append(y)
        err_stream = max(err_stream, float((torch.cat(pieces) - full).abs().max()))
    ok = err_prefix < 1e-10 and err_stream < 1e-12
    return CheckResult("timestep norm prefix oracle + streaming", ok,
                       f"prefix err {err_prefix:.2e}, stream err {err_stream:.2e}")


def check_causality(trials: int = 20, seed: int = 3) -> CheckResult:
    cfg = ModelConfig(n_layers=2, d_model=16, z_dim=16, v_dim=32, h_cema=4, heads=2, ffn_dim=32, chunk_size=8)
    model = MegalodonLM(cfg, seed=seed).double().eval()
    g = torch.Generator().manual_seed(seed)
    n = 40
    violations = 0
    with torch.no_grad():
        for _ in range(trials):
            tokens = torch.randint(0, 256, (n,), generator=g)
            t = int(torch.randint(1, n, (1,), generator=g))
            other = tokens.clone()
            other[t:] = torch.randint(0, 256, (n - t,), generator=g)
            a, _ = model(tokens)
            b, _ = model(other)
            if not torch.equal(a[:t], b[:t]):
                violations += 1
    return CheckResult("end-to-end causality (bit-exact)", violations == 0, f"{violations}/{trials} trials leaked")


def check_streaming(seed: int = 4) -> CheckResult:
    cfg = ModelConfig(n_layers=2, d_model=32, z_dim=32, v_dim=64, h_cema=4, heads=2, ffn_dim=64, chunk_size=32)
    g = torch.Generator().manual_seed(seed)
    tokens = torch.randint(0, 256, (128,), generator=g)
    worst = 0.0
    for training in (False, True):
        model = MegalodonLM(cfg, seed=seed).double().train(training)
        with torch.no_grad():
            full, _ = model(tokens)
        pieces = torch.cat(list(stream_forward(model, chunk_tokens(tokens, 32))))
        worst = max(worst, float((pieces - full).abs().max()))
    return CheckResult("4-chunk streaming == one-shot", worst < 1e-10, f"max logit dev {worst:.2e}")


def _gradcheck_cema(g: torch.Generator) -> float:
    d, h, n = 3, 4, 12
    p = random_cema_params(d, h, g)
    x = torch.randn(2, n, d, generator=g, dtype=F64)
    h0r = 0.5 * torch.randn(2, d, h, generator=g, dtype=F64)
    h0i = 0.5 * torch.randn(2, d, h, generator=g, dtype=F64)
    w = torch.randn(2, n, d, generator=g, dtype=F64)
    tensors = [x, p.alpha_raw, p.delta_raw, p.beta, p.eta_re, p.eta_im, p.omega, h0r, h0i]

    def loss(ts):
        xx, *raw, hr, hi = ts
        params = CemaParams(*raw)
        y1, st = cema_forward_chunk(xx, params, CemaState(hr, hi, 5))
        y2, _ = cema_forward_recurrent(xx, params, CemaState(hr, hi, 5))
        return (w * y1).sum() + (w * y2).sum() + (st.h_re ** 2).sum() + st.h_im.sum()

    return gradient_error(loss, tensors)


def _gradcheck_norm(g: torch.Generator) -> float:
    n, d, k = 9, 8, 2
    x = 1.0 + torch.randn(2, n, d, generator=g, dtype=F64)
    gamma = 0.1 * torch.randn(d, generator=g, dtype=F64)
    beta = 0.1 * torch.randn(d, generator=g, dtype=F64)
    w = torch.randn(2, n, d, generator=g, dtype=F64)
    _, prior = timestep_norm(torch.randn(2, 5, d, generator=g, dtype=F64), k)

    def loss(ts):
        xx, gm, bt = ts
        aff = NormAffine(gm, bt)
        y1, _ = timestep_norm(xx, k, None, aff, "scan")
        y2, _ = timestep_norm(xx, k, prior, aff, "welford")
        return (w * y1).sum() + (w * y2).sum()

    return gradient_error(loss, [x, gamma, beta])


def _gradcheck_attention(g: torch.Generator) -> float:
    d, z, v, heads, h, n, c = 8, 8, 8, 2, 2, 10, 4
    r = lambda *s: torch.randn(*s, generator=g, dtype=F64) / math.sqrt(s[0])
    attn = [r(d, z), 0.1 * r(z), 1.0 + 0.1 * r(z), 0.1 * r(z), 1.0 + 0.1 * r(z), 0.1 * r(z),
            r(d, v), 0.1 * r(v), r(d, v), 0.1 * r(v), r(d, d), r(v, d), 0.1 * r(d)]
    cp = random_cema_params(d, h, g)
    cema = [cp.alpha_raw, cp.delta_raw, cp.beta, cp.eta_re, cp.eta_im, cp.omega]
    x = torch.randn(n, d, generator=g, dtype=F64)
    w = torch.randn(n, d, generator=g, dtype=F64)

    def loss(ts):
        xx = ts[0]
        ap = AttentionParams(*ts[1:14], heads=heads)
        cps = CemaParams(*ts[14:])
        out, _, _ = gated_attention_sublayer(xx, ap, cps, chunk_c=c, cema_mode="fft")
        return (w * out).sum()

    return gradient_error(loss, [x] + attn + cema)


def _gradcheck_model(seed: int) -> float:
    cfg = small_config()
    model = MegalodonLM(cfg, seed=seed).double().train()
    g = torch.Generator().manual_seed(seed)
    tokens = torch.randint(0, 256, (2, 10), generator=g)
    targets = torch.randint(0, 256, (2, 10), generator=g)
    # perturb the zero-initialised norm affines so their gradients are generic
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("gamma") or name.endswith("beta"):
                p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=F64))

    names = [n for n, _ in model.named_parameters()]

    def loss(ts):
        logits, _ = functional_call(model, dict(zip(names, ts)), (tokens,))
        return nn.functional.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))

    return gradient_error(loss, [p for _, p in model.named_parameters()])


def check_gradients(seed: int = 5) -> CheckResult:
    g = torch.Generator().manual_seed(seed)
    errs = {
        "cema": _gradcheck_cema(g),
        "timestep_norm": _gradcheck_norm(g),
        "attention": _gradcheck_attention(g),
        "model": _gradcheck_model(seed),
    }
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    return CheckResult("gradients vs central differences", worst < 1e-4, detail)


class _StubAttention(nn.Module):
    def __init__(self, value: torch.Tensor):
        super().__init__()
        self.value = value

    def forward(self, x, cema_state=None, kv_cache=None):
        return self.value.expand_as(x), cema_state, kv_cache


class _ZeroFFN(nn.Module):
    def forward(self, x):
        return torch.zeros_like(x)


def two_hop_residual_probe(two_hop: bool, seed: int = 6) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Run one layer with attention stubbed to a constant ``A`` and the FFN stubbed to 0.

    Returns ``(X, A, Y)``: two-hop wiring gives ``Y == X``, plain pre-norm ``Y == X + A``.
    """
    layer = MegalodonLayer(small_config(n_layers=1, two_hop=two_hop)).double()
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(6, 8, generator=g, dtype=F64)
    a = torch.randn(8, generator=g, dtype=F64)
    layer.attention = _StubAttention(a)
    layer.ffn = _ZeroFFN()
    with torch.no_grad():
        y, _ = layer(x)
    return x, a, y


def check_two_hop() -> CheckResult:
    x, a, y = two_hop_residual_probe(True)
    x2, a2, y2 = two_hop_residual_probe(False)
    ok = torch.equal(y, x) and not torch.equal(y, x + a) and torch.equal(y2, x2 + a2)
    return CheckResult("two-hop second residual is X", ok,
                       f"|Y-X|={float((y - x).abs().max()):.1e}, plain |Y-X|={float((y2 - x2).abs().max()):.1e}")


def decay_only_scales(steps: int = 500, lr: float = 1e-2, weight_decay: float = 0.1, seed: int = 7):
    """AdamW with zero gradients applied to a stored offset ``gamma``.

    Returns the min/max effective scale ``gamma + 1`` over the run, and the
    final scale a directly-stored scale (initialised at 1) would reach.
    """
    g = torch.Generator().manual_seed(seed)
    gamma = 0.02 * torch.randn(16, generator=g, dtype=F64)
    direct = torch.ones(16, dtype=F64)
    cfg = TrainConfig(learning_rate=lr, weight_decay=weight_decay, warmup_steps=0, total_steps=steps,
                      batch_size_tokens=1, seq_len=1)
    moments = ([torch.zeros(16, dtype=F64), torch.zeros(16, dtype=F64)],
               [torch.zeros(16, dtype=F64), torch.zeros(16, dtype=F64)])
    lo, hi = float((gamma + 1).min()), float((gamma + 1).max())
    zero = torch.zeros(16, dtype=F64)
    for step in range(1, steps + 1):
        adamw_step([gamma, direct], [zero, zero], moments, cfg, step, lr)
        lo, hi = min(lo, float((gamma + 1).min())), max(hi, float((gamma + 1).max()))
    return lo, hi, float(direct.mean())


def check_plus_one(seed: int = 8) -> CheckResult:
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(3, 20, 8, generator=g, dtype=F64)
    aff = NormAffine.identity(8)
    ts_a, _ = timestep_norm(x, 2, affine=aff)
    ts_b, _ = timestep_norm(x, 2)
    ln_a = layer_norm_plus1(x, aff)
    ln_b = layer_norm_plus1(x)
    exact = torch.equal(ts_a, ts_b) and torch.equal(ln_a, ln_b)
    lo, hi, direct = decay_only_scales()
    ok = exact and 0.9 < lo and hi < 1.1
    return CheckResult("plus-1 scale: exact at 0, stays near 1 under decay", ok,
                       f"bit-exact={exact}, scale range [{lo:.4f}, {hi:.4f}], direct scale -> {direct:.3f}")


ALL_CHECKS = [
    check_cema_dual_path,
    check_cema_real_reduction,
    check_timestep_norm,
    check_causality,
    check_streaming,
    check_gradients,
    check_two_hop,
    check_plus_one,
]


def run_all(out=print) -> bool:
    ok = True
    for check in ALL_CHECKS:
        try:
            res = check()
        except Exception as exc:  # report and keep going
            res = CheckResult(check.__name__, False, f"raised {type(exc).__name__}: {exc}")
        out(res.line())
        ok &= res.passed
    return ok
