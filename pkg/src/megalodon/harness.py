"""Training, evaluation and generation for the byte-level model."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from collections import Counter
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .block import BOS, MegalodonLM, ModelConfig, StreamState, chunk_tokens, stream_forward
from .checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

IGNORE = -100
METRICS_HEADER = ["step", "tokens", "nll", "grad_norm", "lr", "wall_ms"]


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    warmup_steps: int = 100
    total_steps: int = 2000
    batch_size_tokens: int = 4096
    seq_len: int = 512
    seed: int = 0
    precision: int = 32
    log_interval: int = 10
    ckpt_interval: int = 500

    def __post_init__(self):
        for f in ("learning_rate", "beta1", "beta2", "adam_eps", "grad_clip", "batch_size_tokens", "seq_len",
                  "log_interval", "ckpt_interval"):
            if not getattr(self, f) > 0:
                raise ConfigError(f"{f} must be positive")
        if self.weight_decay < 0 or self.warmup_steps < 0 or self.total_steps < 0:
            raise ConfigError("weight_decay, warmup_steps and total_steps must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.batch_size_tokens < self.seq_len:
            raise ConfigError("batch_size_tokens must hold at least one sequence")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == 64 else torch.float32

    @property
    def batch_size(self) -> int:
        return self.batch_size_tokens // self.seq_len


@dataclass
class MetricsRecord:
    step: int
    tokens: int
    nll: float
    grad_norm: float
    lr: float
    wall_ms: float

    def row(self) -> list[str]:
        return [str(self.step), str(self.tokens), repr(self.nll), repr(self.grad_norm), repr(self.lr), f"{self.wall_ms:.1f}"]


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------


def _coerce(value: str):
    low = value.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = _coerce(value)
    return out


def load_configs(path: str | os.PathLike | None, env: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    env = os.environ if env is None else env
    if env.get("MGLD_SEED"):
        values["seed"] = int(env["MGLD_SEED"])
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(values) - model_keys - train_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    mcfg = ModelConfig.from_dict({k: v for k, v in values.items() if k in model_keys})
    tvals = {}
    for f in fields(TrainConfig):
        if f.name in values:
            tvals[f.name] = type(getattr(TrainConfig, f.name))(values[f.name])
    return mcfg, TrainConfig(**tvals)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


class ByteCorpus:
    """Non-overlapping ``seq_len``-byte windows over a file.

    Window ``w`` predicts bytes ``[w*L, (w+1)*L)``; its input is BOS followed
    by all but the last of those bytes. A short final window is padded and
    its padded targets are ignored.
    """

    def __init__(self, data: bytes, seq_len: int):
        if not data:
            raise ValueError("empty corpus")
        self.data = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
        self.seq_len = seq_len

    @classmethod
    def from_path(cls, path: str | os.PathLike, seq_len: int) -> "ByteCorpus":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise ValueError(f"cannot read corpus {path}: {exc}") from exc
        if not data:
            raise ValueError(f"empty corpus: {path}")
        return cls(data, seq_len)

    def __len__(self) -> int:
        return -(-len(self.data) // self.seq_len)

    def window(self, w: int) -> tuple[np.ndarray, np.ndarray]:
        L = self.seq_len
        tgt = np.full(L, IGNORE, dtype=np.int64)
        chunk = self.data[w * L : (w + 1) * L]
        tgt[: len(chunk)] = chunk
        inp = np.full(L, BOS, dtype=np.int64)
        inp[1 : len(chunk)] = chunk[:-1]
        return inp, tgt

    def batches(self, batch_size: int, seed: int) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        """Endless stream of ``(inputs, targets)``, reshuffled each epoch."""
        if len(self) < batch_size:
            raise ValueError(f"corpus has {len(self)} windows, fewer than one batch of {batch_size}")
        epoch = 0
        while True:
            order = np.random.default_rng([seed, epoch]).permutation(len(self))
            for i in range(0, len(order) - batch_size + 1, batch_size):
                pairs = [self.window(int(w)) for w in order[i : i + batch_size]]
                yield (torch.from_numpy(np.stack([p[0] for p in pairs])),
                       torch.from_numpy(np.stack([p[1] for p in pairs])))
            epoch += 1


def ingest_corpus(path, seq_len: int, seed: int, batch_size: int = 1) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    return ByteCorpus.from_path(path, seq_len).batches(batch_size, seed)


def unigram_entropy(data: bytes) -> float:
    """Order-0 byte entropy in nats."""
    counts = np.array(list(Counter(data).values()), dtype=np.float64)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to 10% of it at ``total_steps``."""
    peak, floor = cfg.learning_rate, 0.1 * cfg.learning_rate
    if cfg.warmup_steps and step <= cfg.warmup_steps:
        return peak * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    progress = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """AdamW with bias correction, decoupled decay and global-norm clipping."""

    def __init__(self, named_params: Sequence[tuple[str, torch.Tensor]], cfg: TrainConfig):
        self.params = list(named_params)
        self.cfg = cfg
        self.m = [torch.zeros_like(p) for _, p in self.params]
        self.v = [torch.zeros_like(p) for _, p in self.params]
        self.t = 0

    @torch.no_grad()
    def step(self, lr: float | None = None) -> float:
        grads = []
        for name, p in self.params:
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if not bool(torch.isfinite(g).all()):
                raise FloatingPointError(f"non-finite gradient in {name}")
            grads.append(g)
        self.t += 1
        lr = lr_at(self.t, self.cfg) if lr is None else lr
        return adamw_step([p for _, p in self.params], grads, (self.m, self.v), self.cfg, self.t, lr)


@torch.no_grad()
def adamw_step(params, grads, moments, cfg: TrainConfig, step: int, lr: float) -> float:
    """In-place AdamW update; returns the pre-clipping global gradient norm."""
    m_list, v_list = moments
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
    bc1 = 1.0 - cfg.beta1**step
    bc2 = 1.0 - cfg.beta2**step
    for p, g, m, v in zip(params, grads, m_list, v_list):
        g = g * scale
        p.mul_(1.0 - lr * cfg.weight_decay)
        m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
        denom = (v / bc2).sqrt_().add_(cfg.adam_eps)
        p.addcdiv_(m / bc1, denom, value=-lr)
    return norm


# --------------------------------------------------------------------------
# checkpoints of whole models
# --------------------------------------------------------------------------


def save_model(path, model: MegalodonLM, extra: dict | None = None) -> None:
    meta = {"model_config": json.dumps(model.cfg.to_dict())}
    if extra:
        meta.update({k: str(v) for k, v in extra.items()})
    save_checkpoint(path, dict(model.state_dict()), meta)


def load_model(path) -> MegalodonLM:
    tensors, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(json.loads(meta["model_config"]))
    model = MegalodonLM(cfg)
    dtype = next(iter(tensors.values())).dtype
    model.to(dtype)
    model.load_state_dict(tensors)
    model.eval()
    return model


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    steps: int
    final_train_nll: float
    heldout_nll: float | None
    unigram_entropy: float
    checkpoint: str
    metrics_csv: str


def loss_on_batch(model: MegalodonLM, inputs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    logits, _ = model(inputs)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus_path,
    out_dir,
    heldout_path=None,
    figures: bool = True,
) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(train_cfg.seed)
    model = MegalodonLM(model_cfg, seed=train_cfg.seed).to(train_cfg.dtype)
    corpus = ByteCorpus.from_path(corpus_path, train_cfg.seq_len)
    entropy = unigram_entropy(corpus.data.astype(np.uint8).tobytes())
    batches = corpus.batches(train_cfg.batch_size, train_cfg.seed)
    opt = AdamW(list(model.named_parameters()), train_cfg)
    ckpt = out / "checkpoint.mgld"
    save_model(ckpt, model, {"step": 0})

    metrics_path = out / "metrics.csv"
    records: list[MetricsRecord] = []
    tokens_seen = 0
    last_nll = float("nan")
    t0 = time.perf_counter()
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for step in range(1, train_cfg.total_steps + 1):
            model.train()
            inputs, targets = next(batches)
            loss = loss_on_batch(model, inputs, targets)
            last_nll = float(loss.detach())
            if not math.isfinite(last_nll):
                raise TrainingDiverged(f"loss became {last_nll} at step {step}; last good checkpoint: {ckpt}")
            model.zero_grad(set_to_none=True)
            loss.backward()
            lr = lr_at(step, train_cfg)
            gnorm = opt.step(lr)
            tokens_seen += int((targets != IGNORE).sum())
            if step % train_cfg.log_interval == 0 or step == train_cfg.total_steps or step == 1:
                rec = MetricsRecord(step, tokens_seen, last_nll, gnorm, lr, 1000.0 * (time.perf_counter() - t0))
                records.append(rec)
                writer.writerow(rec.row())
                fh.flush()
                log.info("step %d nll %.4f gnorm %.3f lr %.2e", step, last_nll, gnorm, lr)
            if step % train_cfg.ckpt_interval == 0:
                save_model(ckpt, model, {"step": step})
    save_model(ckpt, model, {"step": train_cfg.total_steps})
    wall = time.perf_counter() - t0

    heldout = None
    if heldout_path is not None:
        heldout = evaluate_nll(model, heldout_path, train_cfg.seq_len)
    summary = {
        "steps": train_cfg.total_steps,
        "final_train_nll": last_nll,
        "heldout_nll": heldout,
        "unigram_entropy": entropy,
        "wall_seconds": wall,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    if figures and records:
        from .report import plot_training_curve

        plot_training_curve(records, entropy, out / "loss_curve.png")
    return TrainResult(train_cfg.total_steps, last_nll, heldout, entropy, str(ckpt), str(metrics_path))


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricsRecord(int(r["step"]), int(r["tokens"]), float(r["nll"]), float(r["grad_norm"]),
                          float(r["lr"]), float(r["wall_ms"])) for r in rows]


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def _window_batches(data: np.ndarray, context: int, max_tokens: int):
    n_windows = len(data) // context
    per_batch = max(1, max_tokens // context)
    for start in range(0, n_windows, per_batch):
        stop = min(n_windows, start + per_batch)
        tgt = data[start * context : stop * context].reshape(stop - start, context)
        inp = np.concatenate([np.full((stop - start, 1), BOS, dtype=np.int64), tgt[:, :-1]], axis=1)
        yield torch.from_numpy(inp), torch.from_numpy(tgt)


@torch.no_grad()
def context_nll(model: MegalodonLM, data: np.ndarray, context: int, max_tokens: int = 1 << 15) -> tuple[float, int]:
    """Summed NLL and token count over consecutive ``context``-long windows, streamed chunk by chunk."""
    model.eval()
    total, count = 0.0, 0
    for inp, tgt in _window_batches(data, context, max_tokens):
        pieces = list(stream_forward(model, chunk_tokens(inp, model.cfg.chunk_size)))
        logits = torch.cat(pieces, dim=-2)
        nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]).double(), tgt.reshape(-1), reduction="sum")
        total += float(nll)
        count += tgt.numel()
    return total, count


def evaluate_nll(model: MegalodonLM, path, context: int) -> float:
    data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).astype(np.int64)
    total, count = context_nll(model, data, context)
    return total / count


@dataclass
class PplRow:
    context: int
    nll: float
    ppl: float
    tokens: int


def eval_ppl_by_context(model_or_ckpt, corpus_path, contexts: Sequence[int]) -> list[PplRow]:
    """Perplexity of the same scored bytes under several context window lengths.

    The corpus is truncated to a multiple of the longest context so every
    row scores exactly the same bytes.
    """
    model = load_model(model_or_ckpt) if not isinstance(model_or_ckpt, MegalodonLM) else model_or_ckpt
    c = model.cfg.chunk_size
    for ctx in contexts:
        if ctx < 1:
            raise ConfigError(f"context length must be >= 1, got {ctx}")
        if ctx > c and ctx % c:
            raise ConfigError(f"context {ctx} is neither <= chunk size {c} nor a multiple of it")
    data = np.frombuffer(Path(corpus_path).read_bytes(), dtype=np.uint8).astype(np.int64)
    span = max(contexts)
    usable = (len(data) // span) * span
    if usable == 0:
        raise ConfigError(f"corpus shorter than the longest context {span}")
    data = data[:usable]
    rows = []
    for ctx in contexts:
        total, count = context_nll(model, data, ctx)
        nll = total / count
        rows.append(PplRow(ctx, nll, math.exp(nll), count))
    return rows


def write_ppl_table(rows: Sequence[PplRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["context", "nll", "ppl", "tokens"])
        for r in rows:
            w.writerow([r.context, repr(r.nll), repr(r.ppl), r.tokens])


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


@torch.no_grad()
def generate(
    model_or_ckpt,
    prompt: bytes,
    n_tokens: int,
    greedy: bool = True,
    temperature: float = 1.0,
    seed: int = 0,
    return_logits: bool = False,
):
    """Decode ``n_tokens`` bytes after ``prompt`` one token at a time with carried state."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    model = load_model(model_or_ckpt) if not isinstance(model_or_ckpt, MegalodonLM) else model_or_ckpt
    model.eval()
    gen = torch.Generator()
    gen.manual_seed(seed)
    tokens = torch.tensor([BOS] + list(prompt), dtype=torch.int64)
    states: list[StreamState] = []
    last = None
    for logits in stream_forward(model, chunk_tokens(tokens, model.cfg.chunk_size), on_chunk=states.append):
        last = logits
    state = states[-1]
    out = bytearray()
    step_logits = []
    for _ in range(n_tokens):
        row = last[-1]
        step_logits.append(row.clone())
        # BOS is never emitted
        row = row[:256]
        if greedy:
            nxt = int(torch.argmax(row))
        else:
            probs = torch.softmax(row.double() / temperature, dim=-1)
            nxt = int(torch.multinomial(probs, 1, generator=gen))
        out.append(nxt)
        last, state = model(torch.tensor([nxt]), state)
    if return_logits:
        return bytes(out), torch.stack(step_logits)
    return bytes(out)

