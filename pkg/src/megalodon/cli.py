"""Command line entry point: ``train``, ``eval``, ``generate`` and ``selftest``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness


def _contexts(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad context list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty context list")
    return values


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="megalodon", description="Byte-level Megalodon toy model tools")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model, writing checkpoint, metrics.csv and loss_curve.png")
    tr.add_argument("--config", required=True)
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--heldout", default=None, help="optional held-out file scored after training")

    ev = sub.add_parser("eval", help="perplexity by context length")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--contexts", type=_contexts, default=[32, 256, 2048])
    ev.add_argument("--out", default=None, help="directory for ppl_by_context.csv/.png (default: next to ckpt)")

    ge = sub.add_parser("generate", help="decode bytes after a prompt")
    ge.add_argument("--ckpt", required=True)
    ge.add_argument("--prompt", required=True)
    ge.add_argument("--n", type=int, required=True)
    ge.add_argument("--greedy", action="store_true")
    ge.add_argument("--temperature", type=float, default=1.0)
    ge.add_argument("--seed", type=int, default=0)

    sub.add_parser("selftest", help="run the oracle and equivalence checks")
    return ap


def cmd_train(args) -> int:
    mcfg, tcfg = harness.load_configs(args.config)
    res = harness.train(mcfg, tcfg, args.corpus, args.out, heldout_path=args.heldout)
    print(json.dumps({
        "steps": res.steps, "final_train_nll": res.final_train_nll, "heldout_nll": res.heldout_nll,
        "unigram_entropy": res.unigram_entropy, "checkpoint": res.checkpoint, "metrics": res.metrics_csv,
    }))
    return 0


def cmd_eval(args) -> int:
    rows = harness.eval_ppl_by_context(args.ckpt, args.corpus, args.contexts)
    out = Path(args.out) if args.out else Path(args.ckpt).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    harness.write_ppl_table(rows, out / "ppl_by_context.csv")
    from .report import plot_ppl_by_context

    plot_ppl_by_context(rows, out / "ppl_by_context.png")
    print("context,nll,ppl,tokens")
    for r in rows:
        print(f"{r.context},{r.nll:.6f},{r.ppl:.6f},{r.tokens}")
    return 0


def cmd_generate(args) -> int:
    text = harness.generate(args.ckpt, args.prompt.encode("utf-8"), args.n, greedy=args.greedy,
                            temperature=args.temperature, seed=args.seed)
    sys.stdout.write(text.decode("utf-8", errors="replace") + "\n")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return 0 if run_all() else 1


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "generate": cmd_generate, "selftest": cmd_selftest}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
