import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from megalodon.cli import main

ROOT = Path(__file__).resolve().parents[1]

CFG = """# tiny run
n_layers = 1
d_model = 8
z_dim = 8
v_dim = 8
h_cema = 2
heads = 2
ffn_dim = 16
chunk_size = 16
total_steps = 4
warmup_steps = 1
batch_size_tokens = 64
seq_len = 32
log_interval = 2
"""


@pytest.fixture
def run_dir(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(CFG)
    corpus = tmp_path / "corpus.txt"
    corpus.write_bytes((ROOT / "data" / "kjv_heldout.txt").read_bytes()[:4096])
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--corpus", str(corpus), "--out", str(out)]) == 0
    return cfg, corpus, out


def test_train_writes_outputs(run_dir):
    _, _, out = run_dir
    summary = json.loads((out / "summary.json").read_text())
    assert summary["steps"] == 4
    for name in ("checkpoint.mgld", "metrics.csv", "loss_curve.png", "summary.json"):
        assert (out / name).stat().st_size > 0
    with open(out / "metrics.csv", newline="") as fh:
        assert next(csv.reader(fh)) == ["step", "tokens", "nll", "grad_norm", "lr", "wall_ms"]


def test_eval_and_generate(run_dir, capsys):
    _, corpus, out = run_dir
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(out / "checkpoint.mgld"), "--corpus", str(corpus), "--contexts", "1,16,64"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "context,nll,ppl,tokens" and len(lines) == 4
    assert (out / "ppl_by_context.csv").exists() and (out / "ppl_by_context.png").stat().st_size > 0
    assert main(["generate", "--ckpt", str(out / "checkpoint.mgld"), "--prompt", "In the", "--n", "5", "--greedy"]) == 0
    first = capsys.readouterr().out
    main(["generate", "--ckpt", str(out / "checkpoint.mgld"), "--prompt", "In the", "--n", "5", "--greedy"])
    assert capsys.readouterr().out == first


def test_errors_exit_nonzero(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "nope.mgld"), "--corpus", "x", "--contexts", "32"]) == 2
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["eval", "--ckpt", "a", "--corpus", "b", "--contexts", "a,b"])


def test_seed_env_override(run_dir, tmp_path, monkeypatch, capsys):
    cfg, corpus, _ = run_dir
    monkeypatch.setenv("MGLD_SEED", "77")
    out = tmp_path / "seeded"
    assert main(["train", "--config", str(cfg), "--corpus", str(corpus), "--out", str(out)]) == 0
    from megalodon.harness import load_configs

    assert load_configs(cfg)[1].seed == 77


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "megalodon", "--help"], capture_output=True, text=True, timeout=120)
    assert res.returncode == 0
    for cmd in ("train", "eval", "generate", "selftest"):
        assert cmd in res.stdout


def test_selftest_command(capsys):
    assert main(["selftest"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 8 and all(line.startswith("PASS") for line in lines)
