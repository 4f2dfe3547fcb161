import json
import struct

import numpy as np
import pytest
import torch

from megalodon.checkpoint import CheckpointError, load_checkpoint, save_checkpoint


def parse_independently(raw: bytes):
    assert raw[:4] == b"MGLD"
    version = int.from_bytes(raw[4:8], "little")
    hlen = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16 : 16 + hlen])
    return version, header, raw[16 + hlen :]


def test_roundtrip_and_layout(tmp_path, gen):
    tensors = {
        "a": torch.randn(3, 4, generator=gen, dtype=torch.float64),
        "b": torch.randn(5, generator=gen).float(),
        "c": torch.arange(6).reshape(2, 3),
        "scalar": torch.tensor(2.5, dtype=torch.float64),
    }
    path = tmp_path / "x.mgld"
    save_checkpoint(path, tensors, {"step": "7"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"step": "7"}
    for k, v in tensors.items():
        assert loaded[k].dtype == v.dtype and torch.equal(loaded[k], v)

    version, header, payload = parse_independently(path.read_bytes())
    assert version == 1
    info = header["a"]
    assert info["dtype"] == "F64" and info["shape"] == [3, 4]
    vals = struct.unpack_from("<12d", payload, info["offset"])
    assert np.array_equal(np.array(vals).reshape(3, 4), tensors["a"].numpy())
    info = header["c"]
    assert struct.unpack_from("<6q", payload, info["offset"]) == tuple(range(6))
    assert header["b"]["dtype"] == "F32"


def test_errors(tmp_path):
    bad = tmp_path / "bad.mgld"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    good = tmp_path / "good.mgld"
    save_checkpoint(good, {"a": torch.zeros(100, dtype=torch.float64)})
    raw = good.read_bytes()
    (tmp_path / "short.mgld").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="past end"):
        load_checkpoint(tmp_path / "short.mgld")
    (tmp_path / "v2.mgld").write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v2.mgld")
    with pytest.raises(CheckpointError, match="unsupported dtype"):
        save_checkpoint(tmp_path / "h.mgld", {"h": torch.zeros(2, dtype=torch.float16)})
    with pytest.raises(CheckpointError, match="reserved"):
        save_checkpoint(tmp_path / "r.mgld", {"__metadata__": torch.zeros(1)})
