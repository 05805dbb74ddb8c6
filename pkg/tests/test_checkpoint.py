import json
import struct

import numpy as np
import pytest

from imbtext.checkpoint import MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from imbtext.errors import CheckpointError


def ckpt():
    r = np.random.default_rng(0)
    return Checkpoint(
        {"a": r.normal(size=(3, 4)), "b": r.normal(size=(5,)), "s": np.array(0.25)},
        {"train": {"x": 1}},
        ["[PAD]", "[UNK]", "[CLS]", "é"],
        {"lbl": 0},
        7,
    )


def test_roundtrip_32bit(tmp_path):
    c = ckpt()
    save_checkpoint(c, tmp_path / "c.imb")
    back = load_checkpoint(tmp_path / "c.imb")
    ref = c.to_32bit()
    for k in c.tensors:
        assert np.array_equal(back.tensors[k], ref.tensors[k])
        assert np.abs(back.tensors[k] - c.tensors[k]).max() <= np.abs(c.tensors[k]).max() * 2**-24
    assert (back.config, back.vocab, back.label_map, back.step) == (c.config, c.vocab, c.label_map, c.step)


def test_layout(tmp_path):
    save_checkpoint(ckpt(), tmp_path / "c.imb")
    blob = (tmp_path / "c.imb").read_bytes()
    assert blob[:4] == MAGIC
    (n,) = struct.unpack("<Q", blob[4:12])
    header = json.loads(blob[12 : 12 + n])
    a = header["a"]
    assert a["dtype"] == "f32" and a["shape"] == [3, 4] and a["len"] == 48
    data = blob[12 + n :]
    first = np.frombuffer(data[a["offset"] : a["offset"] + 48], dtype="<f4")
    assert np.array_equal(first, ckpt().tensors["a"].astype("<f4").ravel())


def test_bad_magic(tmp_path):
    p = tmp_path / "c.imb"
    save_checkpoint(ckpt(), p)
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_truncated(tmp_path):
    p = tmp_path / "c.imb"
    save_checkpoint(ckpt(), p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)


def test_bad_header_json(tmp_path):
    p = tmp_path / "c.imb"
    p.write_bytes(MAGIC + struct.pack("<Q", 3) + b"{no")
    with pytest.raises(CheckpointError, match="JSON"):
        load_checkpoint(p)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.imb")
