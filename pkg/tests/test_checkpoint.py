import pytest
import torch

from cityprior.checkpoint import load_checkpoint, save_checkpoint
from cityprior.errors import CheckpointError
from cityprior.selfcheck import tiny_tile


def test_roundtrip_bit_exact(tmp_path):
    t = tiny_tile(subfields=3)
    p = save_checkpoint(t, tmp_path / "a.ckpt", {"tile": 2, "note": "x"})
    back, meta = load_checkpoint(p)
    assert meta["tile"] == 2 and meta["note"] == "x"
    sa, sb = t.state_dict(), back.state_dict()
    assert sa.keys() == sb.keys()
    for k in sa:
        assert sa[k].dtype == sb[k].dtype and torch.equal(sa[k], sb[k]), k
    assert back.video_ids == t.video_ids and back.cfg == t.cfg
    assert save_checkpoint(back, tmp_path / "b.ckpt", meta).read_bytes() == p.read_bytes()


def test_bad_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    raw = save_checkpoint(tiny_tile(), tmp_path / "t.ckpt").read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.ckpt")
