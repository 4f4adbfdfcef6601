import json
import zipfile

import pytest
import torch

from ctt.checkpoint import load_checkpoint, save_checkpoint
from ctt.errors import CheckpointError


def _save(path, **kw):
    tensors = {"a": torch.arange(6.0).reshape(2, 3), "b": torch.ones(4)}
    return save_checkpoint(path, config={"x": 1}, iteration=7, tensors=tensors, blobs={"bank": b"\x01\x02"}, **kw)


def test_round_trip(tmp_path):
    _save(tmp_path / "c.ckpt", meta={"k": [1, 2]})
    ck = load_checkpoint(tmp_path / "c.ckpt")
    assert ck.iteration == 7 and ck.config == {"x": 1} and ck.manifest["meta"] == {"k": [1, 2]}
    assert torch.equal(ck.tensors["a"], torch.arange(6.0).reshape(2, 3))
    assert ck.blobs == {"bank": b"\x01\x02"}


def test_equal_states_give_equal_bytes(tmp_path):
    _save(tmp_path / "a.ckpt")
    _save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_garbage_file_rejected(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"not a zip")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_flipped_payload_byte_rejected(tmp_path):
    path = _save(tmp_path / "c.ckpt")
    data = bytearray(path.read_bytes())
    i = data.index(b"\x00\x00\x80\x3f")  # a float32 1.0 inside tensor "b"
    data[i + 3] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(path)


def _rewrite(path, manifest_edit):
    with zipfile.ZipFile(path) as zf:
        entries = {n: zf.read(n) for n in zf.namelist()}
    manifest = json.loads(entries["manifest.json"])
    manifest_edit(manifest)
    entries["manifest.json"] = json.dumps(manifest).encode()
    with zipfile.ZipFile(path, "w") as zf:
        for n, d in entries.items():
            zf.writestr(n, d)


def test_wrong_version_and_shape_rejected(tmp_path):
    path = _save(tmp_path / "c.ckpt")
    _rewrite(path, lambda m: m.update(format_version="ctt-ckpt-0"))
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(path)
    path = _save(tmp_path / "d.ckpt")
    _rewrite(path, lambda m: m["tensors"][0].update(shape=[3, 3]))
    with pytest.raises(CheckpointError, match="iteration=7"):
        load_checkpoint(path)
