import struct

import numpy as np
import pytest

from ravit.checkpoint import arch_mismatch, load_checkpoint, save_checkpoint
from ravit.errors import DataFormatError
from ravit.model import RavitConfig, init_ravit_params
from ravit.rng import Rng


def make_model(layers=(1, 2), seed=0):
    cfg = RavitConfig(sides=(8, 16), layers=layers, patch=4, embed_dim=8, hidden_dim=32, heads=2, num_classes=5)
    return cfg, init_ravit_params(cfg, Rng(seed))


class TestRoundTrip:
    def test_bit_exact(self, tmp_path):
        cfg, params = make_model(seed=1)
        path = tmp_path / "model.bin"
        save_checkpoint(path, cfg, params)
        loaded_cfg, loaded = load_checkpoint(path)
        assert loaded_cfg.sides == cfg.sides
        assert loaded_cfg.layers == cfg.layers
        assert loaded_cfg.embed_dim == cfg.embed_dim
        originals = dict(params.named_tensors())
        for name, tensor in loaded.named_tensors():
            assert tensor.array.tobytes() == originals[name].array.tobytes()
        # second save of the loaded state reproduces the file byte for byte
        path2 = tmp_path / "model2.bin"
        save_checkpoint(path2, loaded_cfg, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_zero_layer_branch_has_no_tensors(self, tmp_path):
        cfg, params = make_model(layers=(0, 2), seed=2)
        path = tmp_path / "model.bin"
        save_checkpoint(path, cfg, params)
        _, loaded = load_checkpoint(path)
        names = [n for n, _ in loaded.named_tensors()]
        assert names and all(n.startswith("branch1.") for n in names)

    def test_header_layout(self, tmp_path):
        cfg, params = make_model(seed=3)
        path = tmp_path / "model.bin"
        save_checkpoint(path, cfg, params)
        blob = path.read_bytes()
        assert blob[:4] == b"RAVT"
        version, branches = struct.unpack("<II", blob[4:12])
        assert version == 1 and branches == 2
        fields = struct.unpack("<6I", blob[12:36])
        assert fields == (cfg.patch, cfg.channels, cfg.embed_dim, cfg.hidden_dim, cfg.heads, cfg.num_classes)
        sides = struct.unpack("<2I", blob[36:44])
        layers = struct.unpack("<2I", blob[44:52])
        assert sides == cfg.sides and layers == cfg.layers


class TestErrors:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DataFormatError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"RAVT" + struct.pack("<I", 99) + b"\x00" * 64)
        with pytest.raises(DataFormatError, match="version"):
            load_checkpoint(path)

    def test_truncation_reports_offset(self, tmp_path):
        cfg, params = make_model(seed=4)
        path = tmp_path / "model.bin"
        save_checkpoint(path, cfg, params)
        blob = path.read_bytes()
        (tmp_path / "cut.bin").write_bytes(blob[: len(blob) - 5])
        with pytest.raises(DataFormatError, match="byte offset"):
            load_checkpoint(tmp_path / "cut.bin")

    def test_missing_tensor(self, tmp_path):
        cfg, params = make_model(seed=5)
        path = tmp_path / "model.bin"
        save_checkpoint(path, cfg, params)
        blob = path.read_bytes()
        # drop the trailing tensor record (head_b of the last branch: name
        # length + name + rank + one dim + 5 doubles)
        name = b"branch1.head_b"
        cut = blob.rindex(struct.pack("<H", len(name)) + name)
        (tmp_path / "cut.bin").write_bytes(blob[:cut])
        with pytest.raises(DataFormatError, match="missing tensor"):
            load_checkpoint(tmp_path / "cut.bin")


class TestArchMismatch:
    def test_lists_differing_fields(self):
        a = RavitConfig(sides=(8, 16), layers=(1, 2), patch=4, embed_dim=8, hidden_dim=32, heads=2, num_classes=5)
        b = RavitConfig(sides=(8, 16), layers=(1, 3), patch=4, embed_dim=16, hidden_dim=64, heads=2, num_classes=5)
        diffs = arch_mismatch(a, b)
        assert any(d.startswith("layers:") for d in diffs)
        assert any(d.startswith("embed_dim:") for d in diffs)
        assert not arch_mismatch(a, a)
