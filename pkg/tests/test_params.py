import numpy as np
import pytest

from tsdet.params import CheckpointError, ParameterSet, load_checkpoint, save_checkpoint


def _sample_params(rng):
    p = ParameterSet()
    p.add("backbone.conv1.w", rng.normal(0, 1, (4, 3, 3, 3)).astype(np.float32))
    p.add("backbone.conv1.b", rng.normal(0, 1, (4,)).astype(np.float32))
    p.add("roi.cls.w", rng.normal(0, 1, (16, 8)).astype(np.float32))
    return p


class TestParameterSet:
    def test_ordered_names(self, rng):
        p = _sample_params(rng)
        assert p.names() == ["backbone.conv1.w", "backbone.conv1.b", "roi.cls.w"]

    def test_duplicate_name_rejected(self):
        p = ParameterSet()
        p.add("w", [1.0])
        with pytest.raises(ValueError, match="duplicate"):
            p.add("w", [2.0])

    def test_clone_is_deep(self, rng):
        p = _sample_params(rng)
        q = p.clone()
        q["roi.cls.w"].data[0, 0] += 1.0
        assert p["roi.cls.w"].data[0, 0] != q["roi.cls.w"].data[0, 0]

    def test_zero_grads(self, rng):
        p = _sample_params(rng)
        p["roi.cls.w"].grad[...] = 5.0
        p.zero_grads()
        assert np.all(p["roi.cls.w"].grad == 0)

    def test_shapes_match(self, rng):
        p = _sample_params(rng)
        assert p.shapes_match(p.clone())
        q = ParameterSet()
        q.add("other", [1.0])
        assert not p.shapes_match(q)


class TestCheckpointFormat:
    def test_round_trip_bit_exact(self, rng, tmp_path):
        p = _sample_params(rng)
        path = tmp_path / "model.ckpt"
        save_checkpoint(p, path)
        q = load_checkpoint(path)
        assert q.names() == p.names()
        for name in p.names():
            assert np.array_equal(p[name].data, q[name].data)
            assert p[name].data.tobytes() == q[name].data.tobytes()

    def test_header_layout(self, rng, tmp_path):
        p = ParameterSet()
        p.add("w", np.zeros((2, 3), dtype=np.float32))
        path = tmp_path / "one.ckpt"
        save_checkpoint(p, path)
        blob = path.read_bytes()
        assert blob[:5] == b"TSDT1"
        assert int.from_bytes(blob[5:9], "little") == 1       # parameter count
        assert int.from_bytes(blob[9:11], "little") == 1      # name length
        assert blob[11:12] == b"w"
        assert blob[12] == 2                                  # rank
        dims = [int.from_bytes(blob[13 + 4 * i:17 + 4 * i], "little") for i in range(2)]
        assert dims == [2, 3]
        assert len(blob) == 13 + 8 + 4 * 6

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE!" + b"\x00" * 16)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_rejected(self, rng, tmp_path):
        p = _sample_params(rng)
        path = tmp_path / "model.ckpt"
        save_checkpoint(p, path)
        (tmp_path / "cut.ckpt").write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "cut.ckpt")

    def test_trailing_bytes_rejected(self, rng, tmp_path):
        p = _sample_params(rng)
        path = tmp_path / "model.ckpt"
        save_checkpoint(p, path)
        (tmp_path / "fat.ckpt").write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(tmp_path / "fat.ckpt")
