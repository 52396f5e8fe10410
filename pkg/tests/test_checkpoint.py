import struct

import numpy as np
import pytest

from mmdiff.container import MAGIC, decode_container, encode_container, read_container, write_container
from mmdiff.errors import CheckpointError
from mmdiff.model import Conditions, ModelConfig
from mmdiff.training import checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint


class TestContainer:
    def test_round_trip_float32_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b/c": np.float32(2.5).reshape(()),
                  "empty": np.zeros((0, 3), np.float32)}
        write_container(tmp_path / "x.undf", {"k": [1, 2]}, arrays)
        meta, back = read_container(tmp_path / "x.undf")
        assert meta["k"] == [1, 2] and meta["n_arrays"] == 3
        for k, v in arrays.items():
            assert back[k].dtype == np.float32 and back[k].shape == v.shape
            assert back[k].tobytes() == v.tobytes()

    def test_layout(self):
        buf = encode_container({}, {"w": np.array([1.0, 2.0], np.float32)})
        assert buf[:4] == MAGIC
        version, mlen = struct.unpack("<II", buf[4:12])
        assert version == 1
        rec = buf[12 + mlen:]
        assert struct.unpack("<I", rec[:4])[0] == 1 and rec[4:5] == b"w"
        assert struct.unpack("<II", rec[5:13]) == (1, 2)
        assert np.frombuffer(rec[13:], "<f4").tolist() == [1.0, 2.0]

    @pytest.mark.parametrize("cut", [3, 10, 20, -1, -5])
    def test_truncation_rejected(self, cut):
        buf = encode_container({"x": 1}, {"w": np.ones((2, 2), np.float32), "v": np.ones(3, np.float32)})
        with pytest.raises(CheckpointError, match="truncated|bad magic|metadata"):
            decode_container(buf[:cut])

    def test_cut_at_record_boundary_detected(self):
        two = encode_container({}, {"w": np.ones(2, np.float32), "v": np.ones(2, np.float32)})
        head_len = len(two) - (4 + 1 + 4 + 4 + 8)  # drop the whole "v" record
        with pytest.raises(CheckpointError, match="truncated"):
            decode_container(two[:head_len])

    def test_bad_magic_and_version(self):
        buf = encode_container({}, {})
        with pytest.raises(CheckpointError, match="magic"):
            decode_container(b"XXXX" + buf[4:])
        with pytest.raises(CheckpointError, match="version"):
            decode_container(buf[:4] + struct.pack("<I", 9) + buf[8:])

    def test_trailing_bytes(self):
        with pytest.raises(CheckpointError, match="trailing"):
            decode_container(encode_container({}, {}) + b"\0")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            read_container(tmp_path / "nope.undf")


class TestCheckpoint:
    def test_round_trip_forward_identical(self, tiny_fit, tiny_data, tmp_path):
        ckpt = tiny_fit.final
        save_checkpoint(ckpt, tmp_path / "c.undf")
        back = load_checkpoint(tmp_path / "c.undf")
        for k, v in ckpt.params.items():
            assert back.params[k].tobytes() == v.tobytes()
        assert back.step == ckpt.step and back.rng_state == ckpt.rng_state
        assert back.optimizer.step == ckpt.optimizer.step
        cond = Conditions.from_windows(tiny_data.val.subset([0, 1]))
        y = np.random.default_rng(0).standard_normal((2, 4, 1))
        a = ckpt.model().predict(y, 3, cond)
        b = back.model().predict(y, 3, cond)
        assert a.tobytes() == b.tobytes()

    def test_bytes_deterministic(self, tiny_fit):
        assert checkpoint_bytes(tiny_fit.best) == checkpoint_bytes(checkpoint_from_bytes(checkpoint_bytes(tiny_fit.best)))

    def test_truncated_checkpoint(self, tiny_fit, tmp_path):
        p = tmp_path / "t.undf"
        p.write_bytes(checkpoint_bytes(tiny_fit.best)[:-7])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(p)

    def test_d_model_mismatch_lists_shapes(self, tiny_fit, tmp_path):
        save_checkpoint(tiny_fit.best, tmp_path / "c.undf")
        other = ModelConfig(**{**tiny_fit.best.config["model"], "d_model": 8})
        with pytest.raises(CheckpointError, match=r"expected \(.*8.*\), got \(.*16.*\)"):
            load_checkpoint(tmp_path / "c.undf", other)

    def test_renamed_array_rejected(self, tiny_fit):
        buf = checkpoint_bytes(tiny_fit.best)
        bad = buf.replace(b"param/null.t", b"param/null.x")
        with pytest.raises(CheckpointError, match="null.t: missing"):
            checkpoint_from_bytes(bad)

    def test_non_checkpoint_container(self, tmp_path):
        write_container(tmp_path / "x.undf", {"format": "other"}, {"a": np.ones(1)})
        with pytest.raises(CheckpointError, match="not a model checkpoint"):
            load_checkpoint(tmp_path / "x.undf")
