import json
import struct

import numpy as np
import pytest

from mpqlab import checkpoint as ck
from mpqlab.model import ModelConfig, evaluate, init_model
from mpqlab.quantizer import quantize_model

from oracles import random_batch


@pytest.fixture
def model():
    return init_model(ModelConfig(n_blocks=2), 0)


class TestRoundTrip:
    def test_weights_identical(self, model):
        back, quant = ck.loads(ck.dumps(model))
        assert quant is None and back.config == model.config
        for k, v in model.params.items():
            np.testing.assert_array_equal(back.params[k], v)

    def test_layout(self, model):
        data = ck.dumps(model)
        assert data[:4] == b"MPQ1"
        (n,) = struct.unpack("<I", data[4:8])
        header = json.loads(data[8 : 8 + n])
        manifest = header["manifest"]
        assert [e["offset"] for e in manifest] == sorted(e["offset"] for e in manifest)
        qkv = next(e for e in manifest if e["name"] == "blocks.1.qkv.weight")
        assert qkv["layer_id"] == 4 and qkv["kind"] == "qkv" and qkv["shape"] == [24, 8]
        start = 8 + n + qkv["offset"]
        blob = np.frombuffer(data[start : start + 8 * 24 * 8], dtype="<f8").reshape(24, 8)
        np.testing.assert_array_equal(blob, model.params["blocks.1.qkv.weight"])
        assert len(data) == 8 + n + sum(8 * int(np.prod(e["shape"])) for e in manifest)

    def test_quantized_export(self, model, tmp_path):
        calib = random_batch(model, 32)
        q = quantize_model(model, [3, 4, 2, 3, 4, 4, 2, 2], calib)
        path = tmp_path / "q.mpq"
        ck.save(path, model, q)
        q2 = ck.load_quantized(path)
        assert q2.allocation() == q.allocation()
        for i in range(model.num_layers):
            np.testing.assert_array_equal(q2.weight(i), q.weight(i))
            assert q2.act_params(i) == q.act_params(i)
        assert evaluate(q2.base, calib, q2) == evaluate(model, calib, q)


class TestRejection:
    def test_bad_magic(self, model):
        with pytest.raises(ck.CheckpointError, match="magic"):
            ck.loads(b"MPQ2" + ck.dumps(model)[4:])

    def test_truncated_blob(self, model):
        with pytest.raises(ck.CheckpointError, match="truncated"):
            ck.loads(ck.dumps(model)[:-1])

    def test_truncated_header(self, model):
        with pytest.raises(ck.CheckpointError):
            ck.loads(ck.dumps(model)[:20])

    def test_plain_checkpoint_has_no_quant(self, model, tmp_path):
        ck.save(tmp_path / "m.mpq", model)
        with pytest.raises(ck.CheckpointError):
            ck.load_quantized(tmp_path / "m.mpq")
