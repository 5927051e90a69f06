import struct

import numpy as np
import pytest

from apnlab import checkpoint
from apnlab.checkpoint import CheckpointError


@pytest.fixture
def tensors(rng):
    return {
        "stage0.block0.conv.weight": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "scalar": np.array(2.5),
        "opt.step": np.array([7], dtype=np.int64),
        "mask": np.array([[1, 0], [0, 1]], dtype=np.uint8),
        "empty": np.zeros((0, 3)),
    }


def test_round_trip_is_exact(tensors, tmp_path):
    path = tmp_path / "c.bin"
    checkpoint.save(path, tensors)
    back = checkpoint.load(path)
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)


def test_layout_is_documented_format():
    blob = checkpoint.dumps({"ab": np.array([1.0, 2.0], dtype=np.float64)})
    assert blob[:8] == b"APNLAB\x00\x01"
    assert blob[8] == 1
    (count,) = struct.unpack_from("<I", blob, 9)
    assert count == 1
    (name_len,) = struct.unpack_from("<H", blob, 13)
    assert blob[15:17] == b"ab"
    assert (blob[17], blob[18]) == (1, 1)  # dtype tag f64, rank 1
    assert struct.unpack_from("<I", blob, 19) == (2,)
    assert struct.unpack_from("<2d", blob, 23) == (1.0, 2.0)
    assert len(blob) == 23 + 16 and name_len == 2


def test_dumps_is_deterministic(tensors):
    assert checkpoint.dumps(tensors) == checkpoint.dumps(dict(tensors))


@pytest.mark.parametrize("blob", [b"", b"NOTMAGIC\x01", b"APNLAB\x00\x01\x09\x00\x00\x00\x00"])
def test_corrupt_headers_rejected(blob):
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob)


def test_truncated_payload_rejected(tensors):
    blob = checkpoint.dumps(tensors)
    with pytest.raises(CheckpointError):
        checkpoint.loads(blob[:-5])


def test_unsupported_dtype_rejected():
    with pytest.raises(CheckpointError):
        checkpoint.dumps({"c": np.array([1 + 2j])})
