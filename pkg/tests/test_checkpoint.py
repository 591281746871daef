import struct

import numpy as np
import pytest

from pace import checkpoint
from pace.errors import ParseError


def test_hand_built_layout():
    blob = checkpoint.dumps({"w": np.array([[1.0, 2.0]])})
    expected = (
        b"PACT"
        + struct.pack("<I", 1)
        + struct.pack("<I", 1) + b"w"
        + struct.pack("<I", 2) + struct.pack("<2Q", 1, 2)
        + struct.pack("<2d", 1.0, 2.0)
    )
    assert blob == expected


def test_round_trip_with_config(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(3, 4)), "scalar": np.array(2.5), "empty": np.zeros((0, 3)), "ünï": rng.normal(size=5)}
    path = tmp_path / "m.pact"
    checkpoint.save(path, tensors, {"K": 3, "mode": "concat"})
    back, cfg = checkpoint.load(path)
    assert cfg == {"K": 3, "mode": "concat"}
    assert set(back) == set(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_no_config():
    _, cfg = checkpoint.loads(checkpoint.dumps({"x": np.ones(2)}))
    assert cfg is None


@pytest.mark.parametrize(
    "blob",
    [b"NOPE" + struct.pack("<I", 1), b"PACT" + struct.pack("<I", 99), checkpoint.dumps({"x": np.ones(4)})[:-3]],
    ids=["magic", "version", "truncated"],
)
def test_bad_files(blob):
    with pytest.raises(ParseError):
        checkpoint.loads(blob)
