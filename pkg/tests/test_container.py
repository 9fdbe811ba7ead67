import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from flowinr.container import MAGIC, VERSION, ContainerError, read_container, read_manifest, write_container


def test_layout_is_magic_version_length_manifest_blobs(tmp_path):
    p = tmp_path / "c.finr"
    a = np.arange(6, dtype=np.float64).reshape(2, 3)
    write_container(p, "test", {"a": a, "i": np.array([1, 2], dtype=np.int64)}, {"note": "x"})
    raw = p.read_bytes()
    assert raw[:8] == MAGIC == b"FLOWINR\x00"
    version, mlen = struct.unpack("<IQ", raw[8:20])
    assert version == VERSION == 1
    manifest = json.loads(raw[20:20 + mlen])
    assert manifest["kind"] == "test" and manifest["meta"] == {"note": "x"}
    e = manifest["arrays"][0]
    assert e == {"name": "a", "dtype": "<f8", "shape": [2, 3], "offset": 0, "nbytes": 48}
    body = raw[20 + mlen:]
    assert len(body) == manifest["data_bytes"] == 64
    np.testing.assert_array_equal(np.frombuffer(body[:48], "<f8").reshape(2, 3), a)
    assert read_manifest(p)["kind"] == "test"


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                  elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_float_arrays_round_trip_bitwise(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("c") / "x.finr"
    write_container(p, "k", {"x": arr}, {})
    back, _ = read_container(p, kind="k")
    assert back["x"].shape == arr.shape
    assert back["x"].tobytes() == np.ascontiguousarray(arr).tobytes()


def test_errors(tmp_path):
    p = tmp_path / "c.finr"
    write_container(p, "k", {"x": np.ones(3)}, {})
    raw = p.read_bytes()
    with pytest.raises(ContainerError, match="expected"):
        read_container(p, kind="other")
    bad = tmp_path / "b.finr"
    bad.write_bytes(raw[:8] + struct.pack("<I", 2) + raw[12:])
    with pytest.raises(ContainerError, match="version"):
        read_container(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(ContainerError, match="length"):
        read_container(bad)
    bad.write_bytes(raw[:10])
    with pytest.raises(ContainerError, match="truncated"):
        read_container(bad)
    with pytest.raises(TypeError):
        write_container(tmp_path / "s.finr", "k", {"s": np.array(["a"])}, {})
