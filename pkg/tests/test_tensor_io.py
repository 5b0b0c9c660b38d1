from pathlib import Path

import numpy as np
import pytest

from mtplab.errors import CheckpointError, ShapeError
from mtplab.tensorcore import Rng, Tensor
from mtplab.tensorcore.tensor import (
    container_from_bytes,
    container_to_bytes,
    read_container,
    read_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
    write_container,
    write_tensor,
)


def test_shape_data_invariant():
    t = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == (2, 2)
    assert t.size == 4


def test_rejects_nonfinite_and_nonpositive_dims():
    with pytest.raises(ShapeError):
        Tensor([np.nan, 1.0])
    with pytest.raises(ShapeError):
        Tensor([np.inf])
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 0)))


def test_tnsr1_round_trip_bits():
    rng = Rng(3)
    for shape in [(4,), (2, 3), (2, 3, 4), ()]:
        t = Tensor._wrap(rng.normals(shape)) if shape else Tensor(1.25)
        blob = tensor_to_bytes(t)
        back, end = tensor_from_bytes(blob)
        assert end == len(blob)
        assert back.bitwise_equal(t)


def test_tnsr1_header_layout():
    blob = tensor_to_bytes(Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    assert blob.startswith(b"TNSR1\n2\n2 3\n")
    assert len(blob) == len(b"TNSR1\n2\n2 3\n") + 6 * 8


def test_corrupt_magic_names_offset():
    with pytest.raises(CheckpointError, match="offset 0"):
        tensor_from_bytes(b"BOGUS\nxx")


def test_truncated_payload_errors():
    blob = tensor_to_bytes(Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(CheckpointError, match="truncated"):
        tensor_from_bytes(blob[:-4])


def test_file_round_trip(tmp_path):
    t = Tensor._wrap(Rng(8).normals((3, 5)))
    p = tmp_path / "x.tnsr"
    write_tensor(p, t)
    assert read_tensor(p).bitwise_equal(t)


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "x.tnsr"
    p.write_bytes(tensor_to_bytes(Tensor([1.0])) + b"junk")
    with pytest.raises(CheckpointError, match="trailing"):
        read_tensor(p)


def test_container_round_trip(tmp_path):
    rng = Rng(5)
    entries = {
        "layer01.attn.qkv.weight": Tensor._wrap(rng.normals((6, 2))),
        "heads.s1.sem.lvl1.bias": Tensor._wrap(rng.normals((4,))),
    }
    p = tmp_path / "c.tnsr"
    write_container(p, entries)
    back = read_container(p)
    assert list(back) == list(entries)
    for k in entries:
        assert back[k].bitwise_equal(entries[k])


def test_golden_tensor_file_bytes_are_stable():
    golden = Path(__file__).parent / "data" / "golden_2x3.tnsr"
    t = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3) * 0.5 - 1.0)
    assert tensor_to_bytes(t) == golden.read_bytes()
    assert read_tensor(golden).bitwise_equal(t)


def test_container_corrupt_and_duplicates():
    with pytest.raises(CheckpointError, match="magic"):
        container_from_bytes(b"NOPE\n")
    blob = container_to_bytes({"a": Tensor([1.0])})
    # duplicate entry: rewrite count to 2 and append the same entry again
    body = blob[len(b"TNSR1C\n1\n") :]
    doubled = b"TNSR1C\n2\n" + body + body
    with pytest.raises(CheckpointError, match="duplicate"):
        container_from_bytes(doubled)
