import struct
from pathlib import Path

import numpy as np
import pytest

from potquant.errors import FormatError
from potquant.tensor import GroupLayout, Tensor, iter_groups, read_tensor, tensor_from_bytes, tensor_to_bytes, write_tensor


@pytest.mark.parametrize(
    "shape, G, lengths",
    [((4, 2), 2, [2, 2, 2, 2]), ((5, 1), 2, [2, 2, 1]), ((128, 1), 128, [128])],
)
def test_iter_groups_counts(shape, G, lengths):
    w = np.arange(np.prod(shape), dtype=float).reshape(shape)
    groups = list(iter_groups(w, GroupLayout(*shape, G)))
    assert [len(v) for _, _, v in groups] == lengths


def test_iter_groups_partitions_indices(rng):
    d_out, d_in, G = 13, 4, 5
    w = np.arange(d_out * d_in, dtype=float).reshape(d_out, d_in)
    seen = []
    order = []
    for g, j, vec in iter_groups(Tensor(w), GroupLayout(d_out, d_in, G)):
        order.append((j, g))
        seen.extend(vec.tolist())
    assert sorted(seen) == sorted(w.ravel().tolist())
    assert order == sorted(order)


def test_scale_sharing_rule():
    lay = GroupLayout(10, 3, 4)
    grid = np.arange(lay.groups_per_column * 3, dtype=float).reshape(-1, 3)
    full = lay.expand(grid)
    for i in range(10):
        for k in range(10):
            same = (full[i] == full[k]).all()
            assert same == (i // 4 == k // 4)


def test_layout_validation():
    with pytest.raises(ValueError):
        GroupLayout(4, 4, 0)
    with pytest.raises(ValueError):
        list(iter_groups(np.zeros((3, 3)), GroupLayout(4, 3, 2)))


@pytest.mark.parametrize("dtype", ["f32", "f16"])
def test_roundtrip_bit_exact(tmp_path, rng, dtype):
    t = Tensor(rng.normal(size=(7, 3, 5)), dtype)
    write_tensor(tmp_path / "a.pten", t)
    back = read_tensor(tmp_path / "a.pten")
    assert back.dtype == dtype and back.dims == (7, 3, 5)
    assert back.data.tobytes() == t.data.tobytes()
    assert tensor_to_bytes(back) == (tmp_path / "a.pten").read_bytes()


def test_header_layout():
    buf = tensor_to_bytes(Tensor(np.ones((2, 3)), "f16"))
    assert buf[:4] == bytes.fromhex("5054454E")
    assert struct.unpack_from("<HBBI2Q", buf, 4) == (1, 1, 0, 2, 2, 3)
    assert buf[28:30] == b"\x00\x3c"


def test_empty_dims_rejected():
    with pytest.raises(ValueError):
        Tensor(np.float32(1.0))
    buf = b"PTEN" + struct.pack("<HBBI", 1, 0, 0, 0)
    with pytest.raises(FormatError, match="empty dims"):
        tensor_from_bytes(buf)


@pytest.mark.parametrize(
    "mutate, msg",
    [
        (lambda b: b"XTEN" + b[4:], "bad magic"),
        (lambda b: b[:-1], "truncated payload"),
        (lambda b: b[:6] + b"\x07" + b[7:], "unknown dtype"),
        (lambda b: b[:8], "truncated header"),
    ],
)
def test_corrupt_files(mutate, msg):
    buf = tensor_to_bytes(Tensor(np.ones((2, 2))))
    with pytest.raises(FormatError, match=msg):
        tensor_from_bytes(mutate(buf))


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        Tensor(np.array([1.0, np.inf]))


DATA = Path(__file__).parent / "data"

# hand-assembled: header fields then little-endian payload
GOLDEN_F32 = (
    "5054454e" "0100" "00" "00" "02000000" "0200000000000000" "0300000000000000"
    "00000000" "0000003f" "000080bf" "0000c03f" "000000c0" "0000803e"
)
GOLDEN_F16 = "5054454e" "0100" "01" "00" "01000000" "0300000000000000" "003c" "00c0" "0038"


@pytest.mark.parametrize(
    "name, hexstr, tensor",
    [
        ("golden_f32.pten", GOLDEN_F32, Tensor(np.array([[0.0, 0.5, -1.0], [1.5, -2.0, 0.25]]), "f32")),
        ("golden_f16.pten", GOLDEN_F16, Tensor(np.array([1.0, -2.0, 0.5]), "f16")),
    ],
    ids=["f32", "f16"],
)
def test_golden_files(name, hexstr, tensor):
    stored = (DATA / name).read_bytes()
    assert stored.hex() == hexstr
    assert tensor_to_bytes(tensor) == stored
    back = tensor_from_bytes(stored)
    assert back.dtype == tensor.dtype
    assert np.array_equal(back.data, tensor.data)
