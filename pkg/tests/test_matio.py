import io

import numpy as np
import pytest

from fusionlab.errors import FormatError, ShapeError
from fusionlab import matio


def test_binary_round_trip(tmp_path):
    a = np.array([[1.5, -2.25, 3.0], [0.1, 1e-300, 7e40]])
    path = tmp_path / "a.bin"
    matio.save_matrix(path, a)
    assert np.array_equal(matio.load_matrix(path), a)


def test_binary_header_layout(tmp_path):
    path = tmp_path / "h.bin"
    matio.save_matrix(path, np.array([[1.0, 2.0]]))
    raw = path.read_bytes()
    assert raw[:4] == b"FLAB"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 2
    assert np.frombuffer(raw[12:], dtype="<f8").tolist() == [1.0, 2.0]


def test_bad_magic_names_offset():
    fh = io.BytesIO(b"JUNK" + b"\x00" * 20)
    with pytest.raises(FormatError, match="byte 0"):
        matio.read_matrix(fh)


def test_truncated_payload_names_offset():
    fh = io.BytesIO()
    matio.write_matrix(fh, np.ones((2, 2)))
    data = fh.getvalue()[:-8]
    with pytest.raises(FormatError, match="truncated payload"):
        matio.read_matrix(io.BytesIO(data))


def test_concatenated_records(tmp_path):
    mats = [np.ones((2, 3)), np.arange(4.0).reshape(2, 2), np.full((1, 1), -7.0)]
    path = tmp_path / "many.bin"
    matio.save_matrices(path, mats)
    back = matio.load_matrices(path)
    assert len(back) == 3
    for a, b in zip(mats, back):
        assert np.array_equal(a, b)


def test_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 4)) * 10.0 ** rng.integers(-12, 12, (5, 4))
    path = tmp_path / "a.csv"
    matio.save_csv(path, a)
    assert np.array_equal(matio.load_csv(path), a)


def test_entries_csv_round_trip(tmp_path):
    a = np.array([[0.5, 0.25], [1e-17, -3.0]])
    b = np.eye(2)
    path = tmp_path / "records.csv"
    matio.save_entries_csv(path, [(1, a), (2, b)])
    back = matio.load_entries_csv(path)
    assert np.array_equal(back[1], a)
    assert np.array_equal(back[2], b)


def test_as_matrix_rejects_bad_input():
    with pytest.raises(ShapeError):
        matio.as_matrix(np.ones(3))
    with pytest.raises(ShapeError):
        matio.as_matrix(np.array([[np.nan, 1.0]]))
