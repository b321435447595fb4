import numpy as np
import pytest

from fedsynth.container import ArchiveError, floats_from_payload, read_archive, write_archive


def test_roundtrip(tmp_path):
    path = tmp_path / "x.bin"
    arrays = [np.arange(6, dtype=np.float32).reshape(2, 3), np.array([1.5], dtype=np.float32)]
    payload = write_archive(path, "demo", {"count": 2, "note": "a b c"}, ["row 1", "row 2"], arrays)
    assert payload == (6 + 1) * 4

    kind, header, items, blob = read_archive(path)
    assert kind == "demo"
    assert header["count"] == "2"
    assert header["note"] == "a b c"
    assert items == ["row 1", "row 2"]
    assert len(blob) == payload
    np.testing.assert_array_equal(floats_from_payload(blob, 0, 6).reshape(2, 3), arrays[0])
    np.testing.assert_array_equal(floats_from_payload(blob, 24, 1), arrays[1])


def test_empty_archive(tmp_path):
    path = tmp_path / "empty.bin"
    assert write_archive(path, "demo", {}, [], []) == 0
    kind, header, items, blob = read_archive(path)
    assert (kind, header, items, blob) == ("demo", {}, [], b"")


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"not an archive\n#blobs\n")
    with pytest.raises(ArchiveError, match="magic"):
        read_archive(path)


def test_missing_marker(tmp_path):
    path = tmp_path / "trunc.bin"
    path.write_bytes(b"fedsynth-archive 1 demo\nkey value\n")
    with pytest.raises(ArchiveError, match="marker"):
        read_archive(path)


def test_truncated_payload():
    with pytest.raises(ArchiveError, match="truncated"):
        floats_from_payload(b"\x00" * 7, 0, 2)


def test_float32_little_endian(tmp_path):
    path = tmp_path / "le.bin"
    write_archive(path, "demo", {}, [], [np.array([1.0], dtype=np.float64)])
    _, _, _, blob = read_archive(path)
    assert blob == b"\x00\x00\x80\x3f"  # 1.0f, little-endian
