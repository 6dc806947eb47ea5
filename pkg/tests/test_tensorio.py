import numpy as np
import pytest

from gstw import tensorio


def test_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(3,), (4, 5), (2, 3, 4), (2, 3, 4, 5, 6)]:
        a = rng.standard_normal(shape)
        path = tmp_path / "t.gstw"
        tensorio.write_tensor(path, a)
        b = tensorio.read_tensor(path)
        assert b.shape == a.shape
        assert np.array_equal(a, b)


def test_scalar_rank_zero(tmp_path):
    path = tmp_path / "s.gstw"
    tensorio.write_tensor(path, np.float64(3.5))
    assert tensorio.read_tensor(path) == 3.5


def test_corrupted_checksum_detected(tmp_path):
    path = tmp_path / "t.gstw"
    tensorio.write_tensor(path, np.arange(10.0))
    blob = bytearray(path.read_bytes())
    blob[30] ^= 0xFF  # flip a payload byte
    path.write_bytes(bytes(blob))
    with pytest.raises(tensorio.TensorFileError, match="checksum"):
        tensorio.read_tensor(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "t.gstw"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(tensorio.TensorFileError, match="magic"):
        tensorio.read_tensor(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "t.gstw"
    tensorio.write_tensor(path, np.arange(10.0))
    path.write_bytes(path.read_bytes()[:25])
    with pytest.raises(tensorio.TensorFileError):
        tensorio.read_tensor(path)


def test_deterministic_bytes(tmp_path):
    a = np.linspace(0, 1, 7).reshape(7, 1)
    p1, p2 = tmp_path / "a.gstw", tmp_path / "b.gstw"
    tensorio.write_tensor(p1, a)
    tensorio.write_tensor(p2, a.copy())
    assert p1.read_bytes() == p2.read_bytes()


def test_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    manifest = {"kind": "test", "n": 3}
    tensors = {"w1": rng.standard_normal((3, 4)), "w2": rng.standard_normal(5)}
    path = tmp_path / "b.zip"
    tensorio.write_bundle(path, manifest, tensors)
    m2, t2 = tensorio.read_bundle(path)
    assert m2 == manifest
    assert set(t2) == {"w1", "w2"}
    for k in tensors:
        assert np.array_equal(tensors[k], t2[k])


def test_bundle_bytes_reproducible(tmp_path):
    tensors = {"x": np.arange(6.0).reshape(2, 3)}
    p1, p2 = tmp_path / "b1.zip", tmp_path / "b2.zip"
    tensorio.write_bundle(p1, {"v": 1}, tensors)
    tensorio.write_bundle(p2, {"v": 1}, {"x": tensors["x"].copy()})
    assert tensorio.file_sha256(p1) == tensorio.file_sha256(p2)


def test_vtk_export_shape_and_order(tmp_path):
    field = np.arange(24.0).reshape(2, 3, 4)  # (nx, ny, nz)
    path = tmp_path / "f.vtk"
    tensorio.write_vtk_structured_points(path, {"v": field}, spacing=(1, 2, 3))
    text = path.read_text().splitlines()
    assert "DIMENSIONS 3 4 5" in text
    assert f"CELL_DATA {24}" in text
    data = [float(x) for x in text[text.index("LOOKUP_TABLE default") + 1 :]]
    # legacy VTK wants x fastest: first two entries walk the x axis
    assert data[0] == field[0, 0, 0]
    assert data[1] == field[1, 0, 0]
    assert data[2] == field[0, 1, 0]


def test_vtk_mixed_shapes_rejected(tmp_path):
    with pytest.raises(ValueError):
        tensorio.write_vtk_structured_points(
            tmp_path / "f.vtk", {"a": np.zeros((2, 2, 2)), "b": np.zeros((3, 2, 2))}
        )


def test_csv_writer_round_trip(tmp_path):
    path = tmp_path / "c.csv"
    tensorio.write_csv(path, ["id", "val"], [[0, 0.1], [1, 1.0 / 3.0]])
    lines = path.read_text().splitlines()
    assert lines[0] == "id,val"
    assert float(lines[2].split(",")[1]) == 1.0 / 3.0
