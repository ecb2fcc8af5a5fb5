import struct

import numpy as np
import pytest

from patchguard.data import synthetic_dataset
from patchguard.formats import (
    FormatError,
    fmt,
    load_dataset,
    load_model,
    read_config,
    read_csv,
    save_dataset,
    save_model,
    write_config,
    write_csv,
)
from patchguard.geometry import RFGeometry
from patchguard.model import init_model
from patchguard.tensors import ContractError


@pytest.fixture
def data():
    return synthetic_dataset(5, seed=1, classes=3, size=14)


def test_dataset_round_trip(tmp_path, data):
    path = tmp_path / "d.pgds"
    save_dataset(data, path)
    back = load_dataset(path)
    assert back.class_count == 3
    assert np.array_equal(back.labels, data.labels)
    # pixels are stored as float32
    assert np.array_equal(back.images, data.images.astype(np.float32).astype(np.float64))


def test_model_round_trip_is_exact(tmp_path):
    m = init_model(RFGeometry(5, 3, 3, 2, 14, 12), 2, 4, 6, seed=7)
    path = tmp_path / "m.pgmd"
    save_model(m, path)
    back = load_model(path)
    assert back.geom == m.geom and back.channels == 2 and back.classes == 4
    assert all(np.array_equal(a, b) for a, b in zip(back.params(), m.params()))


def test_bad_magic(tmp_path, data):
    path = tmp_path / "d.pgds"
    save_dataset(data, path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as info:
        load_dataset(path)
    assert info.value.offset == 0


def test_bad_version(tmp_path, data):
    path = tmp_path / "d.pgds"
    save_dataset(data, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as info:
        load_dataset(path)
    assert info.value.offset == 4


def test_truncated_payload_reports_offset(tmp_path, data):
    path = tmp_path / "d.pgds"
    save_dataset(data, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:30])
    with pytest.raises(FormatError) as info:
        load_dataset(path)
    assert info.value.offset == 25  # header is 5 + 20 bytes


def test_trailing_bytes(tmp_path, data):
    path = tmp_path / "d.pgds"
    save_dataset(data, path)
    size = path.stat().st_size
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(FormatError) as info:
        load_dataset(path)
    assert info.value.offset == size


def test_label_out_of_range(tmp_path):
    path = tmp_path / "d.pgds"
    body = struct.pack("<5I", 1, 1, 1, 1, 2) + np.float32(0.5).tobytes() + np.uint16(2).tobytes()
    path.write_bytes(b"PGDS\x01" + body)
    with pytest.raises(FormatError) as info:
        load_dataset(path)
    assert info.value.offset == 29


def test_nonfinite_weights_rejected(tmp_path):
    m = init_model(RFGeometry.square(3, 2, 7), 1, 2, 2, seed=0)
    path = tmp_path / "m.pgmd"
    save_model(m, path)
    raw = bytearray(path.read_bytes())
    offset = 5 + 40
    raw[offset : offset + 8] = np.float64(np.nan).tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as info:
        load_model(path)
    assert info.value.offset == offset


def test_inconsistent_layer_sizes(tmp_path):
    m = init_model(RFGeometry.square(3, 2, 7), 1, 2, 2, seed=0)
    path = tmp_path / "m.pgmd"
    save_model(m, path)
    raw = bytearray(path.read_bytes())
    raw[5 + 24 + 4 : 5 + 24 + 8] = struct.pack("<I", 8)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_model(path)


def test_config_parsing(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nlearning-rate = 0.1  # trailing\n\nkind=prediction\n")
    assert read_config(path) == {"learning_rate": "0.1", "kind": "prediction"}
    path.write_text("no equals sign\n")
    with pytest.raises(ContractError):
        read_config(path)
    write_config({"a": 1, "b": "x"}, path)
    assert read_config(path) == {"a": "1", "b": "x"}


def test_csv_cells(tmp_path):
    assert fmt(True) == "1" and fmt(np.bool_(False)) == "0"
    assert fmt(1 / 3) == "0.333333" and fmt(np.float64(2.0)) == "2"
    path = tmp_path / "t.csv"
    write_csv(path, ["a", "b"], [[1, 0.5], [2, True]])
    assert path.read_text() == "a,b\n1,0.5\n2,1\n"
    assert read_csv(path) == [{"a": "1", "b": "0.5"}, {"a": "2", "b": "1"}]
