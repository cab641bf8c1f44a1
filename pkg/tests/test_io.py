import json

import numpy as np
import pytest

from canonflow.io import (ContainerError, format_value, read_csv, read_field, write_csv,
                          write_field, write_json)


def test_field_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((8, 8, 2, 3)) + 1j * rng.standard_normal((8, 8, 2, 3))
    tw = np.array([[0, 2], [-2, 0]])
    p = write_field(tmp_path / "f.cfld", data, m=1, n=8, k=2, twist=tw, role="family",
                    provenance={"seed": 3})
    rec = read_field(p)
    assert rec.role == "family" and (rec.m, rec.n, rec.k) == (1, 8, 2)
    assert np.array_equal(rec.twist, tw)
    assert np.array_equal(rec.data, data)
    assert rec.provenance == {"seed": 3, "role": "family"}


def test_single_precision_container(tmp_path):
    data = np.full((4, 4), 1 / 3 + 0j)
    rec = read_field(write_field(tmp_path / "s.cfld", data, m=1, n=4, k=1,
                                 twist=np.zeros((2, 2)), role="x", single=True))
    assert rec.data.dtype == np.complex64 and rec.provenance is None
    assert np.allclose(rec.data, data, atol=1e-7)


def test_container_rejects_bad_input(tmp_path):
    bad = tmp_path / "bad.cfld"
    bad.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(ContainerError, match="bad magic"):
        read_field(bad)
    with pytest.raises(ContainerError):
        write_field(tmp_path / "t.cfld", np.zeros(3), m=1, n=4, k=1, twist=np.zeros((4, 4)), role="x")
    with pytest.raises(ContainerError):
        write_field(tmp_path / "t.cfld", np.zeros(3), m=1, n=4, k=1, twist=np.zeros((2, 2)),
                    role="a" * 17)
    good = write_field(tmp_path / "g.cfld", np.zeros(6), m=1, n=4, k=1, twist=np.zeros((2, 2)),
                       role="x")
    good.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ContainerError, match="payload size"):
        read_field(good)


def test_csv_formatting_is_exact(tmp_path):
    assert format_value(0.1) == "0.1"
    assert format_value(float("nan")) == "nan"
    assert format_value(None) == ""
    assert format_value(True) == "1"
    assert format_value(np.int64(7)) == "7"
    x = 1 / 3
    p = write_csv(tmp_path / "a.csv", ("a", "b"), [{"a": x}, {"a": 2, "b": "z"}])
    rows = read_csv(p)
    assert float(rows[0]["a"]) == x and rows[0]["b"] == ""
    assert rows[1] == {"a": "2", "b": "z"}


def test_json_handles_numpy(tmp_path):
    p = write_json(tmp_path / "a.json", {"b": np.arange(2), "a": np.float64(1.5)})
    assert json.loads(p.read_text()) == {"a": 1.5, "b": [0, 1]}
    assert p.read_text().index('"a"') < p.read_text().index('"b"')
