import math

import numpy as np
from hypothesis import given, strategies as st

from koasev.textio import fmt, parse_floats, parse_kv, read_csv, read_kv, write_csv, write_kv


def test_fmt_cells():
    assert fmt(None) == "NA"
    assert fmt(float("nan")) == "NA"
    assert fmt(True) == "true"
    assert fmt(np.int64(3)) == "3"
    assert fmt(0.1) == "0.1"


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_round_trip(x):
    assert float(fmt(x)) == x


def test_csv_round_trip(tmp_path):
    rows = [dict(a=1, b=0.5, c="x"), dict(a=2, b=None, c="y")]
    write_csv(tmp_path / "t.csv", rows, ("a", "b", "c"))
    back = read_csv(tmp_path / "t.csv")
    assert back == [dict(a="1", b="0.5", c="x"), dict(a="2", b="NA", c="y")]


def test_kv_round_trip(tmp_path):
    write_kv(tmp_path / "m.txt", {"x": 1.5, "v": np.array([1.0, np.nan, 3.0]), "s": "hi"}, header="h")
    kv = read_kv(tmp_path / "m.txt")
    assert kv["x"] == "1.5" and kv["s"] == "hi"
    v = parse_floats(kv["v"])
    assert v[0] == 1.0 and math.isnan(v[1]) and v[2] == 3.0
    assert parse_floats("").size == 0


def test_kv_rejects_bad_line():
    try:
        parse_kv("no equals sign here")
    except ValueError as exc:
        assert "line 1" in str(exc)
    else:
        raise AssertionError("expected ValueError")


def test_atomic_write_leaves_no_temp(tmp_path):
    write_csv(tmp_path / "a.csv", [], ("x",))
    assert [p.name for p in tmp_path.iterdir()] == ["a.csv"]
