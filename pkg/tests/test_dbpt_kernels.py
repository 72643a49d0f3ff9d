import importlib
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from dbplab import _kernels_py, kernels
from dbplab.errors import FormatError
from dbplab.tensorgrad import dbpt


@given(arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(-1e6, 1e6, allow_nan=False, width=32)))
def test_roundtrip_bitwise(a):
    back = dbpt.read_record(io.BytesIO(dbpt.encode(a)))
    assert back.dtype == a.dtype and back.shape == a.shape
    assert back.tobytes() == a.tobytes()


def test_multi_record_file(tmp_path):
    recs = [np.arange(6.0).reshape(2, 3), np.ones(4, dtype=np.float32)]
    dbpt.save(tmp_path / "x.dbpt", recs)
    back = dbpt.load_all(tmp_path / "x.dbpt")
    assert [r.tobytes() for r in back] == [r.tobytes() for r in recs]


def test_header_layout():
    raw = dbpt.encode(np.array([[1.0, 2.0]]))
    assert raw[:4] == b"DBPT"
    assert len(raw) > 16


@pytest.mark.parametrize("cut", [2, 7, 20])
def test_truncated_raises(tmp_path, cut):
    raw = dbpt.encode(np.arange(5.0))
    p = tmp_path / "t.dbpt"
    p.write_bytes(raw[:cut])
    with pytest.raises(FormatError):
        dbpt.load_all(p)


def test_bad_magic(tmp_path):
    p = tmp_path / "b.dbpt"
    p.write_bytes(b"NOPE" + dbpt.encode(np.zeros(2))[4:])
    with pytest.raises(FormatError):
        dbpt.load(p)


def test_integer_dtype_rejected():
    with pytest.raises(FormatError):
        dbpt.encode(np.arange(3))


# -- kernel backends ------------------------------------------------------------------

compiled = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")


@compiled
@given(st.integers(0, 2 ** 64 - 1), st.integers(0, 300))
def test_uniform_stream_backends_bitwise(key, n):
    from dbplab import _kernels
    assert _kernels.uniform_stream(key, n).tobytes() == _kernels_py.uniform_stream(key, n).tobytes()


@compiled
@given(st.integers(0, 2 ** 64 - 1), st.integers(1, 300))
def test_gaussian_backends_agree(key, n):
    from dbplab import _kernels
    a, b = _kernels.gaussian_fill(key, n), _kernels_py.gaussian_fill(key, n)
    np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-14)


@compiled
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 40)),
              elements=st.sampled_from([-1.0, 0.0, 0.5, 2.0, 3.5])))
def test_argsort_backends_bitwise(d):
    from dbplab import _kernels
    assert np.array_equal(_kernels.stable_argsort_rows(d), _kernels_py.stable_argsort_rows(d))


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 40)),
              elements=st.sampled_from([-1.0, 0.0, 0.5, 2.0])))
def test_argsort_is_stable(d):
    got = kernels.stable_argsort_rows(d)
    assert np.array_equal(got, np.argsort(d, axis=1, kind="stable"))


def test_pure_python_switch(monkeypatch):
    monkeypatch.setenv("DBPLAB_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("DBPLAB_PURE_PYTHON")
        importlib.reload(kernels)
