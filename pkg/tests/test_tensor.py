import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from dst2r import tensor as T
from dst2r.tensor import DenseTensor, DimensionError, FormatError

shapes = st.lists(st.integers(1, 4), min_size=1, max_size=4).map(tuple)
floats = st.floats(-10, 10, allow_nan=False, width=64)


def tensors(shape_strategy=shapes):
    return shape_strategy.flatmap(lambda s: arrays(np.float64, s, elements=floats))


# --- hand examples ---------------------------------------------------------

def test_outer_product_hand_example():
    got = np.asarray(T.outer_product([1, 2], [3, 4]))
    assert np.array_equal(got, [[3, 4], [6, 8]])


def test_inner_product_hand_example():
    assert T.inner_product([[1, 2], [3, 4]], [[1, 0], [0, 1]]) == 5.0


def test_vec_is_column_major():
    t = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert list(T.vec(t)) == [1.0, 3.0, 2.0, 4.0]


def test_matricize_mode0_is_identity_on_linear_order():
    t = np.arange(24.0).reshape(2, 3, 4)
    m = T.matricize(t, 0)
    assert np.array_equal(m.ravel(order="F"), T.vec(t))


def test_full_contraction_returns_scalar():
    a = np.arange(6.0).reshape(2, 3)
    out = T.contracted_product(a, a, 2)
    assert isinstance(out, float)
    assert out == pytest.approx(np.sum(a * a))


def test_contracted_product_zero_modes_is_outer():
    a, b = np.arange(2.0) + 1, np.arange(3.0) + 1
    assert np.allclose(np.asarray(T.contracted_product(a, b, 0)), np.outer(a, b))


# --- loop oracles via hypothesis ------------------------------------------

@settings(max_examples=60, deadline=None)
@given(tensors(), tensors(st.lists(st.integers(1, 3), min_size=1, max_size=2).map(tuple)))
def test_outer_matches_loop(a, b):
    assert np.allclose(np.asarray(T.outer_product(a, b)), oracles.outer(a, b), rtol=1e-12, atol=0)


@settings(max_examples=60, deadline=None)
@given(tensors())
def test_inner_matches_loop(a):
    b = np.cos(a) + 1.0
    assert T.inner_product(a, b) == pytest.approx(oracles.inner(a, b), rel=1e-12, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(tensors(), st.data())
def test_matricize_matches_index_map(t, data):
    n = data.draw(st.integers(0, t.ndim - 1))
    assert np.array_equal(T.matricize(t, n), oracles.matricize(t, n))


@settings(max_examples=60, deadline=None)
@given(tensors(), st.data())
def test_dematricize_inverts_matricize(t, data):
    n = data.draw(st.integers(0, t.ndim - 1))
    back = T.dematricize(T.matricize(t, n), n, t.shape)
    assert np.array_equal(np.asarray(back), t)


@settings(max_examples=60, deadline=None)
@given(tensors(), st.data())
def test_mode_n_matches_loop(t, data):
    n = data.draw(st.integers(0, t.ndim - 1))
    v = data.draw(arrays(np.float64, t.shape[n], elements=floats))
    got = T.mode_n_product(t, v, n)
    assert np.allclose(np.asarray(got), oracles.mode_n(t, v, n), rtol=1e-12, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(tensors())
def test_vec_matches_loop(t):
    assert np.array_equal(T.vec(t), oracles.vec(t))


@settings(max_examples=40, deadline=None)
@given(tensors())
def test_norms_and_axpy(t):
    assert T.frobenius_norm(t) == pytest.approx(np.sqrt(oracles.inner(t, t)), rel=1e-12, abs=1e-12)
    assert T.l1_norm(t) == pytest.approx(float(np.sum(np.abs(t))))
    y = np.ones_like(t)
    assert np.allclose(np.asarray(T.axpy(2.0, t, y)), 2.0 * t + 1.0)
    assert np.array_equal(np.asarray(T.subtract(T.add(t, y), y)), (t + y) - y)


# --- DenseTensor -------------------------------------------------------------

def test_from_data_uses_canonical_order():
    t = DenseTensor.from_data((2, 2), [1, 2, 3, 4])
    assert t[1, 0] == 2.0 and t[0, 1] == 3.0
    assert list(t.data) == [1.0, 2.0, 3.0, 4.0]


def test_index_out_of_range_raises():
    t = DenseTensor.zeros((2, 3))
    with pytest.raises(IndexError):
        t[2, 0]
    with pytest.raises(IndexError):
        t[-1, 0]
    with pytest.raises(IndexError):
        t[0]


def test_tensor_is_immutable():
    t = DenseTensor([[1.0, 2.0]])
    with pytest.raises(ValueError):
        np.asarray(t)[0, 0] = 5.0


def test_shape_errors():
    with pytest.raises(DimensionError):
        T.add(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        T.contracted_product(np.zeros((2, 3)), np.zeros((2, 3)), 1)
    with pytest.raises(DimensionError):
        T.mode_n_product(np.zeros((2, 3)), [1.0, 2.0], 1)
    with pytest.raises(DimensionError):
        DenseTensor.from_data((2, 2), [1.0, 2.0, 3.0])


def test_operators():
    a = DenseTensor([1.0, 2.0])
    assert (a + a) == DenseTensor([2.0, 4.0])
    assert (-a) == DenseTensor([-1.0, -2.0])
    assert (3 * a) == DenseTensor([3.0, 6.0])


# --- DTEN --------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(tensors())
def test_dten_roundtrip(t):
    back = T.loads_dten(T.dumps_dten(t))
    assert back.shape == t.shape and np.array_equal(np.asarray(back), t)


def test_dten_layout_is_little_endian_column_major():
    payload = T.dumps_dten(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert payload[:5] == b"DTEN1"
    assert struct.unpack_from("<3I", payload, 5) == (2, 2, 2)
    assert struct.unpack_from("<4d", payload, 17) == (1.0, 3.0, 2.0, 4.0)


def test_dten_file_roundtrip(tmp_path):
    t = np.arange(12.0).reshape(2, 3, 2)
    T.write_dten(tmp_path / "t.dten", t)
    assert np.array_equal(np.asarray(T.read_dten(tmp_path / "t.dten")), t)


@pytest.mark.parametrize("mutate", [
    lambda p: b"XTEN1" + p[5:],
    lambda p: p[:-1],
    lambda p: p + b"\x00",
    lambda p: p[:7],
])
def test_dten_rejects_malformed(mutate):
    payload = T.dumps_dten(np.ones((2, 2)))
    with pytest.raises(FormatError):
        T.loads_dten(mutate(payload))
