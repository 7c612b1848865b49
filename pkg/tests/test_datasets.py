import io
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spgm.datasets import LibsvmParseError, normalize_dataset, parse_libsvm, serialize_libsvm

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def test_single_row():
    A, b = parse_libsvm("1 1:0.5 3:-2")
    np.testing.assert_array_equal(A, [[0.5, 0.0, -2.0]])
    np.testing.assert_array_equal(b, [1.0])


def test_two_rows_from_stream():
    A, b = parse_libsvm(io.StringIO("-1 2:1\n+1 1:1"))
    np.testing.assert_array_equal(A, [[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(b, [-1.0, 1.0])


def test_empty_stream_warns():
    with pytest.warns(RuntimeWarning):
        A, b = parse_libsvm(io.StringIO(""))
    assert A.shape == (0, 0) and b.shape == (0,)


def test_comments_and_blank_lines():
    A, b = parse_libsvm("# header\n\n2 2:3 # trailing\n")
    np.testing.assert_array_equal(A, [[0.0, 3.0]])


def test_fixed_width():
    A, _ = parse_libsvm("1 2:1", n_features=4)
    assert A.shape == (1, 4)
    with pytest.raises(ValueError):
        parse_libsvm("1 5:1", n_features=4)


@pytest.mark.parametrize("text,line", [
    ("1 1:0.5\nx 1:2", 2),
    ("1 0:1", 1),
    ("1 3:1 2:1", 1),
    ("1 2:1 2:3", 1),
    ("1\n1 a:1", 2),
    ("1 1:zz", 1),
    ("1 1", 1),
    ("nan 1:1", 1),
])
def test_parse_errors_carry_location(text, line):
    with pytest.raises(LibsvmParseError) as err:
        parse_libsvm(text)
    assert err.value.line_no == line
    assert f"line {line}" in str(err.value)


@pytest.mark.parametrize("name", ["small_binary.libsvm", "regression.libsvm"])
def test_fixture_round_trip_is_byte_stable(name):
    path = os.path.join(FIXTURES, name)
    with open(path, "rb") as fh:
        raw = fh.read()
    A, b = parse_libsvm(path)
    out = serialize_libsvm(A, b).encode("utf-8")
    assert out == raw
    A2, b2 = parse_libsvm(out.decode("utf-8"))
    assert np.array_equal(A, A2) and np.array_equal(b, b2)


def test_empty_fixture():
    with pytest.warns(RuntimeWarning):
        A, b = parse_libsvm(os.path.join(FIXTURES, "empty.libsvm"))
    assert serialize_libsvm(A, b) == ""


finite = st.floats(-1e6, 1e6, allow_nan=False).filter(lambda v: v != 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.data())
def test_round_trip_property(m, d, data):
    A = np.array([[data.draw(st.one_of(st.just(0.0), finite)) for _ in range(d)] for _ in range(m)])
    b = np.array([data.draw(finite) for _ in range(m)])
    text = serialize_libsvm(A, b)
    A2, b2 = parse_libsvm(text, n_features=d)
    assert np.array_equal(A, A2) and np.array_equal(b, b2)
    assert serialize_libsvm(A2, b2) == text


class TestNormalize:
    def test_unit_columns(self):
        A, _ = normalize_dataset([[3.0], [4.0]], [1, -1])
        np.testing.assert_allclose(A[:, 0], [0.6, 0.8], rtol=1e-15)

    def test_label_mapping(self):
        _, b = normalize_dataset(np.eye(3), [0, 1, 0])
        np.testing.assert_array_equal(b, [-1, 1, -1])

    def test_first_seen_class_is_negative(self):
        _, b = normalize_dataset(np.eye(3), [2, 0, 2])
        np.testing.assert_array_equal(b, [-1, 1, -1])

    def test_plus_minus_labels_kept(self):
        _, b = normalize_dataset(np.eye(2), [1, -1])
        np.testing.assert_array_equal(b, [1, -1])

    def test_zero_column_unchanged(self):
        A, _ = normalize_dataset([[0.0, 2.0], [0.0, 0.0]], [1, -1])
        np.testing.assert_array_equal(A[:, 0], [0.0, 0.0])
        np.testing.assert_array_equal(A[:, 1], [1.0, 0.0])

    def test_three_classes_rejected(self):
        with pytest.raises(ValueError):
            normalize_dataset(np.eye(3), [0, 1, 2])

    def test_regression_labels_untouched(self):
        _, b = normalize_dataset(np.eye(3), [0.5, 2.0, 7.0], classification=False)
        np.testing.assert_array_equal(b, [0.5, 2.0, 7.0])
