import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from numpy.testing import assert_array_equal

from oracles import random_sparse_matrix
from sparse_flops import io
from sparse_flops.sparse_core import InvertedIndex

f32_matrices = st.tuples(st.integers(0, 15), st.integers(1, 8)).flatmap(
    lambda s: hnp.arrays(
        np.float32,
        s,
        elements=st.one_of(st.just(np.float32(0)), st.floats(width=32, allow_nan=False, allow_infinity=False)),
    )
)


@given(f32_matrices)
def test_index_roundtrip_is_bit_exact(m):
    index = InvertedIndex.from_dense(m.astype(np.float64))
    back = io.index_from_bytes(io.index_to_bytes(index))
    assert back == index
    assert_array_equal(back.row_norms, index.row_norms)


@given(f32_matrices)
def test_embeddings_roundtrip(m):
    back = io.embeddings_from_bytes(io.embeddings_to_bytes(m))
    assert back.dtype == np.float64
    assert_array_equal(back, m)


def test_layout(tmp_path):
    index = InvertedIndex.from_dense([[0.0, 2.0], [1.0, 0.0], [0.5, 0.0]])
    buf = io.index_to_bytes(index)
    assert buf[:4] == b"SPFX"
    # header 24 bytes, 2 lengths of 8 bytes, 3 postings of 8 bytes
    assert len(buf) == 24 + 16 + 24
    assert np.frombuffer(buf, "<u8", 2, 24).tolist() == [2, 1]
    rec = np.frombuffer(buf, [("row", "<u4"), ("value", "<f4")], 3, 40)
    assert rec["row"].tolist() == [1, 2, 0]
    assert rec["value"].tolist() == [1.0, 0.5, 2.0]


def test_empty_index(tmp_path):
    index = InvertedIndex.from_dense(np.zeros((0, 4)), dim=4)
    io.save_index(tmp_path / "e.spfx", index)
    back = io.load_index(tmp_path / "e.spfx")
    assert back.num_rows == 0 and back.dim == 4 and back.nnz == 0


def test_files_and_atomicity(tmp_path, rng):
    m = random_sparse_matrix(rng, 30, 10, 0.3).astype(np.float32)
    io.save_embeddings(tmp_path / "a" / "x.spfe", m)
    assert_array_equal(io.load_embeddings(tmp_path / "a" / "x.spfe"), m)
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["x.spfe"]


def test_f32_rounding_is_single_step():
    index = InvertedIndex.from_dense([[0.1]])
    back = io.index_from_bytes(io.index_to_bytes(index))
    assert back.values[0] == float(np.float32(0.1))


@pytest.mark.parametrize("value", [1e-50, 1e50])
def test_unrepresentable_values_rejected(value):
    with pytest.raises(io.FormatError):
        io.index_to_bytes(InvertedIndex.from_dense([[value]]))


class TestCorruptFiles:
    @pytest.fixture
    def buf(self, rng):
        return io.index_to_bytes(InvertedIndex.from_dense(random_sparse_matrix(rng, 20, 6, 0.4)))

    def test_truncated(self, buf):
        for cut in (3, 20, 30, len(buf) - 1):
            with pytest.raises(io.FormatError):
                io.index_from_bytes(buf[:cut])

    def test_bad_magic(self, buf):
        with pytest.raises(io.FormatError, match="magic"):
            io.index_from_bytes(b"XXXX" + buf[4:])

    def test_bad_version(self, buf):
        with pytest.raises(io.FormatError, match="version"):
            io.index_from_bytes(buf[:4] + (2).to_bytes(4, "little") + buf[8:])

    def test_row_out_of_range(self, buf):
        b = bytearray(buf)
        b[8:16] = (1).to_bytes(8, "little")  # claim a single row
        with pytest.raises(io.FormatError):
            io.index_from_bytes(bytes(b))

    def test_unsorted_posting(self):
        buf = bytearray(io.index_to_bytes(InvertedIndex.from_dense([[1.0], [2.0]])))
        off = 24 + 8
        buf[off : off + 4], buf[off + 8 : off + 12] = buf[off + 8 : off + 12], buf[off : off + 4]
        with pytest.raises(io.FormatError, match="ascending"):
            io.index_from_bytes(bytes(buf))

    def test_embedding_size_mismatch(self):
        buf = io.embeddings_to_bytes(np.ones((3, 2)))
        with pytest.raises(io.FormatError):
            io.embeddings_from_bytes(buf + b"\0")
        with pytest.raises(io.FormatError):
            io.embeddings_from_bytes(buf[:-4])

    def test_wrong_file_kind(self):
        with pytest.raises(io.FormatError):
            io.index_from_bytes(io.embeddings_to_bytes(np.ones((2, 2))))


def test_write_csv_repr_floats(tmp_path):
    io.write_csv(tmp_path / "t.csv", ["a", "b"], [(1, 0.1), (2, 1 / 3)])
    assert (tmp_path / "t.csv").read_text() == "a,b\n1,0.1\n2,0.3333333333333333\n"


def test_norms_independent_of_construction_path():
    # large values whose squared sum rounds differently under other summation orders
    m = np.array([[7.572630e13, 5.047194e14, 1.865357e17]], dtype=np.float32).astype(np.float64)
    a = InvertedIndex.from_dense(m)
    b = io.index_from_bytes(io.index_to_bytes(a))
    assert_array_equal(a.row_norms, b.row_norms)
