import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualmem.embedding import (
    EmbeddingTable,
    HashEmbedder,
    TableEmbedder,
    cosine,
    cosine_many,
    embed_text,
    load_embedding_table,
    save_embedding_table,
)
from dualmem.errors import InvalidInputError, NotFoundError, ParseError

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(2, 16), elements=finite)


def test_embed_is_deterministic():
    a = embed_text("bracket with holes", 64, 7)
    b = embed_text("bracket with holes", 64, 7)
    assert np.array_equal(a, b)
    assert a.shape == (64,)
    assert 0 < np.linalg.norm(a) < math.inf


def test_shared_tokens_are_closer_than_disjoint():
    base = embed_text("a b c", 64, 7)
    assert cosine(base, embed_text("a b c d", 64, 7)) > cosine(base, embed_text("x y z", 64, 7))


def test_seed_changes_vectors():
    assert not np.array_equal(embed_text("hole", 64, 7), embed_text("hole", 64, 8))


@pytest.mark.parametrize("text", ["", "   ", "\n\t"])
def test_empty_text_rejected(text):
    with pytest.raises(InvalidInputError):
        embed_text(text, 64, 7)


def test_dimension_must_be_at_least_two():
    with pytest.raises(InvalidInputError):
        embed_text("x", 1, 7)


@pytest.mark.parametrize(
    "u, v, expected",
    [((1, 0), (1, 0), 1.0), ((1, 0), (0, 1), 0.0), ((1, 0), (-1, 0), -1.0)],
)
def test_cosine_fixed_points(u, v, expected):
    assert cosine(u, v) == expected


def test_cosine_errors():
    with pytest.raises(InvalidInputError):
        cosine((0, 0), (1, 0))
    with pytest.raises(InvalidInputError):
        cosine((1, 0, 0), (1, 0))


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_cosine_self_is_one(u):
    if np.linalg.norm(u) < 1e-6:
        return
    assert abs(cosine(u, u) - 1.0) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 12).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=finite), arrays(np.float64, n, elements=finite))))
def test_cosine_symmetric_and_bounded(uv):
    u, v = uv
    if np.linalg.norm(u) < 1e-6 or np.linalg.norm(v) < 1e-6:
        return
    c = cosine(u, v)
    assert -1.0 <= c <= 1.0
    assert abs(c - cosine(v, u)) <= 1e-15


def test_cosine_many_matches_scalar(rng):
    q = rng.standard_normal(8)
    m = rng.standard_normal((5, 8))
    np.testing.assert_allclose(cosine_many(q, m), [cosine(q, row) for row in m], rtol=0, atol=1e-15)


def test_table_roundtrip_is_bit_exact(tmp_path, rng):
    table = EmbeddingTable(d=4)
    table.add("first key", rng.standard_normal(4))
    table.add("second", rng.standard_normal(4) * 1e-300)
    path = tmp_path / "t.tsv"
    save_embedding_table(table, path)
    back = load_embedding_table(path)
    assert back.d == 4 and len(back) == 2
    for k in table.entries:
        assert np.array_equal(back[k], table[k])


def test_table_ignores_comments(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("# header\nk1\t1,2,3,4\n\nk2\t0.5,0,0,1\n", encoding="utf-8")
    table = load_embedding_table(path)
    assert table.d == 4 and list(table.entries) == ["k1", "k2"]


def test_table_dimension_mismatch_reports_line(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("k1\t1,2,3,4\n# c\nk2\t1,2,3\n", encoding="utf-8")
    with pytest.raises(ParseError) as info:
        load_embedding_table(path)
    assert info.value.line == 3


def test_table_duplicate_key(tmp_path):
    path = tmp_path / "t.tsv"
    path.write_text("k\t1,2\nk\t3,4\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_embedding_table(path)


def test_table_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_embedding_table(tmp_path / "nope.tsv")


def test_embedders_share_the_call_contract():
    table = EmbeddingTable(d=3)
    table.add("q", [1.0, 0.0, 0.0])
    assert np.array_equal(TableEmbedder(table)("q"), [1.0, 0.0, 0.0])
    with pytest.raises(NotFoundError):
        TableEmbedder(table)("missing")
    assert HashEmbedder(16, 3)("abc").shape == (16,)
