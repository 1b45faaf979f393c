import numpy as np
import pytest
from hypothesis import given, strategies as st

from coffeelab import autodiff as ad
from coffeelab.datagen import ATTRIBUTES, BASES
from coffeelab.textenc import (
    UNCOND, EmbeddingTable, UnknownTokenError, Vocabulary, encode, encode_value, pooling_matrix,
    respecify_concepts, snapshot_refs, tokenize,
)

VOCAB = Vocabulary.build(BASES, ATTRIBUTES)


@pytest.fixture
def table():
    return EmbeddingTable.init(VOCAB, seed=3)


def test_vocabulary_layout():
    assert len(VOCAB) == 10
    assert VOCAB.tokens[-1] == UNCOND and "without" in VOCAB.tokens


def test_vocabulary_rejects_duplicates_and_missing_uncond():
    with pytest.raises(ValueError, match="duplicate"):
        Vocabulary(("a", "a", UNCOND))
    with pytest.raises(ValueError, match="exactly once"):
        Vocabulary(("a", "b"))


def test_tokenize_examples():
    assert tokenize("circle frame", VOCAB) == [VOCAB.id("circle"), VOCAB.id("frame")]
    assert tokenize("  Circle   FRAME ", VOCAB) == tokenize("circle frame", VOCAB)
    assert VOCAB.decode(tokenize("cross without dot", VOCAB)) == ["cross", "without", "dot"]


def test_unknown_token_names_token_and_vocabulary():
    with pytest.raises(UnknownTokenError, match=r"'hexagon'.*vocabulary is \['circle'"):
        tokenize("hexagon", VOCAB)


def test_empty_prompt_rejected():
    with pytest.raises(ValueError, match="empty"):
        tokenize("   ", VOCAB)


def test_encode_is_mean_of_rows(table):
    m = table.matrix.data
    expected = (m[VOCAB.id("circle")].astype(np.float64) + m[VOCAB.id("frame")]) / 2
    np.testing.assert_allclose(encode("circle frame", table).data, expected, rtol=1e-6)
    np.testing.assert_array_equal(encode_value("circle frame", table), encode("circle frame", table).data)


@given(st.permutations(["circle", "frame", "dot", "without"]))
def test_encoding_is_permutation_invariant(words):
    t = EmbeddingTable.init(VOCAB, seed=3)
    np.testing.assert_allclose(encode_value(" ".join(words), t),
                               encode_value("circle frame dot without", t), rtol=1e-6, atol=1e-9)


def test_pooling_matrix_matches_encode(table):
    prompts = ["circle", "square stripe", "cross without checker"]
    pooled = pooling_matrix(prompts, VOCAB) @ table.matrix.data
    for p, row in zip(prompts, pooled):
        np.testing.assert_allclose(row, encode_value(p, table), rtol=1e-5, atol=1e-8)


def test_encode_gradient_touches_only_prompt_rows(table):
    with ad.Graph() as g:
        g.backward(ad.sum_(encode("circle frame", table)))
    touched = np.flatnonzero(np.abs(table.matrix.grad).sum(1))
    assert sorted(touched) == sorted([VOCAB.id("circle"), VOCAB.id("frame")])
    np.testing.assert_allclose(table.matrix.grad[VOCAB.id("circle")], 0.5)


def test_table_rejects_wrong_row_count():
    with pytest.raises(ValueError, match="rows"):
        EmbeddingTable(VOCAB, np.zeros((3, 32), np.float32))


def test_snapshot_is_frozen_and_detached(table):
    refs = snapshot_refs("circle", ["frame"], table)
    before = refs.v_i.copy()
    table.matrix.data[:] += 1.0
    np.testing.assert_array_equal(refs.v_i, before)
    with pytest.raises(ValueError):
        refs.v_i[0] = 5.0
    cos = float(before @ refs.v_m[0] / np.linalg.norm(before) / np.linalg.norm(refs.v_m[0]))
    assert refs.ref_cosines[0] == pytest.approx(cos, abs=1e-6)


def test_snapshot_needs_undesired_concepts(table):
    with pytest.raises(ValueError, match="undesired"):
        snapshot_refs("circle", [], table)


def test_respecify_keeps_user_prompt_reference(table):
    refs = snapshot_refs("circle", ["frame"], table)
    new = respecify_concepts(["dot", "stripe"], table, refs)
    assert new.undesired == ("dot", "stripe")
    np.testing.assert_array_equal(new.v_i, refs.v_i)
    assert new == snapshot_refs("circle", ["dot", "stripe"], table)
    assert new != refs


def test_copy_is_independent(table):
    c = table.copy()
    c.matrix.data[0] += 1
    assert not np.array_equal(c.matrix.data, table.matrix.data)
