import numpy as np
import numpy.testing as npt
import pytest

from src.corpus import make_token
from src.embeddings import embed_token, load_word_vectors, read_word_vectors, synth_embedding
from src.errors import CorpusFormatError


def test_load_word_vectors_lowercases_and_falls_back_to_unknown():
    table = load_word_vectors("Alpha 1 2\nbeta 3.5 -4\n\n", 2)
    assert len(table) == 2
    assert "ALPHA" in table
    npt.assert_array_equal(table.vector("alpha"), [1.0, 2.0])
    npt.assert_array_equal(embed_token(table, make_token("Beta")), [3.5, -4.0])
    npt.assert_array_equal(table.vector("gamma"), np.zeros(2))
    assert table.words == ["alpha", "beta"]


def test_load_word_vectors_reports_bad_rows():
    with pytest.raises(CorpusFormatError) as err:
        load_word_vectors("a 1 2\nb 1 2 3\n", 2)
    assert err.value.line_no == 2
    with pytest.raises(CorpusFormatError):
        load_word_vectors("a 1 x\n", 2)


def test_table_is_frozen():
    table = synth_embedding(["a", "b"], 3, seed=0)
    assert table.frozen
    with pytest.raises(ValueError):
        table.matrix[0, 0] = 1.0
    with pytest.raises(ValueError):
        table.vector("zzz")[0] = 1.0


def test_synth_embedding_unit_norm_and_seeded():
    a = synth_embedding(["x", "Y", "z"], 8, seed=4)
    b = synth_embedding(["z", "y", "x"], 8, seed=4)
    npt.assert_allclose(np.linalg.norm(a.matrix, axis=1), 1.0)
    npt.assert_array_equal(a.matrix, b.matrix)
    with pytest.raises(ValueError):
        synth_embedding([], 8, seed=0)


def test_read_word_vectors(tmp_path):
    p = tmp_path / "vec.txt"
    p.write_text("w 0.5 0.25\n", encoding="utf-8")
    npt.assert_array_equal(read_word_vectors(str(p), 2).vector("W"), [0.5, 0.25])
