from typing import Dict, Iterable, Sequence, Union
import logging

import numpy as np

from .corpus import Token, canonical
from .errors import CorpusFormatError

logger = logging.getLogger(__name__)


class EmbeddingTable:
    """Frozen word -> vector lookup. Vectors are read-only arrays; lookups are lowercase."""

    def __init__(self, entries: Dict[str, np.ndarray], dim: int):
        self.dim = int(dim)
        words = sorted(entries)
        mat = np.zeros((len(words), self.dim), dtype=np.float64)
        for i, w in enumerate(words):
            mat[i] = entries[w]
        mat.setflags(write=False)
        self._matrix = mat
        self._index = {w: i for i, w in enumerate(words)}
        self.unk_vector = np.zeros(self.dim, dtype=np.float64)
        self.unk_vector.setflags(write=False)

    @property
    def frozen(self) -> bool:
        return True

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def words(self) -> list:
        return sorted(self._index, key=self._index.get)

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, word: str) -> bool:
        return canonical(word) in self._index

    def vector(self, word: str) -> np.ndarray:
        i = self._index.get(canonical(word))
        return self.unk_vector if i is None else self._matrix[i]


def embed_token(table: EmbeddingTable, token: Union[Token, str]) -> np.ndarray:
    text = token.text if isinstance(token, Token) else token
    return table.vector(text)


def load_word_vectors(stream: Union[str, Iterable[str]], dim: int) -> EmbeddingTable:
    lines = stream.splitlines() if isinstance(stream, str) else stream
    entries: Dict[str, np.ndarray] = {}
    for line_no, line in enumerate(lines, start=1):
        parts = line.rstrip("\n").split(" ")
        if not parts or not parts[0].strip():
            continue
        if len(parts) - 1 != dim:
            raise CorpusFormatError(f"expected {dim} values for {parts[0]!r}, got {len(parts) - 1}", line_no)
        try:
            vec = np.array([float(v) for v in parts[1:]], dtype=np.float64)
        except ValueError:
            raise CorpusFormatError(f"non-numeric vector value for {parts[0]!r}", line_no) from None
        entries[canonical(parts[0])] = vec
    logger.info("loaded %d word vectors (dim %d)", len(entries), dim)
    return EmbeddingTable(entries, dim)


def read_word_vectors(path: str, dim: int) -> EmbeddingTable:
    with open(path, "r", encoding="utf-8") as f:
        return load_word_vectors(f, dim)


def synth_embedding(vocab: Sequence[str], dim: int, seed: int) -> EmbeddingTable:
    """Seeded unit-norm vectors, one per canonical vocabulary word."""
    if not vocab:
        raise ValueError("vocabulary is empty")
    rng = np.random.default_rng(seed)
    words = sorted({canonical(w) for w in vocab})
    mat = rng.standard_normal((len(words), dim))
    mat /= np.linalg.norm(mat, axis=1, keepdims=True)
    return EmbeddingTable(dict(zip(words, mat)), dim)
