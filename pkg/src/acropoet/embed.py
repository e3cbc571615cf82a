"""Pretrained word vectors: loading, cosine similarity, letter-filtered kNN.

The on-disk format is the common text release format: one entry per line,
token followed by `dim` decimals, single-space separated.
"""

from __future__ import annotations

import logging
import re

import numpy as np

from .corpus import AcrosticSpec, Vocabulary

log = logging.getLogger(__name__)


class EmbeddingError(ValueError):
    pass


class EmbeddingTable:
    """Read-only token -> vector map with cosine kNN queries."""

    def __init__(self, dim: int, vectors: dict[str, np.ndarray]):
        self.dim = dim
        self._vectors = vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, token: str) -> bool:
        return token.lower() in self._vectors

    def vector(self, token: str) -> np.ndarray:
        try:
            return self._vectors[token.lower()]
        except KeyError:
            raise EmbeddingError(f"token {token!r} not in embedding table")

    def tokens(self):
        return self._vectors.keys()


def load_embeddings(path, expected_dim: int) -> EmbeddingTable:
    """Parse a word-vector text file, failing hard on any malformed line."""
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != expected_dim + 1:
                raise EmbeddingError(
                    f"{path}:{lineno}: expected {expected_dim} values, "
                    f"got {len(parts) - 1}"
                )
            token = parts[0].lower()
            try:
                vec = np.array([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise EmbeddingError(f"{path}:{lineno}: bad float ({exc})")
            if token in vectors:
                log.warning("duplicate embedding for %r at line %d, "
                            "keeping the later one", token, lineno)
            vec.setflags(write=False)
            vectors[token] = vec
    log.info("loaded %d embeddings of dim %d from %s",
             len(vectors), expected_dim, path)
    return EmbeddingTable(dim=expected_dim, vectors=vectors)


def cosine(x: str, u: str, table: EmbeddingTable) -> float:
    """Cosine similarity between two tokens' vectors."""
    vx, vu = table.vector(x), table.vector(u)
    nx, nu = np.linalg.norm(vx), np.linalg.norm(vu)
    if nx == 0.0 or nu == 0.0:
        raise EmbeddingError(
            f"zero-norm vector for {x!r}" if nx == 0.0 else
            f"zero-norm vector for {u!r}"
        )
    return float(np.dot(vx, vu) / (nx * nu))


def knn_with_initial(
    topic: str,
    letter: str,
    table: EmbeddingTable,
    restrict_to: Vocabulary,
    k: int = 5,
) -> list[str]:
    """Top-k vocabulary tokens starting with `letter`, by cosine to `topic`.

    Candidates are vocabulary tokens that also have an embedding (tokens
    without a vector cannot be scored).  Ties break lexicographically.
    """
    if topic not in table:
        raise EmbeddingError(f"topic {topic!r} not in embedding table")
    scored = []
    for tok in restrict_to.non_special_tokens():
        if not tok.startswith(letter):
            continue
        if tok not in table or not np.any(table.vector(tok)):
            continue
        scored.append((-cosine(tok, topic, table), tok))
    scored.sort()
    return [tok for _, tok in scored[:k]]


def char_onehot_block(word: str) -> np.ndarray:
    """8x27 one-hot rows for a 1-8 letter word, padding the remainder."""
    word = word.lower()
    if not re.fullmatch(r"[a-z]{1,8}", word):
        raise EmbeddingError(
            f"word must be 1-8 characters a-z, got {word!r}"
        )
    return AcrosticSpec.from_word(word).onehot_block()
