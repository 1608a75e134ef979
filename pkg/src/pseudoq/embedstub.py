"""Deterministic toy tokenizer/encoder and the PQEB embedding file format.

The encoder stands in for a neural model: every token is mapped to a
unit-length vector built from hashed character n-grams, so repeated tokens
share an embedding and words sharing a stem land close together. Any real
encoder can replace it by writing the same PQEB file.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._binio import Reader, Writer
from .errors import CorruptFileError, EmptyDocumentError, ValidationError

CLS = "[CLS]"
DEFAULT_LIMIT = 512
POSITION_NOISE = 0.005
PQEB_MAGIC = b"PQEB"

_WORD_RE = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class Token:
    surface: str
    index: int


@dataclass(eq=False)
class TokenEmbeddingMatrix:
    doc_id: str
    rows: np.ndarray  # (m, dim) float32
    has_cls: bool = True

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValidationError(f"{self.doc_id}: rows must be a non-empty 2-D matrix")
        if rows.shape[0] > DEFAULT_LIMIT:
            raise ValidationError(f"{self.doc_id}: {rows.shape[0]} rows exceeds {DEFAULT_LIMIT}")
        if not np.isfinite(rows).all():
            raise ValidationError(f"{self.doc_id}: non-finite embedding entry")
        self.rows = rows

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenEmbeddingMatrix):
            return NotImplemented
        return (
            self.doc_id == other.doc_id
            and self.has_cls == other.has_cls
            and self.rows.dtype == other.rows.dtype
            and np.array_equal(self.rows, other.rows)
        )


def tokenize(text: str, limit: int = DEFAULT_LIMIT) -> list[Token]:
    """Lowercase, split on whitespace and punctuation, prepend ``[CLS]``.

    The ``[CLS]`` token counts toward ``limit``.
    """
    if limit < 1:
        raise ValidationError(f"limit must be >= 1, got {limit}")
    words = _WORD_RE.findall(text.lower())
    if not words:
        raise EmptyDocumentError()
    surfaces = [CLS, *words][:limit]
    return [Token(s, i) for i, s in enumerate(surfaces)]


@lru_cache(maxsize=1 << 16)
def _cached_gram(key: str, dim: int, seed: int) -> np.ndarray:
    return _hashed_features(key, dim, seed)


def _hashed_features(key: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.shake_256(f"{seed}\x1f{key}".encode("utf-8")).digest(4 * dim)
    raw = np.frombuffer(digest, dtype="<u4").astype(np.float64)
    return raw / 2147483648.0 - 1.0  # signed, in [-1, 1)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _ngrams(surface: str) -> list[str]:
    padded = f"<{surface}>"
    grams = [f"w:{surface}"]
    grams.extend(f"g:{padded[i:i + 3]}" for i in range(max(1, len(padded) - 2)))
    return grams


@lru_cache(maxsize=1 << 18)
def token_vector(surface: str, dim: int, seed: int) -> np.ndarray:
    """Unit vector for one token surface: sum of its hashed n-gram features."""
    grams = _ngrams(surface)
    # the whole-word feature is unique to the token; character trigrams recur, so cache them
    acc = _hashed_features(grams[0], dim, seed)
    for gram in grams[1:]:
        acc += _cached_gram(gram, dim, seed)
    vec = _unit(acc)
    vec.flags.writeable = False
    return vec


@lru_cache(maxsize=64)
def _position_table(dim: int, seed: int) -> np.ndarray:
    table = np.stack([_unit(_hashed_features(f"pos:{i}", dim, seed)) for i in range(DEFAULT_LIMIT)])
    table *= POSITION_NOISE
    table.flags.writeable = False
    return table


def _multiset_vector(surfaces: Sequence[str], base: np.ndarray, dim: int, seed: int) -> np.ndarray:
    """Normalized sum of token vectors, summed in sorted-surface order so token order is irrelevant."""
    if not surfaces:
        return token_vector(CLS, dim, seed)
    order = sorted(range(len(surfaces)), key=surfaces.__getitem__)
    acc = base[order].sum(axis=0)
    norm = np.linalg.norm(acc)
    if norm < 1e-12:
        return token_vector(CLS, dim, seed)
    return acc / norm


def embed(
    tokens: Sequence[Token] | Sequence[str],
    dim: int,
    seed: int = 0,
    doc_id: str = "",
) -> TokenEmbeddingMatrix:
    """Embed a token sequence into an ``m x dim`` float32 matrix.

    Row i is the token's hashed unit vector plus a positional perturbation of
    norm ``POSITION_NOISE``. When the first token is ``[CLS]`` its row is the
    unperturbed normalized sum over the remaining tokens.
    """
    if dim < 2:
        raise ValidationError("dim too small")
    surfaces = [t.surface if isinstance(t, Token) else str(t) for t in tokens]
    if not surfaces:
        raise ValidationError("no tokens to embed")
    if len(surfaces) > DEFAULT_LIMIT:
        raise ValidationError(f"{len(surfaces)} tokens exceeds {DEFAULT_LIMIT}")

    base = np.array([token_vector(s, dim, seed) for s in surfaces])
    rows = base + _position_table(dim, seed)[: len(surfaces)]
    has_cls = surfaces[0] == CLS
    if has_cls:
        rows[0] = _multiset_vector(surfaces[1:], base[1:], dim, seed)
    return TokenEmbeddingMatrix(doc_id, rows.astype(np.float32), has_cls)


def embed_text(
    text: str,
    dim: int,
    seed: int = 0,
    doc_id: str = "",
    limit: int = DEFAULT_LIMIT,
) -> TokenEmbeddingMatrix:
    return embed(tokenize(text, limit), dim, seed, doc_id)


def embed_corpus(
    docs: Iterable[tuple[str, str]],
    dim: int,
    seed: int = 0,
    limit: int = DEFAULT_LIMIT,
) -> list[TokenEmbeddingMatrix]:
    out = []
    for doc_id, text in docs:
        try:
            out.append(embed_text(text, dim, seed, doc_id, limit))
        except EmptyDocumentError as exc:
            raise EmptyDocumentError(f"empty document: {doc_id}") from exc
    return out


def _check_uniform_dim(dims: Iterable[int]) -> int:
    seen = set(dims)
    if len(seen) > 1:
        raise ValidationError(f"mixed embedding dims in corpus: {sorted(seen)}")
    return seen.pop() if seen else 0


def write_embeddings(corpus: Sequence[TokenEmbeddingMatrix], path: str | Path) -> None:
    dim = _check_uniform_dim(doc.dim for doc in corpus)
    w = Writer()
    w.header(PQEB_MAGIC, dim)
    w.u64(len(corpus))
    for doc in corpus:
        w.text(doc.doc_id)
        w.u32(doc.m)
        w.u8(1 if doc.has_cls else 0)
        w.floats(doc.rows)
    w.save(path)


def read_embeddings(path: str | Path) -> list[TokenEmbeddingMatrix]:
    r = Reader.open(path)
    dim = r.header(PQEB_MAGIC)
    count = r.u64()
    out = []
    for _ in range(count):
        doc_id = r.text()
        m = r.u32()
        has_cls = r.u8()
        if has_cls > 1:
            raise CorruptFileError(f"{doc_id}: bad has_cls flag {has_cls}")
        if m < 1 or dim < 1:
            raise CorruptFileError(f"{doc_id}: empty embedding record")
        out.append(TokenEmbeddingMatrix(doc_id, r.floats(m, dim), bool(has_cls)))
    r.finish()
    return out
