"""Frozen word-vector table and the category/phrase similarity priors.

The table is read from GloVe's text layout (``word v1 ... vd`` per line).
Similarities between each proposal's detector category and the query's
subject/object words supervise the attention networks during training.
"""

from __future__ import annotations

import os
import logging
from dataclasses import dataclass

import numpy as np

from kprn.errors import ContractViolation, ParseError

log = logging.getLogger(__name__)

UNK = "unk"


class EmbeddingTable:
    """Immutable word -> vector map with an ``"unk"`` fallback."""

    def __init__(self, vectors, dim):
        self.dim = int(dim)
        self._vectors = dict(vectors)
        if UNK not in self._vectors:
            self._vectors[UNK] = np.zeros(self.dim)
        for w, v in self._vectors.items():
            if v.shape != (self.dim,):
                raise ContractViolation(f"vector for {w!r} has shape {v.shape}, expected ({self.dim},)")
            v.setflags(write=False)

    def __contains__(self, word):
        return word.lower() in self._vectors

    def __len__(self):
        return len(self._vectors)

    @property
    def words(self):
        return list(self._vectors)

    def lookup(self, word):
        """Vector for ``word`` (case-folded), else the ``"unk"`` vector."""
        v = self._vectors.get(word.lower())
        return self._vectors[UNK] if v is None else v

    def phrase(self, words):
        """Mean vector of a (possibly multi-word) phrase; unk for an empty one."""
        if isinstance(words, str):
            words = words.split()
        if not words:
            return self._vectors[UNK]
        if len(words) == 1:
            return self.lookup(words[0])
        return np.mean([self.lookup(w) for w in words], axis=0)

    def dumps(self):
        """GloVe text layout, insertion order, shortest round-tripping floats."""
        return "".join(
            w + " " + " ".join(repr(float(x)) for x in v) + "\n" for w, v in self._vectors.items()
        )


def load_embeddings(source):
    """Parse a GloVe-style text stream (file object, path, or string content
    wrapped in ``io.StringIO``).

    Duplicate words: the last occurrence wins and a warning is logged.
    """
    if isinstance(source, (str, bytes, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return load_embeddings(fh)
    vectors = {}
    dim = None
    for lineno, line in enumerate(source, start=1):
        parts = line.split()
        if not parts:
            continue
        word, values = parts[0].lower(), parts[1:]
        if dim is None:
            if not values:
                raise ParseError("no vector values after the word", line=lineno)
            dim = len(values)
        elif len(values) != dim:
            raise ParseError(f"expected {dim} values, found {len(values)}", line=lineno)
        try:
            vec = np.array([float(x) for x in values], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if not np.isfinite(vec).all():
            raise ParseError("non-finite value", line=lineno)
        if word in vectors:
            log.warning("line %d: duplicate word %r, keeping the last vector", lineno, word)
        vectors[word] = vec
    if dim is None:
        raise ParseError("empty embedding stream")
    return EmbeddingTable(vectors, dim)


def cosine(a, b):
    """Cosine similarity; 0 when either vector has zero norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"cosine: dimensions {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class KnowledgePriors:
    sim_subject: np.ndarray
    sim_object: np.ndarray


def knowledge_priors(table, categories, subject, obj=""):
    """Cosine similarity of each proposal category to the subject and object
    phrases. An empty object phrase gives all-zero object similarities."""
    if len(categories) == 0:
        raise ContractViolation("knowledge_priors: no proposal categories")
    emb_s = table.phrase(subject)
    cats = [table.phrase(c) for c in categories]
    sim_s = np.array([cosine(c, emb_s) for c in cats])
    if obj:
        emb_o = table.phrase(obj)
        sim_o = np.array([cosine(c, emb_o) for c in cats])
    else:
        sim_o = np.zeros(len(cats))
    return KnowledgePriors(sim_s, sim_o)
