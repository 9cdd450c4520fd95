"""TF-IDF text features for the desk-scale text classifier.

Tokens are lowercased alphanumeric runs plus their adjacent 2-grams; no
stemming and no stop-word removal, since emotion cues often live in function
words and interjections.  Vocabularies are built from training text only and
serialize to JSON (``terms``, ``df``, ``n_docs``) for reuse across runs.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Unicode alphanumeric runs (word characters minus underscore).
_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

DEFAULT_MIN_DF = 2
DEFAULT_MAX_TERMS = 20000


def tokenize(text: str) -> list[str]:
    """Lowercased word 1-grams followed by their space-joined 2-grams.

    >>> tokenize("I'm fine!")
    ['i', 'm', 'fine', 'i m', 'm fine']
    """
    unigrams = _TOKEN_RE.findall(text.lower())
    bigrams = [f"{a} {b}" for a, b in zip(unigrams, unigrams[1:])]
    return unigrams + bigrams


@dataclass(frozen=True)
class Vocabulary:
    """Ordered term inventory with document frequencies.

    Term order is descending document frequency, ties broken
    lexicographically; it fixes the feature-vector component order.
    """

    terms: tuple[str, ...]
    df: tuple[int, ...]
    n_docs: int
    _index: dict[str, int] = field(init=False, repr=False, compare=False)
    _idf: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.terms) != len(self.df):
            raise ValueError("terms and df must have equal length")
        if len(set(self.terms)) != len(self.terms):
            raise ValueError("vocabulary terms must be distinct")
        if any(not 1 <= d <= self.n_docs for d in self.df):
            raise ValueError("each df must satisfy 1 <= df <= n_docs")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.terms)})
        # Smoothed idf: ln((1 + n_docs) / (1 + df)) + 1, so terms appearing in
        # every document still carry weight.
        idf = np.array(
            [math.log((1 + self.n_docs) / (1 + d)) + 1.0 for d in self.df],
            dtype=np.float64,
        )
        object.__setattr__(self, "_idf", idf)

    def __len__(self) -> int:
        return len(self.terms)

    def index(self, term: str) -> int | None:
        return self._index.get(term)


def build_vocabulary(
    train_token_lists: list[list[str]],
    min_df: int = DEFAULT_MIN_DF,
    max_terms: int = DEFAULT_MAX_TERMS,
) -> Vocabulary:
    """Build a vocabulary from training-split token lists.

    Terms with document frequency below ``min_df`` are dropped; if more than
    ``max_terms`` survive, the highest-df terms are kept (ties broken
    lexicographically, smallest first).
    """
    if min_df < 1:
        raise ValueError(f"min_df must be >= 1, got {min_df}")
    if max_terms < 1:
        raise ValueError(f"max_terms must be >= 1, got {max_terms}")
    if not train_token_lists:
        raise ValueError("cannot build a vocabulary from an empty training set")

    df_counts: dict[str, int] = {}
    for tokens in train_token_lists:
        for term in set(tokens):
            df_counts[term] = df_counts.get(term, 0) + 1

    kept = [(t, d) for t, d in df_counts.items() if d >= min_df]
    kept.sort(key=lambda item: (-item[1], item[0]))
    kept = kept[:max_terms]

    return Vocabulary(
        terms=tuple(t for t, _ in kept),
        df=tuple(d for _, d in kept),
        n_docs=len(train_token_lists),
    )


def tfidf_vector(tokens: list[str], vocab: Vocabulary) -> np.ndarray:
    """L2-normalized tf-idf vector over the vocabulary's term order.

    Component for term t is ``tf(t) * (ln((1 + n_docs) / (1 + df(t))) + 1)``.
    Unknown tokens are ignored; if no token is known the zero vector is
    returned unnormalized.
    """
    if len(vocab) == 0:
        raise ValueError("vocabulary is empty")
    vec = np.zeros(len(vocab), dtype=np.float64)
    for token in tokens:
        i = vocab.index(token)
        if i is not None:
            vec[i] += 1.0
    if not vec.any():
        return vec
    vec *= vocab._idf
    return vec / np.linalg.norm(vec)


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    payload = {
        "terms": list(vocab.terms),
        "df": list(vocab.df),
        "n_docs": vocab.n_docs,
    }
    Path(path).write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")


def load_vocabulary(path: str | Path) -> Vocabulary:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return Vocabulary(
        terms=tuple(raw["terms"]), df=tuple(raw["df"]), n_docs=int(raw["n_docs"])
    )
