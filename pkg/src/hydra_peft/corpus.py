"""Corpus handling: JSONL ingestion, TF-IDF features, synthetic fixtures.

Featurization is the smooth-idf variant with raw term counts:

    tokenize  = lowercase, split on non-alphanumeric
    tf(t, d)  = count of t in d
    idf(t)    = ln((1 + D) / (1 + df(t))) + 1
    vector    = L2-normalized tf*idf over the lexicographically sorted vocabulary

Empty or all-out-of-vocabulary documents transform to the zero vector.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, UsageError
from .linalg import SeededRng

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass
class Document:
    id: str
    text: str
    task: str | None = None


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def validate_corpus(docs: list[Document]) -> list[Document]:
    seen = set()
    for doc in docs:
        if doc.id in seen:
            raise ParseError(f"duplicate document id {doc.id!r}")
        seen.add(doc.id)
    return docs


def load_jsonl(path) -> list[Document]:
    """One JSON object per line with fields id, text, optional task."""
    docs = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}: line {lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict) or "id" not in obj or "text" not in obj:
                raise ParseError(f"{path}: line {lineno}: need 'id' and 'text' fields")
            docs.append(Document(id=str(obj["id"]), text=str(obj["text"]),
                                 task=None if obj.get("task") is None else str(obj["task"])))
    return validate_corpus(docs)


def save_jsonl(path, docs: list[Document]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for doc in docs:
            obj = {"id": doc.id, "text": doc.text}
            if doc.task is not None:
                obj["task"] = doc.task
            f.write(json.dumps(obj, sort_keys=True) + "\n")


@dataclass
class TfIdfModel:
    vocabulary: dict[str, int]   # term -> column, sorted lexicographically
    idf: np.ndarray
    doc_count: int

    def dim(self) -> int:
        return len(self.vocabulary)


def tfidf_fit(docs: list[Document]) -> TfIdfModel:
    if not docs:
        raise UsageError("cannot fit tf-idf on an empty corpus")
    df: Counter = Counter()
    for doc in docs:
        df.update(set(tokenize(doc.text)))
    vocab = {term: i for i, term in enumerate(sorted(df))}
    n = len(docs)
    idf = np.zeros(len(vocab))
    for term, i in vocab.items():
        idf[i] = np.log((1.0 + n) / (1.0 + df[term])) + 1.0
    return TfIdfModel(vocabulary=vocab, idf=idf, doc_count=n)


def tfidf_transform(model: TfIdfModel, doc: Document | str) -> np.ndarray:
    text = doc.text if isinstance(doc, Document) else doc
    vec = np.zeros(model.dim())
    for term, count in Counter(tokenize(text)).items():
        col = model.vocabulary.get(term)
        if col is not None:
            vec[col] = count * model.idf[col]
    norm = np.sqrt((vec * vec).sum())
    if norm > 0.0:
        vec /= norm
    return vec


def tfidf_matrix(model: TfIdfModel, docs: list[Document]) -> np.ndarray:
    return np.stack([tfidf_transform(model, d) for d in docs])


def synth_corpus(n_components: int, docs_per_component: int, disjointness: float,
                 seed: int, doc_len: int = 12, pool_size: int = 10,
                 shared_pool_size: int = 10) -> list[Document]:
    """Corpus with planted components, recorded in each document's task tag.

    Each component owns a private term pool; every token is drawn from the
    private pool with probability `disjointness`, else from a pool common to
    all components. disjointness = 0 collapses everything onto the shared
    pool; 1 makes components fully disjoint.
    """
    if n_components < 1 or docs_per_component < 1:
        raise UsageError("component and document counts must be >= 1")
    if not (0.0 <= disjointness <= 1.0):
        raise UsageError(f"disjointness must be in [0, 1], got {disjointness}")
    rng = SeededRng(seed).derive("synth-corpus")
    shared = [f"common{j}" for j in range(shared_pool_size)]
    docs = []
    for c in range(n_components):
        own = [f"topic{c}term{j}" for j in range(pool_size)]
        for d in range(docs_per_component):
            coin = rng.uniform(doc_len)
            own_pick = rng.integers(doc_len, pool_size)
            shared_pick = rng.integers(doc_len, shared_pool_size)
            words = [own[own_pick[t]] if coin[t] < disjointness else shared[shared_pick[t]]
                     for t in range(doc_len)]
            docs.append(Document(id=f"c{c}d{d}", text=" ".join(words), task=f"component{c}"))
    return docs
