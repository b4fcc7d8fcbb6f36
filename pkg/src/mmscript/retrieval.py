"""Sentence embedding, step index, next-step retrieval and negative sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.feature_extraction.text import HashingVectorizer, TfidfTransformer

from mmscript.corpus import Corpus, TrainingExample
from mmscript.text import normalize

DEFAULT_DIM = 512
RETRIEVED_K = 5
NEGATIVE_POOL = 20
# scores closer than this are ties; keeps rank order independent of summation order
SCORE_DECIMALS = 12

_INDEX_MAGIC = b"MMSIDX01"
_NO_SUCCESSOR = 0xFFFFFFFF


def _features(text: str) -> list[str]:
    toks = normalize(text)
    return toks + [f"{a} {b}" for a, b in zip(toks, toks[1:])]


class Embedder:
    """TF-IDF over word unigrams and bigrams, hashed to ``dim`` buckets, L2-normalized."""

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim
        self._hasher = HashingVectorizer(
            analyzer=_features, n_features=dim, alternate_sign=False, norm=None
        )
        self._tfidf = TfidfTransformer(norm="l2", smooth_idf=True)
        self.fitted = False

    def fit(self, texts: Iterable[str]) -> Embedder:
        texts = list(texts)
        if not texts:
            raise ValueError("cannot fit the embedder on no texts")
        self._tfidf.fit(self._hasher.transform(texts))
        self.fitted = True
        return self

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not self.fitted:
            raise RuntimeError("embedder is not fitted")
        if len(texts) == 0:
            return np.zeros((0, self.dim))
        return self._tfidf.transform(self._hasher.transform(list(texts))).toarray()

    def embed(self, text: str) -> np.ndarray:
        """Unit vector for ``text``; the zero vector when it has no features."""
        return self.embed_many([text])[0]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


@dataclass(frozen=True)
class IndexEntry:
    step_text: str
    task_id: str
    successor: str | None


@dataclass
class RetrievedSet:
    steps: list[str] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    task_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)


@dataclass
class NegativeSet:
    self_negatives: list[str]
    retrieved_negatives: list[str]
    shortfall: int = 0

    @property
    def texts(self) -> list[str]:
        return self.self_negatives + self.retrieved_negatives

    def __len__(self) -> int:
        return len(self.self_negatives) + len(self.retrieved_negatives)


class EmbeddingIndex:
    """Exact cosine index over training steps with successor links."""

    def __init__(self, entries: Sequence[IndexEntry], dim: int = DEFAULT_DIM,
                 vectors: np.ndarray | None = None):
        if not entries:
            raise ValueError("index needs at least one entry")
        self.entries = list(entries)
        self.embedder = Embedder(dim).fit(e.step_text for e in self.entries)
        if vectors is None:
            vectors = self.embedder.embed_many([e.step_text for e in self.entries])
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        self._has_successor = np.array([e.successor is not None for e in self.entries])
        self._task_ids = np.array([e.task_id for e in self.entries], dtype=object)

    @property
    def dim(self) -> int:
        return self.embedder.dim

    def __len__(self) -> int:
        return len(self.entries)

    def scores(self, text: str) -> np.ndarray:
        return self.vectors @ self.embedder.embed(text)

    def _rank(self, scores: np.ndarray, eligible: np.ndarray, k: int) -> np.ndarray:
        idx = np.flatnonzero(eligible)
        # stable sort keeps corpus order among equal scores
        order = np.argsort(-np.round(scores[idx], SCORE_DECIMALS), kind="stable")
        return idx[order[:k]]

    def save(self, path: str | Path) -> None:
        """Binary layout: magic, dim, count, then per entry the step text, task id,
        vector (float64) and successor entry offset (0xFFFFFFFF when absent)."""
        with Path(path).open("wb") as fh:
            fh.write(_INDEX_MAGIC)
            fh.write(struct.pack("<II", self.dim, len(self.entries)))
            for i, e in enumerate(self.entries):
                for s in (e.step_text, e.task_id):
                    b = s.encode("utf-8")
                    fh.write(struct.pack("<I", len(b)))
                    fh.write(b)
                fh.write(self.vectors[i].astype("<f8").tobytes())
                succ = i + 1 if e.successor is not None else _NO_SUCCESSOR
                fh.write(struct.pack("<I", succ))

    @classmethod
    def load(cls, path: str | Path) -> EmbeddingIndex:
        data = Path(path).read_bytes()
        if data[:8] != _INDEX_MAGIC:
            raise ValueError(f"{path} is not an index file")
        dim, count = struct.unpack_from("<II", data, 8)
        pos = 16
        raw = []
        vectors = np.empty((count, dim))
        for i in range(count):
            strs = []
            for _ in range(2):
                (n,) = struct.unpack_from("<I", data, pos)
                pos += 4
                strs.append(data[pos:pos + n].decode("utf-8"))
                pos += n
            vectors[i] = np.frombuffer(data, dtype="<f8", count=dim, offset=pos)
            pos += 8 * dim
            (succ,) = struct.unpack_from("<I", data, pos)
            pos += 4
            raw.append((strs[0], strs[1], succ))
        entries = [
            IndexEntry(text, tid, None if succ == _NO_SUCCESSOR else raw[succ][0])
            for text, tid, succ in raw
        ]
        return cls(entries, dim=dim, vectors=vectors)


def build_index(corpus: Corpus, dim: int = DEFAULT_DIM) -> EmbeddingIndex:
    """One entry per training step, in (task, step) order."""
    entries = []
    for task in corpus.tasks:
        texts = task.step_texts()
        for i, text in enumerate(texts):
            succ = texts[i + 1] if i + 1 < len(texts) else None
            entries.append(IndexEntry(text, task.id, succ))
    if not entries:
        raise ValueError("cannot build an index from an empty corpus")
    return EmbeddingIndex(entries, dim=dim)


def retrieve_next_steps(index: EmbeddingIndex, prev_step: str, k: int = RETRIEVED_K,
                        exclude_task: str | None = None) -> RetrievedSet:
    """Successors of the ``k`` indexed steps most similar to ``prev_step``.

    Entries without a successor are skipped; ties go to the earlier entry.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    scores = index.scores(prev_step)
    eligible = index._has_successor
    if exclude_task is not None:
        eligible = eligible & (index._task_ids != exclude_task)
    top = index._rank(scores, eligible, k)
    out = RetrievedSet()
    for i in top:
        e = index.entries[i]
        out.steps.append(e.successor)
        out.scores.append(float(scores[i]))
        out.task_ids.append(e.task_id)
    return out


def _norm_key(text: str) -> tuple[str, ...]:
    return tuple(normalize(text))


def _unique(texts: Iterable[str], exclude: tuple[str, ...]) -> list[str]:
    seen = {exclude}
    out = []
    for t in texts:
        key = _norm_key(t)
        if key in seen or not key:
            continue
        seen.add(key)
        out.append(t)
    return out


def similar_steps(index: EmbeddingIndex, text: str, pool: int = NEGATIVE_POOL) -> list[str]:
    """Texts of the ``pool`` indexed steps most similar to ``text`` (distinct texts)."""
    scores = np.round(index.scores(text), SCORE_DECIMALS)
    order = np.argsort(-scores, kind="stable")
    out: list[str] = []
    seen: set[tuple[str, ...]] = set()
    for i in order:
        t = index.entries[i].step_text
        key = _norm_key(t)
        if key in seen:
            continue
        seen.add(key)
        out.append(t)
        if len(out) == pool:
            break
    return out


def sample_negatives(index: EmbeddingIndex, example: TrainingExample, n_self: int, n_retr: int,
                     pool: int = NEGATIVE_POOL,
                     seed: int | np.random.SeedSequence | np.random.Generator = 0) -> NegativeSet:
    """Draw self-negatives from the example's own inputs and retrieved negatives
    from steps similar to its last history step. The target never appears."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    target = _norm_key(example.target)

    self_pool = [example.goal]
    if example.subgoal:
        self_pool.append(example.subgoal)
    for step, caption in example.history:
        self_pool.extend((step, caption))
    self_pool = _unique(self_pool, target)
    retr_pool = _unique(similar_steps(index, example.last_step, pool), target)

    def draw(candidates: list[str], n: int) -> list[str]:
        if n >= len(candidates):
            return list(candidates)
        picks = rng.choice(len(candidates), size=n, replace=False)
        return [candidates[i] for i in picks]

    self_neg = draw(self_pool, n_self)
    retr_neg = draw(retr_pool, n_retr)
    shortfall = (n_self - len(self_neg)) + (n_retr - len(retr_neg))
    return NegativeSet(self_neg, retr_neg, shortfall)
