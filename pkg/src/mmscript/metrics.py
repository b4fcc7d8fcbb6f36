"""Automatic evaluation: BLEU, ROUGE-L, self-BLEU, distinct-n, history overlap, Text@1."""

from __future__ import annotations

import json
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from mmscript.corpus import Corpus, TrainingExample
from mmscript.text import normalize

ROUGE_BETA = 1.2

Tokens = Sequence[str]


def _toks(x: str | Tokens) -> list[str]:
    return normalize(x) if isinstance(x, str) else list(x)


def ngrams(tokens: Tokens, n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def _closest_ref_len(c: int, ref_lens: Iterable[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def _combine(matches: Sequence[float], totals: Sequence[float], c: int, r: int, smooth: bool) -> float:
    logs = 0.0
    for k, (m, t) in enumerate(zip(matches, totals)):
        if smooth and k > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        logs += math.log(m / t)
    if c == 0:
        return 0.0
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(logs / len(matches))


def _clipped(cand: Tokens, refs: Sequence[Tokens], k: int) -> tuple[int, int]:
    counts = Counter(ngrams(cand, k))
    max_ref: Counter = Counter()
    for ref in refs:
        for g, c in Counter(ngrams(ref, k)).items():
            if c > max_ref[g]:
                max_ref[g] = c
    return sum(min(c, max_ref[g]) for g, c in counts.items()), sum(counts.values())


def bleu(candidates: Sequence[str | Tokens], references: Sequence[str | Sequence[str]], n: int = 4,
         smooth: bool = False) -> float:
    """Corpus BLEU-n: clipped n-gram precisions up to ``n`` pooled over the corpus,
    uniform geometric mean, brevity penalty against the closest reference length.

    Each reference entry is either a single text or a list of alternative texts.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(candidates) != len(references) or not candidates:
        raise ValueError("need equally many candidates and references (at least one)")
    matches, totals = [0] * n, [0] * n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        ct = _toks(cand)
        refs = [_toks(ref)] if isinstance(ref, str) else [_toks(r) for r in ref]
        for k in range(1, n + 1):
            m, t = _clipped(ct, refs, k)
            matches[k - 1] += m
            totals[k - 1] += t
        c_len += len(ct)
        r_len += _closest_ref_len(len(ct), [len(r) for r in refs])
    return _combine(matches, totals, c_len, r_len, smooth)


def sentence_bleu(candidate: str | Tokens, references: Sequence[str | Tokens], n: int = 4,
                  smooth: bool = False) -> float:
    ct = _toks(candidate)
    refs = [_toks(r) for r in references]
    matches, totals = zip(*(_clipped(ct, refs, k) for k in range(1, n + 1)))
    return _combine(matches, totals, len(ct), _closest_ref_len(len(ct), [len(r) for r in refs]), smooth)


def lcs_length(a: Tokens, b: Tokens) -> int:
    """Length of the longest common subsequence (bit-parallel, Hyyrö 2004)."""
    if not a or not b:
        return 0
    masks: dict[str, int] = {}
    for i, tok in enumerate(a):
        masks[tok] = masks.get(tok, 0) | (1 << i)
    full = (1 << len(a)) - 1
    v = full
    for tok in b:
        u = v & masks.get(tok, 0)
        v = ((v + u) | (v - u)) & full
    return len(a) - bin(v).count("1")


def rouge_l(candidate: str | Tokens, reference: str | Tokens, beta: float = ROUGE_BETA) -> float:
    """LCS-based F-measure with recall weight ``beta``."""
    c, r = _toks(candidate), _toks(reference)
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p)


def rouge_l_corpus(candidates: Sequence[str], references: Sequence[str], beta: float = ROUGE_BETA) -> float:
    if not candidates:
        return 0.0
    return float(np.mean([rouge_l(c, r, beta) for c, r in zip(candidates, references)]))


def self_bleu(outputs: Sequence[str | Tokens], n: int = 4, smooth: bool = False) -> float:
    """Mean sentence BLEU-n of each output against all the others as references."""
    if len(outputs) < 2:
        raise ValueError("self-BLEU needs at least two outputs")
    toks = [_toks(o) for o in outputs]
    N = len(toks)
    lens = np.array([len(t) for t in toks])

    # per order: n-gram -> (best count, sentence holding it, runner-up count)
    tops = []
    per_sent = []
    for k in range(1, n + 1):
        counts = [Counter(ngrams(t, k)) for t in toks]
        best: dict[tuple, list[int]] = {}
        for i, cnt in enumerate(counts):
            for g, c in cnt.items():
                e = best.get(g)
                if e is None:
                    best[g] = [c, i, 0]
                elif c > e[0]:
                    best[g] = [c, i, e[0]]
                elif c > e[2]:
                    e[2] = c
        tops.append(best)
        per_sent.append(counts)

    scores = []
    for i in range(N):
        matches, totals = [], []
        for k in range(n):
            m = t = 0
            for g, c in per_sent[k][i].items():
                b, owner, second = tops[k][g]
                other = second if owner == i else b
                m += min(c, other)
                t += c
            matches.append(m)
            totals.append(t)
        others = np.delete(lens, i)
        diff = np.abs(others - lens[i])
        r = int(others[np.lexsort((others, diff))[0]])
        scores.append(_combine(matches, totals, int(lens[i]), r, smooth))
    return float(np.mean(scores))


def distinct_n(outputs: Sequence[str | Tokens], n: int = 1) -> float:
    """Distinct n-gram types over total n-gram occurrences across all outputs."""
    if not outputs:
        raise ValueError("distinct-n needs at least one output")
    grams = [g for o in outputs for g in ngrams(_toks(o), n)]
    if not grams:
        warnings.warn(f"no output has {n} tokens; distinct-{n} defined as 0", stacklevel=2)
        return 0.0
    return len(set(grams)) / len(grams)


def history_overlap_counts(generated: str | Tokens, history: Sequence[str], n: int = 1) -> tuple[int, int]:
    """(generated n-grams found in the history's n-gram set, generated n-grams)."""
    seen = {g for h in history for g in ngrams(_toks(h), n)}
    grams = ngrams(_toks(generated), n)
    return sum(g in seen for g in grams), len(grams)


def history_overlap(generated: str | Tokens, history: Sequence[str], n: int = 1) -> float:
    if not history:
        raise ValueError("history must be non-empty")
    hit, total = history_overlap_counts(generated, history, n)
    return hit / total if total else 0.0


def history_overlap_corpus(generated: Sequence[str], histories: Sequence[Sequence[str]], n: int = 1) -> float:
    """Micro-average over all generated n-grams."""
    hits = total = 0
    for g, h in zip(generated, histories):
        a, b = history_overlap_counts(g, h, n)
        hits += a
        total += b
    return hits / total if total else 0.0


def text_at_1(generated: str, pool: Sequence[str], future: set[int], embedder) -> bool:
    """Hit when the pool entry most similar to ``generated`` is a future step.

    ``future`` holds pool indices; ties go to the earlier pool entry.
    """
    if not pool:
        raise ValueError("candidate pool is empty")
    scores = embedder.embed_many(list(pool)) @ embedder.embed(generated)
    return int(np.argmax(scores)) in future


def text_at_1_pool(example: TrainingExample, corpus: Corpus,
                   include_history: bool = True) -> tuple[list[str], set[int]]:
    """Pool of the example's task steps and the indices of its future steps."""
    steps = corpus.task(example.task_id).step_texts()
    # history ends at step index `first_future` (0-based) of the full task
    first_future = _target_index(example, steps)
    start = 0 if include_history else first_future
    pool = steps[start:]
    future = set(range(first_future - start, len(steps) - start))
    return pool, future


def _target_index(example: TrainingExample, steps: Sequence[str]) -> int:
    n = len(example.history)
    for i in range(n, len(steps)):
        if steps[i] == example.target and tuple(steps[i - n:i]) == tuple(h[0] for h in example.history):
            return i
    raise ValueError(f"example does not belong to task {example.task_id}")


def text_at_1_corpus(generated: Sequence[str], examples: Sequence[TrainingExample], corpus: Corpus, embedder,
                     include_history: bool = True) -> float:
    hits = 0
    for g, ex in zip(generated, examples):
        pool, future = text_at_1_pool(ex, corpus, include_history)
        hits += text_at_1(g, pool, future, embedder)
    return hits / len(examples) if examples else 0.0


ALL_METRICS = ("bleu", "rouge_l", "self_bleu", "distinct", "history_overlap", "text_at_1")


@dataclass
class MetricReport:
    bleu_1: float | None = None
    bleu_2: float | None = None
    bleu_3: float | None = None
    bleu_4: float | None = None
    rouge_l: float | None = None
    self_bleu_1: float | None = None
    self_bleu_2: float | None = None
    self_bleu_3: float | None = None
    self_bleu_4: float | None = None
    distinct_1: float | None = None
    distinct_2: float | None = None
    distinct_3: float | None = None
    distinct_4: float | None = None
    history_overlap_1: float | None = None
    history_overlap_2: float | None = None
    history_overlap_3: float | None = None
    history_overlap_4: float | None = None
    text_at_1: float | None = None

    def as_dict(self) -> dict[str, float]:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def table(self) -> str:
        d = self.as_dict()
        width = max((len(k) for k in d), default=0)
        return "\n".join(f"{k:<{width}}  {100 * v:6.2f}" for k, v in d.items())


def evaluate(generated: Sequence[str], examples: Sequence[TrainingExample], corpus: Corpus | None = None,
             embedder=None, which: Iterable[str] = ALL_METRICS, smooth: bool = False,
             include_history_in_pool: bool = True) -> MetricReport:
    which = set(which)
    unknown = which - set(ALL_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    if len(generated) != len(examples):
        raise ValueError("one generation per example is required")
    refs = [ex.target for ex in examples]
    rep = MetricReport()
    if "bleu" in which:
        for n in range(1, 5):
            setattr(rep, f"bleu_{n}", bleu(generated, refs, n, smooth))
    if "rouge_l" in which:
        rep.rouge_l = rouge_l_corpus(generated, refs)
    if "self_bleu" in which and len(generated) >= 2:
        for n in range(1, 5):
            setattr(rep, f"self_bleu_{n}", self_bleu(generated, n, smooth))
    if "distinct" in which:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for n in range(1, 5):
                setattr(rep, f"distinct_{n}", distinct_n(generated, n))
    if "history_overlap" in which:
        hist = [[h[0] for h in ex.history] for ex in examples]
        for n in range(1, 5):
            setattr(rep, f"history_overlap_{n}", history_overlap_corpus(generated, hist, n))
    if "text_at_1" in which and corpus is not None and embedder is not None:
        rep.text_at_1 = text_at_1_corpus(generated, examples, corpus, embedder, include_history_in_pool)
    return rep


def per_example_rows(generated: Sequence[str], examples: Sequence[TrainingExample], corpus: Corpus | None = None,
                     embedder=None) -> list[str]:
    rows = ["task_id\tposition\tbleu4\trouge_l\thistory_overlap_1\ttext_at_1"]
    for g, ex in zip(generated, examples):
        b4 = sentence_bleu(g, [ex.target], 4)
        rl = rouge_l(g, ex.target)
        ho = history_overlap(g, [h[0] for h in ex.history], 1)
        hit = ""
        if corpus is not None and embedder is not None:
            pool, future = text_at_1_pool(ex, corpus)
            hit = str(int(text_at_1(g, pool, future, embedder)))
        rows.append(f"{ex.task_id}\t{ex.position}\t{b4:.6f}\t{rl:.6f}\t{ho:.6f}\t{hit}")
    return rows
