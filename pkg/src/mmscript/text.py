"""Normalization, vocabulary, and segmented encoder input assembly."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from mmscript.corpus import Corpus, TrainingExample

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
CLS, MASK = "<cls>", "<mask>"
TITLE, METHOD, STEP, CAPTION, TEMPLATE = "<title>", "<method>", "<step>", "<caption>", "<template>"
SPECIAL_TOKENS = (PAD, UNK, BOS, EOS, CLS, MASK, TITLE, METHOD, STEP, CAPTION, TEMPLATE)

# Segment labels
SEG_CLS, SEG_GOAL, SEG_STEP, SEG_CAPTION = "CLS", "GOAL_SUBGOAL", "STEP", "CAPTION"

MAX_SEG_TOKENS = 30
MAX_TARGET_TOKENS = 40

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def normalize(text: str) -> list[str]:
    """Lowercase, then split into word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


class Tokenizer:
    """Word-level tokenizer. Special tokens occupy ids 0..10 in a fixed order."""

    def __init__(self, tokens: Sequence[str], min_freq: int = 1):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens in canonical order")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        self.min_freq = min_freq

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def __getattr__(self, name: str) -> int:
        # pad_id, unk_id, cls_id, ... for every special token
        if name.endswith("_id"):
            tok = f"<{name[:-3]}>"
            if tok in SPECIAL_TOKENS:
                return self.stoi[tok]
        raise AttributeError(name)

    def tokenize(self, text: str) -> list[str]:
        return normalize(text)

    def encode(self, text: str) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in normalize(text)]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        specials = set(range(len(SPECIAL_TOKENS))) if skip_special else set()
        return " ".join(self.itos[i] for i in ids if i not in specials)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Tokenizer:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def corpus_texts(corpus: Corpus) -> Iterable[str]:
    for task in corpus.tasks:
        yield task.goal
        if task.subgoal:
            yield task.subgoal
        for s in task.steps:
            yield s.step_text
            yield s.caption_text


def build_vocab(corpus: Corpus | Iterable[Corpus], min_freq: int = 1) -> Tokenizer:
    """Count normalized tokens; ids by frequency desc, then lexicographic."""
    corpora = [corpus] if isinstance(corpus, Corpus) else list(corpus)
    counts: Counter[str] = Counter()
    for c in corpora:
        for text in corpus_texts(c):
            counts.update(normalize(text))
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, n in counts.items() if n >= min_freq and t not in SPECIAL_TOKENS),
                  key=lambda t: (-counts[t], t))
    return Tokenizer(list(SPECIAL_TOKENS) + kept, min_freq=min_freq)


@dataclass(frozen=True)
class SegmentedSequence:
    token_ids: tuple[int, ...]
    segments: tuple[tuple[str, int, int], ...]

    @property
    def segment_count(self) -> int:
        """Number of segments after the leading <cls> span."""
        return len(self.segments) - 1

    def segment_ids(self) -> list[int]:
        """Per-token segment index: -1 for <cls>, j for segment X_j."""
        out = [0] * len(self.token_ids)
        for j, (_, start, end) in enumerate(self.segments):
            for p in range(start, end):
                out[p] = j - 1
        return out


def assemble_input(tokenizer: Tokenizer, example: TrainingExample,
                   max_seg_tokens: int = MAX_SEG_TOKENS) -> SegmentedSequence:
    ids = [tokenizer.cls_id]
    segments = [(SEG_CLS, 0, 1)]

    def add(label: str, parts: list[tuple[str, str]]) -> None:
        start = len(ids)
        for marker, text in parts:
            ids.append(tokenizer.stoi[marker])
            ids.extend(tokenizer.encode(text)[:max_seg_tokens])
        segments.append((label, start, len(ids)))

    head = [(TITLE, example.goal)]
    if example.subgoal:
        head.append((METHOD, example.subgoal))
    add(SEG_GOAL, head)
    for step, caption in example.history:
        add(SEG_STEP, [(STEP, step)])
        add(SEG_CAPTION, [(CAPTION, caption)])
    return SegmentedSequence(tuple(ids), tuple(segments))


def encode_target(tokenizer: Tokenizer, text: str, max_target: int = MAX_TARGET_TOKENS) -> list[int]:
    return [tokenizer.bos_id] + tokenizer.encode(text)[:max_target] + [tokenizer.eos_id]


def encode_retrieved(tokenizer: Tokenizer, text: str, max_seg_tokens: int = MAX_SEG_TOKENS) -> list[int]:
    return [tokenizer.template_id] + tokenizer.encode(text)[:max_seg_tokens]
