"""Padding and collation of examples into model-ready tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from mmscript.corpus import TrainingExample
from mmscript.text import (
    MAX_SEG_TOKENS,
    MAX_TARGET_TOKENS,
    SegmentedSequence,
    Tokenizer,
    assemble_input,
    encode_retrieved,
    encode_target,
)

SEG_PAD = -2  # segment id of padding positions; <cls> is -1


@dataclass
class Batch:
    enc_ids: torch.Tensor          # (B, T)
    enc_seg: torch.Tensor          # (B, T) segment index per token
    n_segments: torch.Tensor       # (B,)
    tgt_ids: torch.Tensor          # (B, Tt) <bos> ... <eos> <pad>*
    retr_ids: torch.Tensor | None  # (B, k, Tr)
    retr_count: torch.Tensor       # (B,)
    neg_ids: torch.Tensor | None   # (B, K, Tn)
    neg_count: torch.Tensor        # (B,)
    pad_id: int = 0

    @property
    def size(self) -> int:
        return self.enc_ids.shape[0]

    @property
    def enc_mask(self) -> torch.Tensor:
        return self.enc_seg != SEG_PAD

    @property
    def retr_mask(self) -> torch.Tensor | None:
        return None if self.retr_ids is None else self.retr_ids != self.pad_id


def pad_2d(rows: Sequence[Sequence[int]], pad: int, width: int | None = None) -> torch.Tensor:
    width = max((len(r) for r in rows), default=0) if width is None else width
    out = torch.full((len(rows), max(width, 1)), pad, dtype=torch.long)
    for i, r in enumerate(rows):
        if r:
            out[i, : len(r)] = torch.tensor(list(r), dtype=torch.long)
    return out


def pad_3d(groups: Sequence[Sequence[Sequence[int]]], pad: int) -> torch.Tensor:
    depth = max((len(g) for g in groups), default=0)
    width = max((len(r) for g in groups for r in g), default=1)
    out = torch.full((len(groups), max(depth, 1), max(width, 1)), pad, dtype=torch.long)
    for i, g in enumerate(groups):
        for j, r in enumerate(g):
            out[i, j, : len(r)] = torch.tensor(list(r), dtype=torch.long)
    return out


def collate_sequences(tokenizer: Tokenizer, seqs: Sequence[SegmentedSequence],
                      targets: Sequence[Sequence[int]],
                      retrieved: Sequence[Sequence[str]] | None = None,
                      negatives: Sequence[Sequence[str]] | None = None,
                      max_seg_tokens: int = MAX_SEG_TOKENS,
                      max_target: int = MAX_TARGET_TOKENS) -> Batch:
    pad = tokenizer.pad_id
    for s in seqs:
        if any(end <= start for _, start, end in s.segments):
            raise ValueError("empty segment in encoder input")
    enc_ids = pad_2d([s.token_ids for s in seqs], pad)
    enc_seg = pad_2d([s.segment_ids() for s in seqs], SEG_PAD, width=enc_ids.shape[1])
    n_segments = torch.tensor([s.segment_count for s in seqs], dtype=torch.long)
    tgt_ids = pad_2d(targets, pad)

    retr_ids = None
    retr_count = torch.zeros(len(seqs), dtype=torch.long)
    if retrieved is not None and any(len(r) for r in retrieved):
        groups = [[encode_retrieved(tokenizer, t, max_seg_tokens) for t in r] for r in retrieved]
        retr_ids = pad_3d(groups, pad)
        retr_count = torch.tensor([len(g) for g in groups], dtype=torch.long)

    neg_ids = None
    neg_count = torch.zeros(len(seqs), dtype=torch.long)
    if negatives is not None and any(len(n) for n in negatives):
        groups = [[encode_target(tokenizer, t, max_target) for t in n] for n in negatives]
        neg_ids = pad_3d(groups, pad)
        neg_count = torch.tensor([len(g) for g in groups], dtype=torch.long)

    return Batch(enc_ids, enc_seg, n_segments, tgt_ids, retr_ids, retr_count, neg_ids, neg_count, pad)


def collate(tokenizer: Tokenizer, examples: Sequence[TrainingExample],
            retrieved: Sequence[Sequence[str]] | None = None,
            negatives: Sequence[Sequence[str]] | None = None,
            max_seg_tokens: int = MAX_SEG_TOKENS,
            max_target: int = MAX_TARGET_TOKENS) -> Batch:
    """Assemble, tokenize and pad a list of examples with their retrieved steps
    and negative texts (both optional)."""
    seqs = [assemble_input(tokenizer, ex, max_seg_tokens) for ex in examples]
    targets = [encode_target(tokenizer, ex.target, max_target) for ex in examples]
    return collate_sequences(tokenizer, seqs, targets, retrieved, negatives, max_seg_tokens, max_target)
