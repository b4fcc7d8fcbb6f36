"""Greedy and beam-search generation of the next step."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from mmscript.batch import Batch, collate
from mmscript.corpus import TrainingExample
from mmscript.model import EncoderOutput, RetrievedEncoding, ScriptModel
from mmscript.text import MAX_TARGET_TOKENS, SPECIAL_TOKENS, Tokenizer


@dataclass
class BeamHypothesis:
    tokens: list[int]          # generated ids, <bos> excluded
    logprob: float = 0.0
    order: int = 0             # creation counter, last tie-breaker
    finished: bool = False

    def score(self, length_alpha: float) -> float:
        n = max(len(self.tokens), 1)
        return self.logprob / (n ** length_alpha)


@dataclass
class BeamResult:
    best: BeamHypothesis
    finished: list[BeamHypothesis] = field(default_factory=list)


def banned_token_mask(tokenizer: Tokenizer, dtype=torch.bool) -> torch.Tensor:
    """True for special tokens a decoder must never emit (all but <eos>)."""
    ban = torch.zeros(tokenizer.vocab_size, dtype=dtype)
    ban[: len(SPECIAL_TOKENS)] = True
    ban[tokenizer.eos_id] = False
    return ban


def _step_logprobs(model: ScriptModel, prefix: torch.Tensor, enc: EncoderOutput, retr: RetrievedEncoding,
                   ban: torch.Tensor, pad_id: int) -> torch.Tensor:
    out = model.decode(prefix, enc, retr, pad_id=pad_id)
    logp = torch.log_softmax(out.logits[:, -1].double(), dim=-1)
    return logp.masked_fill(ban, float("-inf"))


@torch.no_grad()
def greedy_decode(model: ScriptModel, tokenizer: Tokenizer, batch: Batch,
                  max_len: int = MAX_TARGET_TOKENS) -> list[list[int]]:
    """Batched argmax decoding; returns generated ids without <bos>/<eos>."""
    model.eval()
    enc = model.encode_selective(batch)
    retr = model.encode_retrieved(enc, batch)
    B = batch.size
    ban = banned_token_mask(tokenizer)
    prefix = torch.full((B, 1), tokenizer.bos_id, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    for _ in range(max_len):
        logp = _step_logprobs(model, prefix, enc, retr, ban, tokenizer.pad_id)
        nxt = logp.argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, tokenizer.pad_id), nxt)
        prefix = torch.cat([prefix, nxt[:, None]], 1)
        done |= nxt == tokenizer.eos_id
        if bool(done.all()):
            break
    out = []
    for row in prefix[:, 1:].tolist():
        ids = []
        for t in row:
            if t in (tokenizer.eos_id, tokenizer.pad_id):
                break
            ids.append(t)
        out.append(ids)
    return out


def _select_rows(enc: EncoderOutput, retr: RetrievedEncoding, n: int) -> tuple[EncoderOutput, RetrievedEncoding]:
    def rep(t):
        return None if t is None else t.expand(n, *t.shape[1:])

    e = EncoderOutput(rep(enc.hidden), rep(enc.raw), rep(enc.mask), rep(enc.alphas), rep(enc.segment_valid))
    r = RetrievedEncoding(rep(retr.hidden), rep(retr.raw), rep(retr.mask), rep(retr.betas), rep(retr.count))
    return e, r


@torch.no_grad()
def beam_search(model: ScriptModel, tokenizer: Tokenizer, batch: Batch, beam: int = 5,
                max_len: int = MAX_TARGET_TOKENS, length_alpha: float = 1.0) -> BeamResult:
    """Beam search for a single-example batch.

    Each step expands every live hypothesis over the vocabulary and keeps the
    ``beam`` best candidates by cumulative log-probability; ties go to the lower
    token id, then the earlier-created parent. Candidates ending in <eos> are
    set aside as finished. Search stops once ``beam`` hypotheses have finished
    or ``max_len`` tokens were generated; unfinished hypotheses at that point
    are kept as truncated outputs. The result maximizes
    ``logprob / length ** length_alpha``.
    """
    if beam <= 0:
        raise ValueError("beam must be positive")
    if max_len <= 0:
        raise ValueError("max_len must be positive")
    if batch.size != 1:
        raise ValueError("beam_search decodes one example at a time")
    model.eval()
    enc = model.encode_selective(batch)
    retr = model.encode_retrieved(enc, batch)
    ban = banned_token_mask(tokenizer)
    eos = tokenizer.eos_id

    alive = [BeamHypothesis([], 0.0, 0)]
    finished: list[BeamHypothesis] = []
    counter = 1
    for _ in range(max_len):
        prefix = torch.tensor([[tokenizer.bos_id] + h.tokens for h in alive], dtype=torch.long)
        e, r = _select_rows(enc, retr, len(alive))
        logp = _step_logprobs(model, prefix, e, r, ban, tokenizer.pad_id)
        width = min(beam, logp.shape[1])
        cands = []
        for i, h in enumerate(alive):
            top = torch.topk(logp[i], width)
            for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                if lp == float("-inf"):
                    continue
                cands.append((h.logprob + lp, tok, i))
        cands.sort(key=lambda c: (-c[0], c[1], alive[c[2]].order))
        new_alive = []
        for total, tok, i in cands[:beam]:
            hyp = BeamHypothesis(alive[i].tokens + [tok], total, counter)
            counter += 1
            if tok == eos:
                hyp.finished = True
                finished.append(hyp)
            else:
                new_alive.append(hyp)
        alive = new_alive
        if not alive or len(finished) >= beam:
            break
    pool = finished + alive if (alive and len(finished) < beam) else finished
    best = max(pool, key=lambda h: (h.score(length_alpha), -h.order))
    return BeamResult(best, finished)


def strip_eos(tokens: Sequence[int], eos_id: int) -> list[int]:
    return [t for t in tokens if t != eos_id]


def generate(model: ScriptModel, tokenizer: Tokenizer, example: TrainingExample,
             retrieved: Sequence[str] | None = None, beam: int = 5, max_len: int = MAX_TARGET_TOKENS,
             length_alpha: float = 1.0) -> str:
    batch = collate(tokenizer, [example], [list(retrieved or [])])
    result = beam_search(model, tokenizer, batch, beam, max_len, length_alpha)
    return tokenizer.decode(strip_eos(result.best.tokens, tokenizer.eos_id))


def generate_greedy(model: ScriptModel, tokenizer: Tokenizer, examples: Sequence[TrainingExample],
                    retrieved: Sequence[Sequence[str]] | None = None, max_len: int = MAX_TARGET_TOKENS,
                    batch_size: int = 64) -> list[str]:
    out = []
    for s in range(0, len(examples), batch_size):
        chunk = examples[s:s + batch_size]
        retr = None if retrieved is None else [list(r) for r in retrieved[s:s + batch_size]]
        batch = collate(tokenizer, chunk, retr)
        out.extend(tokenizer.decode(ids) for ids in greedy_decode(model, tokenizer, batch, max_len))
    return out
