"""AdamW, warmup + cosine-annealing-with-restarts schedule, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from mmscript import metrics
from mmscript.batch import collate
from mmscript.corpus import Corpus, TrainingExample, build_examples
from mmscript.inference import generate_greedy
from mmscript.model import ModelConfig, ScriptModel, save_checkpoint
from mmscript.retrieval import (
    NEGATIVE_POOL,
    EmbeddingIndex,
    NegativeSet,
    _norm_key,
    _unique,
    retrieve_next_steps,
    similar_steps,
)
from mmscript.text import Tokenizer

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "L_gen", "L_cl", "L", "val_bleu4", "val_rougeL", "lr")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    lr_peak: float = 1e-5
    lr_min: float = 0.0
    adam_eps: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.01
    warmup_steps: int = 2000
    restart_period: int = 10000
    restart_mult: int = 1
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 10
    lam: float = 0.5
    tau: float = 1.0
    n_self: int = 4
    n_retr: int = 1
    negative_pool: int = NEGATIVE_POOL
    k_retrieved: int = 5
    exclude_own_task: bool = False
    max_history: int = 10
    seed: int = 0
    dtype: str = "float32"
    # model shape
    d_model: int = 128
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_dim: int = 256
    dropout_rate: float = 0.1
    fuse_every_layer: bool = True
    cross_attend_gated: bool = True

    def __post_init__(self) -> None:
        for name in ("lr_peak", "batch_size", "max_epochs", "patience", "restart_period", "restart_mult", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("warmup_steps", "lam", "n_self", "n_retr", "k_retrieved", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, d_model=self.d_model, n_heads=self.n_heads,
            n_enc_layers=self.n_enc_layers, n_dec_layers=self.n_dec_layers, ffn_dim=self.ffn_dim,
            dropout_rate=self.dropout_rate, fuse_every_layer=self.fuse_every_layer,
            cross_attend_gated=self.cross_attend_gated,
        )


def lr_schedule(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to ``lr_peak``, then cosine annealing with warm restarts."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    t = step - cfg.warmup_steps
    period = cfg.restart_period
    while t >= period:
        t -= period
        period *= cfg.restart_mult
    return cfg.lr_min + 0.5 * (cfg.lr_peak - cfg.lr_min) * (1 + math.cos(math.pi * t / period))


class NonFiniteGradient(FloatingPointError):
    pass


def adamw_update(param: torch.Tensor, grad: torch.Tensor, m: torch.Tensor, v: torch.Tensor, step: int,
                 lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-6,
                 weight_decay: float = 0.0) -> None:
    """In-place AdamW update of one tensor; ``step`` counts from 1."""
    m.mul_(beta1).add_(grad, alpha=1 - beta1)
    v.mul_(beta2).addcmul_(grad, grad, value=1 - beta2)
    m_hat = m / (1 - beta1 ** step)
    v_hat = v / (1 - beta2 ** step)
    param.mul_(1 - lr * weight_decay)
    param.sub_(lr * m_hat / (v_hat.sqrt() + eps))


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def adamw_step(state: AdamWState, params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None],
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-6,
               weight_decay: float = 0.0) -> AdamWState:
    """Apply one AdamW step to every parameter that has a gradient.

    Parameters whose gradient is ``None`` (absent from the loss graph) are left
    untouched, decay included.
    """
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise NonFiniteGradient(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if name not in state.exp_avg:
                state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            adamw_update(p, g, state.exp_avg[name], state.exp_avg_sq[name], state.step, lr,
                         beta1, beta2, eps, weight_decay)
    return state


@dataclass
class EpochRecord:
    epoch: int
    l_gen: float
    l_cl: float
    loss: float
    val_bleu4: float
    val_rouge_l: float
    lr: float

    def row(self) -> str:
        vals = (self.l_gen, self.l_cl, self.loss, self.val_bleu4, self.val_rouge_l, self.lr)
        return "\t".join([str(self.epoch)] + [repr(float(x)) for x in vals])


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    records: list[EpochRecord]
    best_epoch: int
    steps: int
    model: ScriptModel


class ExampleCache:
    """Retrieved steps and negative pools per example, computed once."""

    def __init__(self, index: EmbeddingIndex | None, examples: Sequence[TrainingExample], cfg: TrainConfig):
        self.index = index
        self.cfg = cfg
        self.retrieved: list[list[str]] = []
        self._self_pool: list[list[str]] = []
        self._retr_pool: list[list[str]] = []
        need_negs = cfg.lam > 0 and (cfg.n_self + cfg.n_retr) > 0
        for ex in examples:
            if index is not None and cfg.k_retrieved > 0:
                own = ex.task_id if cfg.exclude_own_task else None
                self.retrieved.append(retrieve_next_steps(index, ex.last_step, cfg.k_retrieved, own).steps)
            else:
                self.retrieved.append([])
            if need_negs:
                target = _norm_key(ex.target)
                pool = [ex.goal] + ([ex.subgoal] if ex.subgoal else [])
                for step, caption in ex.history:
                    pool.extend((step, caption))
                self._self_pool.append(_unique(pool, target))
                sims = similar_steps(index, ex.last_step, cfg.negative_pool) if index is not None else []
                self._retr_pool.append(_unique(sims, target))

    def negatives(self, i: int, rng: np.random.Generator) -> NegativeSet:
        def draw(cands: list[str], n: int) -> list[str]:
            if n >= len(cands):
                return list(cands)
            return [cands[j] for j in rng.choice(len(cands), size=n, replace=False)]

        s = draw(self._self_pool[i], self.cfg.n_self)
        r = draw(self._retr_pool[i], self.cfg.n_retr)
        return NegativeSet(s, r, self.cfg.n_self + self.cfg.n_retr - len(s) - len(r))


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Seeded shuffle of ``range(n)`` cut into consecutive batches."""
    order = np.random.default_rng([seed, epoch]).permutation(n).tolist()
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def validation_scores(model: ScriptModel, tokenizer: Tokenizer, examples: Sequence[TrainingExample],
                      retrieved: Sequence[Sequence[str]] | None) -> tuple[float, float, list[str]]:
    outputs = generate_greedy(model, tokenizer, examples, retrieved)
    refs = [ex.target for ex in examples]
    b4 = metrics.bleu(outputs, refs, 4)
    rl = metrics.rouge_l_corpus(outputs, refs)
    return b4, rl, outputs


def train(train_corpus: Corpus, valid_corpus: Corpus, tokenizer: Tokenizer, index: EmbeddingIndex | None,
          cfg: TrainConfig, out_dir: str | Path,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    if cfg.k_retrieved > 0 and index is None:
        raise ValueError("k_retrieved > 0 needs a step index (build one with the index command)")
    examples = build_examples(train_corpus, cfg.max_history)
    if not examples:
        raise ValueError("training set has no examples")
    valid = build_examples(valid_corpus, cfg.max_history)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    model = ScriptModel(cfg.model_config(tokenizer.vocab_size), seed=cfg.seed, dtype=DTYPES[cfg.dtype])
    params = dict(model.named_parameters())
    state = AdamWState()
    cache = ExampleCache(index, examples, cfg)
    valid_retr = None
    if index is not None and cfg.k_retrieved > 0:
        valid_retr = [retrieve_next_steps(index, ex.last_step, cfg.k_retrieved).steps for ex in valid]

    ckpt_path = out_dir / "best.ckpt"
    log_path = out_dir / "train_log.tsv"
    tokenizer.save(out_dir / "vocab.txt")
    records: list[EpochRecord] = []
    best: tuple[float, float] | None = None
    best_epoch, stale = 0, 0
    use_cl = cfg.lam > 0 and (cfg.n_self + cfg.n_retr) > 0

    with log_path.open("w") as logf:
        logf.write("\t".join(LOG_COLUMNS) + "\n")
        for epoch in range(1, cfg.max_epochs + 1):
            model.train()
            sums = np.zeros(3)
            n_batches = 0
            lr = 0.0
            for ids in epoch_batches(len(examples), cfg.batch_size, cfg.seed, epoch):
                chunk = [examples[i] for i in ids]
                retr = [cache.retrieved[i] for i in ids]
                negs = None
                if use_cl:
                    negs = [cache.negatives(i, np.random.default_rng([cfg.seed, epoch, i])).texts for i in ids]
                batch = collate(tokenizer, chunk, retr, negs)
                out = model.total_loss(batch, cfg.lam, cfg.tau)
                if not bool(torch.isfinite(out.total)):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {state.step + 1}")
                model.zero_grad(set_to_none=True)
                out.total.backward()
                lr = lr_schedule(cfg, state.step + 1)
                adamw_step(state, params, {n: p.grad for n, p in params.items()}, lr,
                           cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay)
                sums += [out.gen.item(), out.cl.item() if out.cl is not None else 0.0, out.total.item()]
                n_batches += 1

            b4, rl = 0.0, 0.0
            if valid:
                b4, rl, _ = validation_scores(model, tokenizer, valid, valid_retr)
            means = sums / max(n_batches, 1)
            rec = EpochRecord(epoch, means[0], means[1] if use_cl else float("nan"), means[2], b4, rl, lr)
            records.append(rec)
            logf.write(rec.row() + "\n")
            logf.flush()
            log.info("epoch %d  L=%.4f  bleu4=%.4f  rougeL=%.4f", epoch, rec.loss, b4, rl)
            if on_epoch is not None:
                on_epoch(rec)

            if best is None or (b4, rl) > best:
                best, best_epoch, stale = (b4, rl), epoch, 0
                save_checkpoint(model, ckpt_path, {"epoch": epoch, "step": state.step, "k_retrieved": cfg.k_retrieved,
                                                   "max_history": cfg.max_history,
                                                   "vocab_hash": tokenizer.fingerprint()})
                _write_manifest(ckpt_path, cfg, tokenizer, state.step, epoch)
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

    from mmscript.model import load_checkpoint

    best_model, _ = load_checkpoint(ckpt_path, dtype=DTYPES[cfg.dtype])
    return TrainResult(ckpt_path, log_path, records, best_epoch, state.step, best_model)


def _write_manifest(ckpt_path: Path, cfg: TrainConfig, tokenizer: Tokenizer, step: int, epoch: int) -> None:
    lines = [f"config\t{json.dumps(asdict(cfg), sort_keys=True)}",
             f"vocab_hash\t{tokenizer.fingerprint()}",
             f"vocab_size\t{tokenizer.vocab_size}",
             f"training_steps\t{step}",
             f"best_epoch\t{epoch}"]
    ckpt_path.with_name(ckpt_path.name + ".manifest.txt").write_text("\n".join(lines) + "\n")
