"""Micro encoder-decoder with selective segment gating, retrieved-step encoding
and gated retrieval fusion in the decoder.

Shapes: B batch, T encoder length, S segments, k retrieved steps, Tr retrieved
step length, Tt target length, K negatives, D model width.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from mmscript.batch import SEG_PAD, Batch

CHECKPOINT_MAGIC = b"MMSCKPT1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_dim: int = 256
    max_positions: int = 512
    dropout_rate: float = 0.1
    # retrieval fusion in every decoder layer (False: top layer only)
    fuse_every_layer: bool = True
    # decoder cross-attention reads the gated bank (False: raw encoder states)
    cross_attend_gated: bool = True

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class GateOverride:
    """Fixed gate values that replace the learned α, β, γ (for diagnostics)."""

    alpha: float | None = None
    beta: float | None = None
    gamma: float | None = None


@dataclass
class EncoderOutput:
    hidden: torch.Tensor       # (B, T, D) gated bank
    raw: torch.Tensor          # (B, T, D) encoder states before gating
    mask: torch.Tensor         # (B, T) True on real tokens
    alphas: torch.Tensor       # (B, S)
    segment_valid: torch.Tensor  # (B, S)

    @property
    def cls(self) -> torch.Tensor:
        return self.raw[:, 0]


@dataclass
class RetrievedEncoding:
    hidden: torch.Tensor | None  # (B, k*Tr, D)
    raw: torch.Tensor | None     # (B, k, Tr, D)
    mask: torch.Tensor | None    # (B, k*Tr)
    betas: torch.Tensor | None   # (B, k)
    count: torch.Tensor          # (B,)

    @property
    def empty(self) -> bool:
        return self.hidden is None

    def row_count(self, b: int = 0) -> int:
        return 0 if self.mask is None else int(self.mask[b].sum())


@dataclass
class DecoderOutput:
    logits: torch.Tensor | None  # (B, Tt, V)
    hidden: torch.Tensor         # (B, Tt, D) top-layer states
    gammas: list[torch.Tensor]   # per fused layer: (B, Tt)


@dataclass
class LossBreakdown:
    gen: torch.Tensor
    cl: torch.Tensor | None
    total: torch.Tensor


def sinusoidal_positions(n: int, d: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(d)[None, :]
    angle = pos / torch.pow(10000.0, (2 * (i // 2)).double() / d)
    return torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle))


class MultiHead(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.h = n_heads
        self.dk = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                mask: torch.Tensor | None = None) -> torch.Tensor:
        """``mask`` broadcasts to (B, Q, K); True marks keys that may be attended."""
        B, Q, D = query.shape
        Kn = key.shape[1]
        q = self.q(query).view(B, Q, self.h, self.dk).transpose(1, 2)
        k = self.k(key).view(B, Kn, self.h, self.dk).transpose(1, 2)
        v = self.v(value).view(B, Kn, self.h, self.dk).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dk)
        if mask is not None:
            scores = scores.masked_fill(~mask[:, None], torch.finfo(scores.dtype).min)
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Q, D)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, d_model)
        self.dropout = dropout

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.dropout(F.gelu(self.fc1(x)), self.dropout, self.training)
        return self.fc2(h)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHead(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim, cfg.dropout_rate)
        self.p = cfg.dropout_rate

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        x = x + F.dropout(self.attn(h, h, h, mask[:, None, :]), self.p, self.training)
        x = x + F.dropout(self.ffn(self.ln2(x)), self.p, self.training)
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, fuse: bool):
        super().__init__()
        d = cfg.d_model
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = MultiHead(d, cfg.n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.cross_attn = MultiHead(d, cfg.n_heads)
        self.fuse = fuse
        if fuse:
            self.retr_attn = MultiHead(d, cfg.n_heads)
            self.retr_ln = nn.LayerNorm(d)
            self.w_gamma = nn.Linear(2 * d, 1, bias=False)
        self.ln3 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_dim, cfg.dropout_rate)
        self.p = cfg.dropout_rate

    def forward(self, x, self_mask, memory, memory_mask, retr, retr_mask, retr_present,
                gamma_override: float | None):
        h = self.ln1(x)
        x = x + F.dropout(self.self_attn(h, h, h, self_mask), self.p, self.training)
        h = self.ln2(x)
        x = x + F.dropout(self.cross_attn(h, memory, memory, memory_mask[:, None, :]), self.p, self.training)
        gamma = None
        if self.fuse and retr is not None:
            z = x
            z_r = self.retr_attn(z, retr, retr, retr_mask[:, None, :])
            if gamma_override is None:
                gamma = torch.sigmoid(self.w_gamma(torch.cat([z, z_r], dim=-1))).squeeze(-1)
            else:
                gamma = torch.full(z.shape[:2], float(gamma_override), dtype=z.dtype)
            fused = gamma[..., None] * self.retr_ln(z_r) + (1 - gamma[..., None]) * z
            # examples without retrieved steps bypass the fusion
            x = torch.where(retr_present[:, None, None], fused, z)
        x = x + F.dropout(self.ffn(self.ln3(x)), self.p, self.training)
        return x, gamma


class ScriptModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = 0, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Parameter(torch.empty(cfg.vocab_size, d))
        self.register_buffer("positions", sinusoidal_positions(cfg.max_positions, d), persistent=False)
        self.enc_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.enc_ln = nn.LayerNorm(d)
        self.pool_alpha = MultiHead(d, cfg.n_heads)
        self.w_alpha = nn.Linear(2 * d, 1, bias=False)
        self.pool_beta = MultiHead(d, cfg.n_heads)
        self.w_beta = nn.Linear(2 * d, 1, bias=False)
        self.mask_embedding = nn.Parameter(torch.empty(d))
        n = cfg.n_dec_layers
        self.dec_layers = nn.ModuleList(
            DecoderLayer(cfg, fuse=cfg.fuse_every_layer or i == n - 1) for i in range(n)
        )
        self.dec_ln = nn.LayerNorm(d)
        self.w_y = nn.Linear(d, 1)  # contrastive head; its bias is b_y
        self.to(dtype)
        self.reset_parameters(seed)

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.dtype

    def reset_parameters(self, seed: int | None = 0) -> None:
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.dim() >= 2:
                    fan_out, fan_in = p.shape[0], p.shape[1]
                    bound = math.sqrt(6.0 / (fan_in + fan_out))
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * 2 * bound - bound)
                elif name.endswith("mask_embedding"):
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * 0.02)
                elif ".ln" in name or name.startswith(("enc_ln", "dec_ln")) or "retr_ln" in name:
                    p.fill_(1.0 if name.endswith("weight") else 0.0)
                else:
                    p.zero_()

    # -- building blocks -------------------------------------------------

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        T = ids.shape[-1]
        if T > self.cfg.max_positions:
            raise ValueError(f"sequence length {T} exceeds max_positions {self.cfg.max_positions}")
        x = self.embed[ids] * math.sqrt(self.cfg.d_model) + self.positions[:T].to(self.dtype)
        return F.dropout(x, self.cfg.dropout_rate, self.training)

    def encoder_stack(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.embed_tokens(ids)
        for layer in self.enc_layers:
            x = layer(x, mask)
        return self.enc_ln(x)

    def _blend(self, gate: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
        g = gate[..., None]
        return g * self.mask_embedding + (1 - g) * states

    # -- encoders --------------------------------------------------------

    def segment_gates(self, H: torch.Tensor, enc_seg: torch.Tensor, n_segments: int,
                      gates: GateOverride | None = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """α_j = σ(W_α[h_0; MultiHead(h_0, H_j, H_j)]) for segments 0..n_segments-1.

        Returns (alphas (B, S), segment validity (B, S), token membership (B, S, T)).
        """
        B, T, D = H.shape
        S = max(n_segments, 1)
        seg = torch.arange(S)[None, :, None]
        member = enc_seg[:, None, :] == seg                          # (B, S, T)
        valid = member.any(-1)
        # keep padded segment rows finite; they are discarded below
        member_safe = member | (~valid[..., None] & (torch.arange(T) == 0))
        query = H[:, 0][:, None, :].expand(B, S, D)
        pooled = self.pool_alpha(query, H, H, member_safe)           # (B, S, D)
        if gates is not None and gates.alpha is not None:
            alphas = torch.full((B, S), float(gates.alpha), dtype=H.dtype)
        else:
            alphas = torch.sigmoid(self.w_alpha(torch.cat([query, pooled], -1))).squeeze(-1)
        return alphas * valid, valid, member

    def encode_selective(self, batch: Batch, gates: GateOverride | None = None) -> EncoderOutput:
        mask = batch.enc_mask
        H = self.encoder_stack(batch.enc_ids, mask)
        alphas, valid, member = self.segment_gates(H, batch.enc_seg, int(batch.n_segments.max()), gates)
        tok_alpha = (member.to(H.dtype) * alphas[..., None]).sum(1)   # (B, T); 0 on <cls>/pad
        hidden = self._blend(tok_alpha, H)
        return EncoderOutput(hidden, H, mask, alphas, valid)

    def encode_retrieved(self, enc: EncoderOutput, batch: Batch,
                         gates: GateOverride | None = None) -> RetrievedEncoding:
        if batch.retr_ids is None or int(batch.retr_count.max()) == 0:
            return RetrievedEncoding(None, None, None, None, batch.retr_count)
        B, k, Tr = batch.retr_ids.shape
        D = self.cfg.d_model
        ids = batch.retr_ids.reshape(B * k, Tr)
        tok_mask = ids != batch.pad_id
        # all-padding rows (fewer than k retrieved) attend to position 0 only
        safe = tok_mask | (~tok_mask.any(-1, keepdim=True) & (torch.arange(Tr) == 0))
        H_R = self.encoder_stack(ids, safe)                            # (B*k, Tr, D)
        query = enc.cls.repeat_interleave(k, dim=0)[:, None, :]         # (B*k, 1, D)
        pooled = self.pool_beta(query, H_R, H_R, safe[:, None, :]).squeeze(1)
        present = (torch.arange(k)[None, :] < batch.retr_count[:, None])  # (B, k)
        if gates is not None and gates.beta is not None:
            betas = torch.full((B, k), float(gates.beta), dtype=H_R.dtype)
        else:
            betas = torch.sigmoid(self.w_beta(torch.cat([query.squeeze(1), pooled], -1))).view(B, k)
        betas = betas * present
        H_R = H_R.view(B, k, Tr, D)
        hidden = self._blend(betas[..., None].expand(B, k, Tr), H_R)
        mask = tok_mask.view(B, k, Tr) & present[..., None]
        return RetrievedEncoding(hidden.reshape(B, k * Tr, D), H_R, mask.reshape(B, k * Tr), betas,
                                 batch.retr_count)

    # -- decoder ---------------------------------------------------------

    def decode(self, tgt_in: torch.Tensor, enc: EncoderOutput, retr: RetrievedEncoding,
               gates: GateOverride | None = None, with_logits: bool = True,
               pad_id: int = 0) -> DecoderOutput:
        """Teacher-forced decoder pass over ``tgt_in`` (B', Tt). ``B'`` may be a
        multiple of the encoder batch; encoder context is then repeated."""
        Bp, Tt = tgt_in.shape
        rep = Bp // enc.hidden.shape[0]
        memory = enc.hidden if self.cfg.cross_attend_gated else enc.raw
        memory_mask = enc.mask
        retr_h, retr_mask, retr_present = retr.hidden, retr.mask, None
        if rep > 1:
            memory = memory.repeat_interleave(rep, 0)
            memory_mask = memory_mask.repeat_interleave(rep, 0)
        if retr_h is not None:
            retr_present = retr.count > 0
            # rows with nothing retrieved: unmask one key so softmax stays finite
            retr_mask = retr_mask | (~retr_present[:, None] & (torch.arange(retr_mask.shape[1]) == 0))
            if rep > 1:
                retr_h = retr_h.repeat_interleave(rep, 0)
                retr_mask = retr_mask.repeat_interleave(rep, 0)
                retr_present = retr_present.repeat_interleave(rep, 0)
        causal = torch.tril(torch.ones(Tt, Tt, dtype=torch.bool))
        self_mask = causal[None] & (tgt_in != pad_id)[:, None, :]
        self_mask = self_mask | torch.eye(Tt, dtype=torch.bool)[None]
        x = self.embed_tokens(tgt_in)
        gammas = []
        g_over = gates.gamma if gates is not None else None
        for layer in self.dec_layers:
            x, g = layer(x, self_mask, memory, memory_mask, retr_h, retr_mask, retr_present, g_over)
            if g is not None:
                gammas.append(g)
        top = self.dec_ln(x)
        logits = top @ self.embed.T if with_logits else None
        return DecoderOutput(logits, top, gammas)

    def forward(self, batch: Batch, gates: GateOverride | None = None):
        enc = self.encode_selective(batch, gates)
        retr = self.encode_retrieved(enc, batch, gates)
        out = self.decode(batch.tgt_ids[:, :-1], enc, retr, gates, pad_id=batch.pad_id)
        return enc, retr, out

    # -- losses ----------------------------------------------------------

    def sequence_score(self, hidden: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """σ(Avg(W_y h + b_y)) over unpadded positions."""
        proj = self.w_y(hidden).squeeze(-1)
        m = mask.to(hidden.dtype)
        avg = (proj * m).sum(-1) / m.sum(-1).clamp(min=1)
        return torch.sigmoid(avg)

    def total_loss(self, batch: Batch, lam: float = 0.5, tau: float = 1.0,
                   gates: GateOverride | None = None) -> LossBreakdown:
        enc = self.encode_selective(batch, gates)
        retr = self.encode_retrieved(enc, batch, gates)
        pad = batch.pad_id
        tgt_in, tgt_out = batch.tgt_ids[:, :-1], batch.tgt_ids[:, 1:]
        pos = self.decode(tgt_in, enc, retr, gates, pad_id=pad)
        l_gen = generation_loss(pos.logits, tgt_out, pad)
        if lam == 0 or batch.neg_ids is None:
            return LossBreakdown(l_gen, None, l_gen)
        B, K, Tn = batch.neg_ids.shape
        neg_in = batch.neg_ids[:, :, :-1].reshape(B * K, Tn - 1)
        neg = self.decode(neg_in, enc, retr, gates, with_logits=False, pad_id=pad)
        y_pos = self.sequence_score(pos.hidden, tgt_in != pad)
        y_neg = self.sequence_score(neg.hidden, neg_in != pad).view(B, K)
        neg_valid = torch.arange(K)[None, :] < batch.neg_count[:, None]
        l_cl = contrastive_loss(y_pos, y_neg, tau, neg_valid)
        return LossBreakdown(l_gen, l_cl, l_gen + lam * l_cl)


def generation_loss(logits: torch.Tensor, target: torch.Tensor, pad_id: int = 0) -> torch.Tensor:
    """Mean token negative log-likelihood, padding excluded."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1), ignore_index=pad_id)


def contrastive_loss(y_pos: torch.Tensor, y_neg: torch.Tensor, tau: float = 1.0,
                     neg_valid: torch.Tensor | None = None) -> torch.Tensor:
    """InfoNCE negative log-likelihood of the positive, averaged over the batch.

    ``y_pos`` is (B,), ``y_neg`` is (B, K) with scores already squashed to (0, 1).
    """
    if not isinstance(y_pos, torch.Tensor):
        y_pos = torch.as_tensor(y_pos, dtype=torch.float64)
    y_neg = torch.as_tensor(y_neg, dtype=y_pos.dtype)
    if y_pos.dim() == 0:
        y_pos, y_neg = y_pos[None], y_neg[None]
        neg_valid = None if neg_valid is None else torch.as_tensor(neg_valid)[None]
    if y_neg.shape[-1] == 0:
        raise ValueError("contrastive loss needs at least one negative")
    if neg_valid is None:
        neg_valid = torch.ones_like(y_neg, dtype=torch.bool)
    if not bool(neg_valid.any(-1).all()):
        raise ValueError("contrastive loss needs at least one negative per example")
    logits = torch.cat([y_pos[:, None], y_neg], dim=1) / tau
    logits = logits.masked_fill(torch.cat([torch.ones_like(neg_valid[:, :1]), neg_valid], 1).logical_not(),
                                float("-inf"))
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def gradients(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of ``loss`` for every parameter; parameters the loss
    does not depend on get exact zeros."""
    named = list(model.named_parameters())
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(named, grads)}


# -- checkpoints ---------------------------------------------------------


def save_checkpoint(model: ScriptModel, path: str | Path, extra: dict | None = None) -> None:
    """Binary layout: magic, version, config JSON, then each parameter in
    declaration order as (name, ndim, shape, float64 data)."""
    path = Path(path)
    header = json.dumps({"config": asdict(model.cfg), **(extra or {})}, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for name, p in model.named_parameters():
            b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(b)))
            fh.write(b)
            fh.write(struct.pack("<I", p.dim()))
            fh.write(struct.pack(f"<{p.dim()}I", *p.shape))
            fh.write(p.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes())


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float64) -> tuple[ScriptModel, dict]:
    import numpy as np

    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    pos = 16 + hlen
    model = ScriptModel(ModelConfig.from_dict(header["config"]), dtype=dtype)
    params = dict(model.named_parameters())
    with torch.no_grad():
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
            pos += 8 * count
            params[name].copy_(torch.from_numpy(arr.copy()))
    model.eval()
    return model, header
