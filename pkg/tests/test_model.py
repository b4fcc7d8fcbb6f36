import math
from functools import partial

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import micro_instance
from mmscript.batch import collate
from mmscript.corpus import build_examples
from mmscript.model import (
    GateOverride,
    ModelConfig,
    RetrievedEncoding,
    ScriptModel,
    contrastive_loss,
    generation_loss,
    gradients,
    load_checkpoint,
    save_checkpoint,
)

GATE_PARAMS = ("w_alpha.weight", "w_beta.weight", "dec_layers.0.w_gamma.weight", "w_y.weight", "w_y.bias",
                 "mask_embedding")


@pytest.fixture(scope="module")
def pieces(synth_splits, synth_tokenizer):
    examples = build_examples(synth_splits["train"])
    texts = sorted({s.step_text for t in synth_splits["train"].tasks for s in t.steps})
    return synth_tokenizer, examples, texts


def instance(pieces, seed, **kw):
    tok, examples, texts = pieces
    return micro_instance(seed, tok, examples, texts, **kw)


def fd_grad(model, batch, param, index, eps=1e-4):
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + eps
        up = model.total_loss(batch, lam=0.5).total.item()
        param[index] = orig - eps
        down = model.total_loss(batch, lam=0.5).total.item()
        param[index] = orig
    return (up - down) / (2 * eps)


def test_gate_parameters_are_distinct_tensors(pieces):
    model, _ = instance(pieces, 0)
    params = dict(model.named_parameters())
    ids = {id(params[n]) for n in GATE_PARAMS}
    assert len(ids) == len(GATE_PARAMS)


@pytest.mark.parametrize("seed", [1, 2])
def test_gradients_match_finite_differences_on_gate_params(pieces, seed):
    model, batch = instance(pieces, seed)
    grads = gradients(model, model.total_loss(batch, lam=0.5).total)
    params = dict(model.named_parameters())
    for name in GATE_PARAMS:
        p = params[name]
        for flat in range(p.numel()):
            idx = tuple(torch.unravel_index(torch.tensor(flat), p.shape))
            fd = fd_grad(model, batch, p, idx)
            an = grads[name][idx].item()
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6), (name, idx, fd, an)


def test_directional_derivative_every_parameter(pieces):
    model, batch = instance(pieces, 3)
    grads = gradients(model, model.total_loss(batch, lam=0.5).total)
    gen = torch.Generator().manual_seed(0)
    for name, p in model.named_parameters():
        u = torch.randn(p.shape, generator=gen, dtype=torch.float64)
        u /= u.norm()
        with torch.no_grad():
            p.add_(1e-4 * u)
            up = model.total_loss(batch, lam=0.5).total.item()
            p.sub_(2e-4 * u)
            down = model.total_loss(batch, lam=0.5).total.item()
            p.add_(1e-4 * u)
        fd = (up - down) / 2e-4
        an = float((grads[name] * u).sum())
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-6), name


def test_alpha_zero_is_ungated_encoder(pieces):
    model, batch = instance(pieces, 4)
    enc = model.encode_selective(batch, GateOverride(alpha=0.0))
    plain = model.encoder_stack(batch.enc_ids, batch.enc_mask)
    assert torch.allclose(enc.hidden, plain, atol=1e-10, rtol=0)


def test_alpha_one_replaces_segments_with_mask_embedding(pieces):
    model, batch = instance(pieces, 5)
    enc = model.encode_selective(batch, GateOverride(alpha=1.0))
    in_segment = batch.enc_seg >= 0
    rows = enc.hidden[in_segment]
    assert torch.equal(rows, model.mask_embedding.detach().expand_as(rows))
    # <cls> passes through
    assert torch.equal(enc.hidden[:, 0], enc.raw[:, 0])


def test_beta_gate_identities(pieces):
    model, batch = instance(pieces, 6)
    enc = model.encode_selective(batch)
    r0 = model.encode_retrieved(enc, batch, GateOverride(beta=0.0))
    assert torch.equal(r0.hidden, r0.raw.reshape(r0.hidden.shape))
    r1 = model.encode_retrieved(enc, batch, GateOverride(beta=1.0))
    present = torch.arange(batch.retr_ids.shape[1])[None] < batch.retr_count[:, None]
    rows = r1.hidden.view(*r1.raw.shape)[present]
    assert torch.equal(rows, model.mask_embedding.detach().expand_as(rows))


def test_gamma_zero_is_base_decoder(pieces):
    model, batch = instance(pieces, 7)
    enc = model.encode_selective(batch)
    retr = model.encode_retrieved(enc, batch)
    tgt = batch.tgt_ids[:, :-1]
    gated = model.decode(tgt, enc, retr, GateOverride(gamma=0.0))
    base = model.decode(tgt, enc, RetrievedEncoding(None, None, None, None, batch.retr_count))
    assert torch.allclose(gated.logits, base.logits, atol=1e-10, rtol=0)
    learned = model.decode(tgt, enc, retr)
    assert not torch.allclose(learned.logits, base.logits, atol=1e-6)


def test_example_without_retrieval_bypasses_fusion(pieces):
    tok, examples, texts = pieces
    model, _ = instance(pieces, 8)
    both = collate(tok, examples[:2], [[], texts[:2]])
    alone = collate(tok, examples[:1], [[]])
    _, _, out_both = model(both)
    _, _, out_alone = model(alone)
    T = out_alone.logits.shape[1]
    assert torch.allclose(out_both.logits[0, :T], out_alone.logits[0], atol=1e-10)


def test_padding_does_not_change_encoding(pieces):
    tok, examples, _ = pieces
    model, _ = instance(pieces, 9)
    short, long = sorted(examples[:40], key=lambda e: len(e.history))[::39]
    enc_pair = model.encode_selective(collate(tok, [short, long]))
    enc_one = model.encode_selective(collate(tok, [short]))
    T = enc_one.hidden.shape[1]
    assert torch.allclose(enc_pair.hidden[0, :T], enc_one.hidden[0], atol=1e-10)
    S = enc_one.alphas.shape[1]
    assert torch.allclose(enc_pair.alphas[0, :S], enc_one.alphas[0], atol=1e-12)
    assert torch.all(enc_pair.alphas[0, S:] == 0)


def test_decoder_is_causal(pieces):
    model, batch = instance(pieces, 10)
    enc = model.encode_selective(batch)
    retr = model.encode_retrieved(enc, batch)
    tgt = batch.tgt_ids[:, :-1].clone()
    base = model.decode(tgt, enc, retr).logits
    tgt[:, -1] = 11  # change the last input token only
    changed = model.decode(tgt, enc, retr).logits
    assert torch.allclose(base[:, :-1], changed[:, :-1], atol=1e-12)


def test_output_shapes_and_gate_ranges(pieces):
    model, batch = instance(pieces, 11)
    enc, retr, out = model(batch)
    B, Tt = batch.tgt_ids.shape
    assert out.logits.shape == (B, Tt - 1, model.cfg.vocab_size)
    assert enc.alphas.shape == (B, int(batch.n_segments.max()))
    for g in [enc.alphas[enc.segment_valid], retr.betas[retr.betas > 0], *out.gammas]:
        assert torch.all((g > 0) & (g < 1))


def test_contrastive_closed_forms():
    for K in (1, 5, 10):
        assert abs(contrastive_loss(torch.tensor(0.3, dtype=torch.float64), torch.full((K,), 0.3,
                   dtype=torch.float64)).item() - math.log(K + 1)) < 1e-12
    val = contrastive_loss(1.0, [0.0] * 5, tau=1.0).item()
    assert abs(val - math.log((math.e + 5) / math.e)) < 1e-12
    with pytest.raises(ValueError):
        contrastive_loss(1.0, [])


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.lists(st.floats(0, 1), min_size=1, max_size=8), st.floats(0.1, 5))
def test_contrastive_lower_bound_and_temperature(y_pos, y_neg, tau):
    loss = contrastive_loss(y_pos, y_neg, tau).item()
    assert loss >= -1e-12
    # masked extra negatives change nothing
    padded = contrastive_loss(torch.tensor([y_pos], dtype=torch.float64),
                              torch.tensor([y_neg + [0.9]], dtype=torch.float64), tau,
                              torch.tensor([[True] * len(y_neg) + [False]])).item()
    assert padded == pytest.approx(loss, abs=1e-12)


def test_generation_loss_ignores_padding():
    logits = torch.randn(1, 3, 5, dtype=torch.float64)
    tgt = torch.tensor([[2, 3, 0]])
    want = -torch.log_softmax(logits[0, :2], -1)[[0, 1], [2, 3]].mean()
    assert generation_loss(logits, tgt, 0).item() == pytest.approx(want.item(), abs=1e-14)


def test_lambda_zero_leaves_contrastive_head_untouched(pieces):
    model, batch = instance(pieces, 12)
    out = model.total_loss(batch, lam=0.0)
    assert out.cl is None and torch.equal(out.total, out.gen)
    g = gradients(model, out.total)
    assert not g["w_y.weight"].any() and not g["w_y.bias"].any()


def test_lambda_scales_total(pieces):
    model, batch = instance(pieces, 13)
    a = model.total_loss(batch, lam=0.5)
    assert a.total.item() == pytest.approx(a.gen.item() + 0.5 * a.cl.item(), abs=1e-12)


def test_checkpoint_round_trip(pieces, tmp_path):
    model, batch = instance(pieces, 14)
    save_checkpoint(model, tmp_path / "m.ckpt", {"epoch": 3})
    again, header = load_checkpoint(tmp_path / "m.ckpt")
    assert header["epoch"] == 3
    model.eval()
    assert torch.equal(model(batch)[2].logits, again(batch)[2].logits)
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_too_long_input_rejected():
    model = ScriptModel(ModelConfig(20, d_model=8, n_heads=2, max_positions=4))
    with pytest.raises(ValueError, match="max_positions"):
        model.embed_tokens(torch.zeros(1, 5, dtype=torch.long))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(10, d_model=10, n_heads=3)


def test_handcrafted_two_dim_gate():
    """d_model=2, one head: recompute pooling, sigmoid and blend by hand for a 2-token segment."""
    import numpy as np

    model = ScriptModel(ModelConfig(20, d_model=2, n_heads=1, n_enc_layers=1, n_dec_layers=1, ffn_dim=4,
                                    dropout_rate=0.0))
    t = partial(torch.tensor, dtype=torch.float64)
    with torch.no_grad():
        att = model.pool_alpha
        att.q.weight.copy_(t([[1.0, 0.5], [0.0, 2.0]]))
        att.k.weight.copy_(t([[0.3, -1.0], [1.0, 1.0]]))
        att.v.weight.copy_(t([[2.0, 0.0], [0.5, -1.0]]))
        att.o.weight.copy_(torch.eye(2))
        for lin in (att.q, att.k, att.v, att.o):
            lin.bias.zero_()
        model.w_alpha.weight.copy_(t([[0.4, -0.2, 1.0, 0.7]]))
        model.mask_embedding.copy_(t([0.25, -0.75]))
    # <cls> then one 2-token segment
    H = torch.tensor([[[1.0, 2.0], [0.5, -1.0], [-0.3, 0.8]]], dtype=torch.float64)
    seg = torch.tensor([[-1, 0, 0]])
    alphas, _, member = model.segment_gates(H, seg, 1)

    h0, Hs = H[0, 0].numpy(), H[0, 1:].numpy()
    Wq, Wk, Wv = (np.array(m) for m in ([[1.0, 0.5], [0.0, 2.0]], [[0.3, -1.0], [1.0, 1.0]], [[2.0, 0.0], [0.5, -1.0]]))
    q, K, V = Wq @ h0, Hs @ Wk.T, Hs @ Wv.T
    s = K @ q / np.sqrt(2.0)
    w = np.exp(s - s.max())
    w /= w.sum()
    pooled = w @ V
    alpha = 1 / (1 + np.exp(-(np.array([0.4, -0.2, 1.0, 0.7]) @ np.concatenate([h0, pooled]))))
    assert alphas[0, 0].item() == pytest.approx(alpha, abs=1e-14)
    blended = model._blend((member.double() * alphas[..., None]).sum(1), H)
    want = alpha * np.array([0.25, -0.75]) + (1 - alpha) * Hs
    assert np.allclose(blended[0, 1:].detach().numpy(), want, atol=1e-14)
    assert torch.equal(blended[0, 0], H[0, 0])


def test_alpha_follows_segment_content():
    model = ScriptModel(ModelConfig(20, d_model=8, n_heads=2, dropout_rate=0.0), seed=3)
    gen = torch.Generator().manual_seed(0)
    H = torch.randn(1, 7, 8, generator=gen, dtype=torch.float64)
    seg = torch.tensor([[-1, 0, 1, 1, 2, 2, 2]])
    # swap the contents of segment 1 (2 rows) and segment 2 (3 rows) by relabelling rows
    perm = [0, 1, 4, 5, 6, 2, 3]
    seg_swapped = torch.tensor([[-1, 0, 1, 1, 1, 2, 2]])
    a, _, _ = model.segment_gates(H, seg, 3)
    b, _, _ = model.segment_gates(H[:, perm], seg_swapped, 3)
    assert b[0, 1].item() == pytest.approx(a[0, 2].item(), abs=1e-14)
    assert b[0, 2].item() == pytest.approx(a[0, 1].item(), abs=1e-14)
    assert b[0, 0].item() == pytest.approx(a[0, 0].item(), abs=1e-14)


def test_retrieved_rows_and_single_token_step(pieces):
    tok, examples, texts = pieces
    model, _ = instance(pieces, 15)
    batch = collate(tok, examples[:1], [texts[:5]])
    enc = model.encode_selective(batch)
    retr = model.encode_retrieved(enc, batch)
    from mmscript.text import encode_retrieved

    assert retr.row_count(0) == sum(len(encode_retrieved(tok, t)) for t in texts[:5])
    # an empty text leaves only the <template> marker: pooling over one key returns its projection
    one = collate(tok, examples[:1], [[""]])
    enc1 = model.encode_selective(one)
    r1 = model.encode_retrieved(enc1, one)
    h = r1.raw[0, 0, :1]
    pooled = model.pool_beta.o(model.pool_beta.v(h))[0]
    beta = torch.sigmoid(model.w_beta(torch.cat([enc1.cls[0], pooled])))
    assert r1.betas[0, 0].item() == pytest.approx(beta.item(), abs=1e-12)


def test_w_beta_gradient_zero_without_retrieval(pieces):
    tok, examples, texts = pieces
    model, _ = instance(pieces, 16)
    batch = collate(tok, examples[:2], None, [texts[:2], texts[2:3]])
    g = gradients(model, model.total_loss(batch).total)
    assert not g["w_beta.weight"].any() and not g["dec_layers.0.w_gamma.weight"].any()
    assert g["w_alpha.weight"].any()


def test_generation_loss_closed_forms():
    V = 7
    assert generation_loss(torch.zeros(1, 3, V, dtype=torch.float64), torch.tensor([[1, 2, 3]]), 0).item() == \
        pytest.approx(math.log(V), abs=1e-14)
    logits = torch.tensor([[[2.0, 0.5, -1.0, 0.0], [0.1, 0.2, 0.3, 0.4]]], dtype=torch.float64)
    # -(log softmax[0][1] + log softmax[1][3]) / 2, evaluated independently
    lse0 = math.log(math.exp(2.0) + math.exp(0.5) + math.exp(-1.0) + 1.0)
    lse1 = math.log(sum(math.exp(x) for x in (0.1, 0.2, 0.3, 0.4)))
    want = ((lse0 - 0.5) + (lse1 - 0.4)) / 2
    assert generation_loss(logits, torch.tensor([[1, 3]]), pad_id=0).item() == pytest.approx(want, abs=1e-14)
    assert want == pytest.approx(1.5424425559224926, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.98), st.lists(st.floats(0.01, 0.98), min_size=1, max_size=6), st.integers(0, 5))
def test_contrastive_monotone(y_pos, y_neg, which):
    base = contrastive_loss(y_pos, y_neg).item()
    assert contrastive_loss(y_pos + 0.01, y_neg).item() < base
    bumped = list(y_neg)
    bumped[which % len(bumped)] += 0.01
    assert contrastive_loss(y_pos, bumped).item() > base
