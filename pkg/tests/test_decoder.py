"""Decoder: causal structure, slot substitution, loss, optimizer, schedule."""

import math

import numpy as np
import pytest
import torch

from vischain.decoder import (
    AdamW,
    CausalDecoder,
    DecoderConfig,
    SlotBinding,
    init_parameters,
    lr_schedule,
    masked_next_token_loss,
)
from vischain.encoder import EncoderConfig, ExpertSpec
from vischain.errors import ConfigError, ProtocolError
from vischain.model import MultimodalModel

CFG = DecoderConfig(vocab_size=16, dim=16, n_layers=2, n_heads=2, mlp_hidden=24, max_seq_len=32, grid_slots=16)


def fresh_decoder(seed: int = 0, cfg: DecoderConfig = CFG) -> CausalDecoder:
    dec = CausalDecoder(cfg)
    init_parameters(dec, seed)
    return dec


def slot_binding(values: torch.Tensor, positions: list[tuple[int, int]], grid: list[int]) -> SlotBinding:
    return SlotBinding(
        batch_index=torch.tensor([b for b, _ in positions]),
        position=torch.tensor([p for _, p in positions]),
        values=values,
        grid_index=torch.tensor(grid),
    )


# --- forward oracle ---------------------------------------------------------


def numpy_forward_oracle(dec: CausalDecoder, ids: list[int]) -> np.ndarray:
    """Re-derive logits with explicit numpy: pre-norm blocks, causal softmax."""
    p = {k: v.detach().numpy().astype(np.float64) for k, v in dec.state_dict().items()}
    cfg = dec.cfg
    t = len(ids)

    def layer_norm(x, w, b):
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)  # biased, matching torch LayerNorm
        return (x - mu) / np.sqrt(var + 1e-5) * w + b

    def gelu(x):
        return x * 0.5 * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))

    x = p["tok_emb.weight"][ids] + p["pos_emb"][:t]
    for layer in range(cfg.n_layers):
        pre = f"blocks.{layer}."
        h = layer_norm(x, p[pre + "ln1.weight"], p[pre + "ln1.bias"])
        qkv = h @ p[pre + "attn.qkv.weight"].T + p[pre + "attn.qkv.bias"]
        heads_out = np.zeros((t, cfg.dim))
        hd = cfg.dim // cfg.n_heads
        for head in range(cfg.n_heads):
            q = qkv[:, head * hd : (head + 1) * hd]
            k = qkv[:, cfg.dim + head * hd : cfg.dim + (head + 1) * hd]
            v = qkv[:, 2 * cfg.dim + head * hd : 2 * cfg.dim + (head + 1) * hd]
            scores = q @ k.T / math.sqrt(hd)
            for row in range(t):
                scores[row, row + 1 :] = -np.inf
            scores -= scores.max(-1, keepdims=True)
            attn = np.exp(scores)
            attn /= attn.sum(-1, keepdims=True)
            heads_out[:, head * hd : (head + 1) * hd] = attn @ v
        x = x + heads_out @ p[pre + "attn.proj.weight"].T + p[pre + "attn.proj.bias"]
        h = layer_norm(x, p[pre + "ln2.weight"], p[pre + "ln2.bias"])
        h = gelu(h @ p[pre + "mlp.0.weight"].T + p[pre + "mlp.0.bias"])
        x = x + h @ p[pre + "mlp.2.weight"].T + p[pre + "mlp.2.bias"]
    x = layer_norm(x, p["ln_f.weight"], p["ln_f.bias"])
    return x @ p["head.weight"].T


def test_forward_matches_numpy_oracle():
    dec = fresh_decoder(3)
    ids = [1, 5, 9, 2]
    logits = dec(torch.tensor([ids])).detach().numpy()[0]
    ref = numpy_forward_oracle(dec, ids)
    np.testing.assert_allclose(logits, ref, rtol=1e-4, atol=1e-5)


# --- causality --------------------------------------------------------------


def test_future_tokens_cannot_move_past_logits():
    dec = fresh_decoder(1)
    gen = torch.Generator().manual_seed(2)
    ids = torch.randint(0, CFG.vocab_size, (2, 12), generator=gen)
    scrambled = ids.clone()
    scrambled[:, 7:] = scrambled[:, torch.tensor([9, 11, 8, 10, 7])]
    base = dec(ids)
    perm = dec(scrambled)
    assert torch.equal(base[:, :7], perm[:, :7])
    assert not torch.equal(base[:, 7:], perm[:, 7:])


def test_attention_rows_are_causal_distributions():
    dec = fresh_decoder(1)
    ids = torch.randint(0, CFG.vocab_size, (2, 10), generator=torch.Generator().manual_seed(4))
    _, attention = dec(ids, return_attention=True)
    assert len(attention) == CFG.n_layers
    for attn in attention:
        assert attn.shape == (2, CFG.n_heads, 10, 10)
        rows = attn.sum(-1)
        assert torch.all((rows - 1.0).abs() < 1e-6)
        future = torch.triu(torch.ones(10, 10, dtype=torch.bool), diagonal=1)
        assert torch.all(attn[..., future] == 0.0)


# --- slot substitution ------------------------------------------------------


def test_slot_values_replace_token_embedding():
    dec = fresh_decoder(5)
    ids = torch.full((1, 6), 3, dtype=torch.long)
    ids[0, 2] = 11  # placeholder id at the slot
    values = torch.randn(1, CFG.dim, generator=torch.Generator().manual_seed(6))
    slots = slot_binding(values, [(0, 2)], [4])
    out = dec(ids, slots)
    # The placeholder's own embedding is dead weight: swapping the id at a
    # bound position changes nothing.
    other = ids.clone()
    other[0, 2] = 7
    assert torch.equal(out, dec(other, slots))
    # But the injected value matters.
    assert not torch.equal(out, dec(ids, slot_binding(values + 1.0, [(0, 2)], [4])))
    # And so does provenance.
    assert not torch.equal(out, dec(ids, slot_binding(values, [(0, 2)], [5])))


def test_unused_placeholder_embedding_gets_zero_grad():
    dec = fresh_decoder(7)
    ids = torch.tensor([[1, 3, 11, 4, 2, 0]])
    mask = torch.tensor([[False, False, False, True, True, False]])
    values = torch.randn(1, CFG.dim)
    loss = masked_next_token_loss(dec(ids, slot_binding(values, [(0, 2)], [0])), ids, mask)
    loss.backward()
    grad = dec.tok_emb.weight.grad
    assert grad is not None
    assert torch.all(grad[11] == 0.0)  # replaced placeholder row
    assert torch.any(grad[3] != 0.0)


def test_slot_binding_validation():
    with pytest.raises(ProtocolError):
        slot_binding(torch.zeros(2, CFG.dim), [(0, 1), (0, 1)], [0, 1])
    dec = fresh_decoder(0)
    ids = torch.zeros(1, 4, dtype=torch.long)
    with pytest.raises(ProtocolError):
        dec(ids, slot_binding(torch.zeros(1, CFG.dim), [(0, 9)], [0]))


def test_sequence_budget_enforced():
    dec = fresh_decoder(0)
    with pytest.raises(ProtocolError):
        dec(torch.zeros(1, CFG.max_seq_len + 1, dtype=torch.long))


# --- loss -------------------------------------------------------------------


def test_uniform_logits_loss_is_log_vocab():
    ids = torch.randint(0, 16, (2, 8))
    mask = torch.zeros(2, 8, dtype=torch.bool)
    mask[:, 3:] = True
    loss = masked_next_token_loss(torch.zeros(2, 8, 16), ids, mask)
    assert loss.item() == pytest.approx(math.log(16), abs=1e-6)
    assert loss.item() == pytest.approx(2.7726, abs=1e-4)


def test_loss_counts_only_masked_positions():
    gen = torch.Generator().manual_seed(8)
    logits = torch.randn(1, 6, 16, generator=gen)
    ids = torch.randint(0, 16, (1, 6), generator=gen)
    mask = torch.tensor([[False, False, True, False, True, False]])
    got = masked_next_token_loss(logits, ids, mask)
    # Manual: mean of CE(logits[t-1], ids[t]) over masked t.
    expected = 0.0
    for t in (2, 4):
        log_probs = torch.log_softmax(logits[0, t - 1], dim=-1)
        expected -= log_probs[ids[0, t]].item()
    assert got.item() == pytest.approx(expected / 2, rel=1e-6)
    # Tampering with an unmasked position's logits changes nothing.
    logits2 = logits.clone()
    logits2[0, 4] += 100.0
    assert masked_next_token_loss(logits2, ids, mask).item() == pytest.approx(got.item())


def test_loss_validation():
    ids = torch.zeros(1, 4, dtype=torch.long)
    logits = torch.zeros(1, 4, 16)
    bad = torch.tensor([[True, False, False, False]])
    with pytest.raises(ProtocolError):
        masked_next_token_loss(logits, ids, bad)
    with pytest.raises(ProtocolError):
        masked_next_token_loss(logits, ids, torch.zeros(1, 4, dtype=torch.bool))


# --- init -------------------------------------------------------------------


def test_init_is_deterministic_and_seed_sensitive():
    a, b, c = fresh_decoder(1), fresh_decoder(1), fresh_decoder(2)
    for (n, pa), (_, pb), (_, pc) in zip(
        a.named_parameters(), b.named_parameters(), c.named_parameters()
    ):
        assert torch.equal(pa, pb), n
        if pa.ndim >= 2:
            assert not torch.equal(pa, pc), n


def test_init_conventions():
    dec = fresh_decoder(0)
    assert torch.all(dec.blocks[0].ln1.weight == 1.0)
    assert torch.all(dec.blocks[0].ln1.bias == 0.0)
    assert torch.all(dec.blocks[0].attn.qkv.bias == 0.0)
    expected = dec.tok_emb.weight.shape[-1] ** -0.5
    assert dec.tok_emb.weight.std().item() == pytest.approx(expected, rel=0.2)


# --- schedule ---------------------------------------------------------------


def test_lr_schedule_shape():
    base, total = 0.1, 5000
    warmup = round(total * 0.03)
    assert warmup == 150
    assert lr_schedule(0, total, base) == pytest.approx(base / warmup)
    assert lr_schedule(warmup - 1, total, base) == pytest.approx(base)
    assert lr_schedule(warmup, total, base) == pytest.approx(base)
    values = [lr_schedule(s, total, base) for s in range(warmup, total + 1)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert lr_schedule(total, total, base) == 0.0
    mid = warmup + (total - warmup) // 2
    assert lr_schedule(mid, total, base) == pytest.approx(base / 2, rel=0.01)


def test_lr_schedule_validation():
    with pytest.raises(ConfigError):
        lr_schedule(0, 0, 0.1)
    with pytest.raises(ConfigError):
        lr_schedule(0, 100, 0.1, warmup_ratio=1.0)


# --- optimizer --------------------------------------------------------------


def test_adamw_first_step_moves_by_lr():
    p = torch.zeros(1)
    p.grad = torch.ones(1)
    opt = AdamW([("p", p)])
    opt.step(lr=0.1)
    assert p.item() == pytest.approx(-0.1, abs=1e-8)


def test_adamw_constant_grad_closed_form():
    # With g == 1 every step, bias-corrected moments are exactly 1, so each
    # step moves by lr / (1 + eps).
    p = torch.zeros(1, dtype=torch.float64)
    opt = AdamW([("p", p)], eps=1e-8)
    for _ in range(5):
        p.grad = torch.ones(1, dtype=torch.float64)
        opt.step(lr=0.01)
    assert p.item() == pytest.approx(-5 * 0.01 / (1 + 1e-8), rel=1e-12)


def test_adamw_matches_torch_reference():
    gen = torch.Generator().manual_seed(10)
    ours = torch.randn(4, 3, generator=gen, dtype=torch.float64)
    theirs = ours.clone().requires_grad_(True)
    opt = AdamW([("w", ours)], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    ref = torch.optim.AdamW([theirs], lr=0.05, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)
    for i in range(7):
        g = torch.randn(4, 3, generator=gen, dtype=torch.float64)
        ours.grad = g.clone()
        theirs.grad = g.clone()
        opt.step(lr=0.05)
        ref.step()
        assert torch.allclose(ours, theirs.detach(), rtol=1e-10, atol=1e-12), i


def test_adamw_decoupled_decay_without_grad_signal():
    p = torch.ones(1, dtype=torch.float64)
    opt = AdamW([("p", p)], weight_decay=0.5)
    p.grad = torch.zeros(1, dtype=torch.float64)
    opt.step(lr=0.1)
    assert p.item() == pytest.approx(1.0 * (1 - 0.1 * 0.5))


def test_adamw_state_round_trip_is_bitwise():
    gen = torch.Generator().manual_seed(11)
    a = torch.randn(5, generator=gen)
    b = a.clone()
    opt_a = AdamW([("p", a)])
    opt_b = AdamW([("p", b)])
    for _ in range(3):
        g = torch.randn(5, generator=gen)
        a.grad = g.clone()
        opt_a.step(lr=0.02)
    state = {k: v.clone() for k, v in opt_a.state_tensors().items()}
    b.data.copy_(a.data)
    opt_b.load_state_tensors(state, opt_a.step_count)
    g = torch.randn(5, generator=gen)
    a.grad = g.clone()
    b.grad = g.clone()
    opt_a.step(lr=0.02)
    opt_b.step(lr=0.02)
    assert torch.equal(a, b)


# --- full bundle ------------------------------------------------------------


def test_multimodal_model_shapes_and_init():
    enc_cfg = EncoderConfig(
        image_px=16, experts=(ExpertSpec(8, 12, 1), ExpertSpec(4, 8, 1)), grid=4,
        projector_hidden=16,
    )
    dec_cfg = DecoderConfig(vocab_size=32, dim=24, n_layers=2, n_heads=2, mlp_hidden=32, max_seq_len=64, grid_slots=16)
    model = MultimodalModel(enc_cfg, dec_cfg)
    model.init_weights(0)
    images = torch.rand(2, 16, 16, 3, generator=torch.Generator().manual_seed(12))
    fused, projected = model.encode_batch(images)
    assert fused.shape == (2, 4, 4, 20)
    assert projected.shape == (2, 16, 24)
    cache = model.cache_for(fused, projected, 1)
    assert cache.grid_side == 4
    assert model.parameter_count() > 0
    with pytest.raises(ConfigError):
        MultimodalModel(enc_cfg, DecoderConfig(vocab_size=32, dim=24, n_heads=2, grid_slots=8))
