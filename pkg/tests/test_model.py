import math

import numpy as np
import pytest
import torch
from torch.func import functional_call

from eager.codes import CodeTree, CodeTreeError, build_code_tree, sample_replacement
from eager.model import (
    Batch,
    EagerModel,
    ModelConfig,
    ModelError,
    StreamConfig,
    contrastive_loss,
    encode_history,
    generation_loss,
    info_nce,
    recognition_logits,
    recognition_loss,
    reconstruction_loss,
    stream_forward,
    summary_embedding,
    total_loss,
    transfer_forward,
)
from eager.nn import AdamState, adam_step, finite_difference_check
from eager.selfcheck import random_batch, randomize_parameters, tiny_model
from eager.train import draw_transfer_inputs, sample_corruptions


def huber_oracle(x, y):
    out = []
    for a, b in zip(x, y):
        d = abs(a - b)
        out.append(0.5 * d * d if d < 1 else d - 0.5)
    return sum(out) / len(out)


def single_stream_model(num_items, branch_k, hidden=16, position="tail", seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    tree = build_code_tree(rng.normal(size=(num_items, 4)), branch_k, seed=seed)
    cfg = ModelConfig(hidden=hidden, heads=2, dec_layers=1, ffn_mult=2, dropout=0.0, summary_position=position)
    return EagerModel(num_items, [StreamConfig("semantic", tree, rng.normal(size=(num_items, 3)))], cfg,
                      seed=seed, dtype=dtype)


def test_uniform_init_generation_loss():
    model = single_stream_model(300, 256, hidden=32, dtype=torch.float32)
    assert model.tree("semantic").depth == 2
    rng = np.random.default_rng(0)
    batch = random_batch(model, 64, rng)
    _, br = total_loss(model, batch, enable_gct=False, enable_stt=False)
    expected = 2 * math.log(256)
    assert abs(expected - 11.090354888959125) < 1e-12
    assert abs(br.gen - expected) / expected < 0.02


def test_encode_history_shape_and_order():
    model = tiny_model(0)
    h, _ = encode_history(model, [3])
    assert h.shape == (1, 1, 8)
    a, _ = encode_history(model, [1, 2, 5])
    b, _ = encode_history(model, [2, 1, 5])
    assert not torch.allclose(a, b)
    with pytest.raises(ModelError):
        encode_history(model, [[]])
    with pytest.raises(ModelError):
        encode_history(model, [model.num_items])


def test_item_embedding_gradient_finite_difference():
    model = tiny_model(1, num_items=6)
    randomize_parameters(model, 1)
    model.eval()
    w = torch.randn(1, 6, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)

    def enc(table):
        out = functional_call(model.encoder, {"item_emb": table},
                              (torch.arange(6)[None], torch.zeros(1, 6, dtype=torch.bool)), strict=False)
        return (out * w).sum()

    rep = finite_difference_check(enc, [model.encoder.item_emb.detach()])
    assert rep.passed, rep


def test_digit_out_of_range():
    model = tiny_model(0)
    memory, pad = encode_history(model, [1, 2])
    with pytest.raises(ModelError):
        generation_loss(model, "behavior", memory, pad, torch.tensor([[0, 3, 0]]))
    with pytest.raises(ModelError):
        generation_loss(model, "behavior", memory, pad, torch.tensor([[0, 1]]))


def test_level_tokens_do_not_alias():
    model = tiny_model(0)
    dec = model.decoders["behavior"]
    k, l = dec.branch_k, dec.depth
    tokens = dec.level_tokens(torch.tensor([[1] * l]))
    assert tokens.tolist() == [[1 + j * k for j in range(l)]]
    assert len({dec.sos, dec.summary, *range(l * k)}) == l * k + 2
    assert model.transfer is not None


def test_overfit_one_example():
    model = single_stream_model(27, 3, hidden=16)
    memory_hist, target = [4, 9, 2], torch.tensor([[2, 0, 1]])
    params = dict(model.named_parameters())
    state = AdamState(lr=1e-2)
    for _ in range(150):
        memory, pad = encode_history(model, memory_hist)
        loss = generation_loss(model, "semantic", memory, pad, target)
        for p in params.values():
            p.grad = None
        loss.backward()
        adam_step(state, params, {n: p.grad for n, p in params.items()})
    with torch.no_grad():
        memory, pad = encode_history(model, memory_hist)
        assert float(generation_loss(model, "semantic", memory, pad, target)) < 0.01


def test_generation_loss_ignores_other_stream():
    model = tiny_model(2)
    model.requires_grad_(False)
    memory, pad = encode_history(model, [1, 2, 3])
    codes = model.codes_for("behavior", torch.tensor([5]))
    before = float(generation_loss(model, "behavior", memory, pad, codes))
    with torch.no_grad():
        for p in model.decoders["semantic"].parameters():
            p.add_(torch.randn_like(p))
    assert float(generation_loss(model, "behavior", memory, pad, codes)) == before


def test_causal_integrity():
    model = tiny_model(3, num_items=60, branch_k=3)
    randomize_parameters(model, 3)
    model.eval()
    memory, pad = encode_history(model, [4, 7])
    l = model.tree("behavior").depth
    base = torch.tensor([[0, 1, 2, 0][:l]])
    out = stream_forward(model, "behavior", memory, pad, base)
    for j in range(l):
        for change in range(j, l):
            other = base.clone()
            other[0, change] = (other[0, change] + 1) % 3
            alt = stream_forward(model, "behavior", memory, pad, other)
            for level in range(j + 1):
                if level <= change:
                    assert torch.equal(out.logits[level], alt.logits[level])


def test_summary_positions():
    for position in ("tail", "head"):
        model = tiny_model(4, summary_position=position)
        randomize_parameters(model, 4)
        model.eval()
        memory, pad = encode_history(model, [1, 2])
        a = torch.tensor([[0, 1, 2]])
        b = torch.tensor([[0, 1, 0]])
        sa = summary_embedding(model, "behavior", memory, pad, a)
        sb = summary_embedding(model, "behavior", memory, pad, b)
        c = torch.tensor([[2, 2, 1]])
        sc = summary_embedding(model, "behavior", memory, pad, c)
        if position == "tail":
            assert not torch.allclose(sa, sb)
        else:
            assert torch.equal(sa, sb) and torch.equal(sa, sc)


def test_mean_summary_on_single_level():
    model = single_stream_model(3, 4, position="mean")
    randomize_parameters(model, 5)
    model.eval()
    assert model.tree("semantic").depth == 1
    memory, pad = encode_history(model, [0, 2])
    codes = torch.tensor([[1]])
    out = stream_forward(model, "semantic", memory, pad, codes)
    proj = model.decoders["semantic"].projection
    torch.testing.assert_close(summary_embedding(model, "semantic", memory, pad, codes),
                               proj(out.states[:, 1]), rtol=0, atol=1e-14)


def test_contrastive_identities_and_oracle():
    rng = np.random.default_rng(0)
    v = torch.tensor(rng.normal(size=(4, 7)))
    assert float(contrastive_loss(v, v, "smooth_l1")) == 0.0
    assert abs(float(contrastive_loss(v, v, "cosine"))) < 1e-15
    for _ in range(20):
        x, y = rng.normal(size=7) * 2, rng.normal(size=7) * 2
        got = float(contrastive_loss(torch.tensor(x), torch.tensor(y), "smooth_l1"))
        assert abs(got - huber_oracle(x, y)) < 1e-10
        cos = 1 - x @ y / np.linalg.norm(x) / np.linalg.norm(y)
        assert abs(float(contrastive_loss(torch.tensor(x), torch.tensor(y), "cosine")) - cos) < 1e-12
    with pytest.raises(ModelError):
        contrastive_loss(torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64), "cosine")
    with pytest.raises(ModelError):
        contrastive_loss(torch.ones(3), torch.ones(4))


def test_infonce_contrastive_against_loop():
    rng = np.random.default_rng(1)
    s, t = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    items = [3, 1, 3, 0, 1]
    t[2] = t[0]
    t[4] = t[1]
    got = float(contrastive_loss(torch.tensor(s), torch.tensor(t), "infonce", items=torch.tensor(items)))
    cands = {}
    for i, it in enumerate(items):
        cands.setdefault(it, t[i])
    keys = sorted(cands)
    total = 0.0
    for i, it in enumerate(items):
        scores = [s[i] @ cands[c] / np.linalg.norm(s[i]) / np.linalg.norm(cands[c]) / 0.07 for c in keys]
        total += -(scores[keys.index(it)] - np.log(np.sum(np.exp(scores))))
    assert abs(got - total / len(items)) < 1e-10


def test_targets_are_frozen():
    model = tiny_model(5)
    assert not any(n.startswith("target_") for n, _ in model.named_parameters())
    s = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
    t = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
    for metric in ("smooth_l1", "cosine", "infonce"):
        contrastive_loss(s, t, metric).backward()
        assert t.grad is None


def test_transfer_forward():
    model = tiny_model(6, num_items=9, branch_k=3)
    randomize_parameters(model, 6)
    model.eval()
    assert model.tree("behavior").depth == 2
    codes = model.codes_for("behavior", torch.tensor([4]))
    tokens, cls = transfer_forward(model, codes, torch.zeros(8, dtype=torch.float64))
    assert tokens.shape == (1, 2, 8) and cls.shape == (1, 8)
    _, cls2 = transfer_forward(model, codes, torch.randn(8, dtype=torch.float64))
    assert not torch.allclose(cls, cls2)
    with pytest.raises(ModelError):
        transfer_forward(model, codes, torch.zeros(8), mask_positions=torch.tensor([[True, False]]),
                         replaced_codes=codes)
    w = torch.randn(3, 8, dtype=torch.float64)

    def fn(guide):
        tok, c = transfer_forward(model, codes, guide)
        return (torch.cat([c[:, None], tok], 1)[0] * w).sum()

    rep = finite_difference_check(fn, [torch.randn(1, 8, dtype=torch.float64)])
    assert rep.passed, rep


def test_transfer_shares_guided_token_table():
    model = tiny_model(7)
    model.eval()
    codes = model.codes_for("behavior", torch.tensor([2]))
    guide = torch.randn(1, 8, dtype=torch.float64)
    _, c0 = transfer_forward(model, codes, guide)
    with torch.no_grad():
        table = model.decoders["behavior"].token_emb
        table.add_(torch.randn_like(table))
    _, c1 = transfer_forward(model, codes, guide)
    assert not torch.allclose(c0, c1)


def test_info_nce_closed_form():
    e1 = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    e2 = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
    got = float(info_nce(e1, e1, e2))
    assert abs(got + math.log(math.e / (math.e + 1))) < 1e-12
    assert abs(got - 0.3133) < 5e-5


def test_reconstruction_loss_matches_manual():
    model = tiny_model(8, num_items=27, branch_k=3, num_negatives=2)
    randomize_parameters(model, 8)
    model.eval()
    rng = np.random.default_rng(0)
    targets = [3, 11, 20]
    tin = draw_transfer_inputs(model, targets, rng)
    codes = model.codes_for("behavior", torch.tensor(targets))
    guide = torch.randn(3, 8, dtype=torch.float64)
    with torch.no_grad():
        got = float(reconstruction_loss(model, codes, guide, tin.mask_positions, tin.negatives))
    states, _ = transfer_forward(model, codes, guide, mask_positions=tin.mask_positions)
    table = model.decoders["behavior"].token_emb
    terms = []
    for b in range(3):
        for p in range(3):
            if tin.mask_positions[b, p]:
                q = model.transfer.token_head(states[b, p]).detach().numpy()
                pos = table[codes[b, p] + 3 * p].detach().numpy()
                scores = [q @ pos] + [q @ table[n + 3 * p].detach().numpy() for n in tin.negatives[b, p].tolist()]
                terms.append(-(scores[0] - np.log(np.sum(np.exp(scores)))))
    assert abs(got - np.mean(terms)) < 1e-10
    with pytest.raises(ModelError):
        reconstruction_loss(model, codes, guide, tin.mask_positions, torch.zeros(3, 3, 3, dtype=torch.long))


def test_half_mask_on_two_levels():
    rng = np.random.default_rng(0)
    for _ in range(100):
        mask, repl = sample_corruptions(rng, 2)
        assert len(mask) == 1 and len(repl) == 1


def test_recognition_at_zero_head():
    model = tiny_model(9)
    codes = model.codes_for("behavior", torch.tensor([1, 2]))
    corrupted = codes.clone()
    corrupted[:, 0] = (corrupted[:, 0] + 1) % 3
    guide = torch.randn(2, 8, dtype=torch.float64)
    with torch.no_grad():
        loss = float(recognition_loss(model, codes, guide, corrupted))
    assert abs(loss - 2 * math.log(2)) < 1e-12


def test_unit_alphabet_cannot_be_corrupted():
    tree = CodeTree(1, 1, np.array([[0]]))
    with pytest.raises(CodeTreeError):
        sample_replacement(tree, [0], [0], np.random.default_rng(0))


def test_transfer_training_smoke():
    model = tiny_model(10, num_items=27, branch_k=3, hidden=16, num_negatives=1)
    params = dict(model.named_parameters())
    state = AdamState(lr=5e-3)
    rng = np.random.default_rng(0)
    items = torch.arange(27)
    codes = model.codes_for("behavior", items)
    guides = torch.tensor(rng.normal(size=(27, 16)))
    recon_hist = []
    fixed = draw_transfer_inputs(model, items.tolist(), np.random.default_rng(99))
    for _ in range(200):
        tin = draw_transfer_inputs(model, items.tolist(), rng)
        loss = reconstruction_loss(model, codes, guides, tin.mask_positions, tin.negatives) + \
            recognition_loss(model, codes, guides, tin.corrupted_codes)
        with torch.no_grad():
            recon_hist.append(float(reconstruction_loss(model, codes, guides, fixed.mask_positions,
                                                        fixed.negatives)))
        for p in params.values():
            p.grad = None
        loss.backward()
        adam_step(state, params, {n: p.grad for n, p in params.items()})
    assert recon_hist[-1] < 0.5 * recon_hist[0]
    model.eval()
    held = draw_transfer_inputs(model, items.tolist() * 8, np.random.default_rng(12345))
    all_codes = model.codes_for("behavior", items.repeat(8))
    all_guides = guides.repeat(8, 1)
    with torch.no_grad():
        clean = recognition_logits(model, all_codes, all_guides)
        bad = recognition_logits(model, all_codes, all_guides, replaced_codes=held.corrupted_codes)
    assert float((bad < clean).double().mean()) >= 0.95


def test_total_loss_weights_and_flags():
    model = tiny_model(11)
    randomize_parameters(model, 11)
    rng = np.random.default_rng(0)
    batch = random_batch(model, 4, rng)
    tin = draw_transfer_inputs(model, batch.targets.tolist(), rng)
    loss, br = total_loss(model, batch, tin)
    assert min(br.gen, br.con, br.recon, br.recog) > 0
    assert abs(br.total - (br.gen + br.con + br.recon + br.recog)) < 1e-12
    assert abs(float(loss) - br.total) == 0.0
    model.config.lambda1 = model.config.lambda2 = 0.0
    _, br0 = total_loss(model, batch, tin)
    assert br0.total == br0.gen
    model.config.lambda1 = model.config.lambda2 = 1.0
    _, off = total_loss(model, batch, None, enable_gct=False, enable_stt=False)
    assert off.con == off.recon == off.recog == 0.0
    assert off.gen == br.gen


def test_summary_gradient_reaches_first_code_token():
    model = tiny_model(12)
    randomize_parameters(model, 12)
    model.eval()
    memory, pad = encode_history(model, [0, 1])
    memory = memory.detach()
    codes = model.codes_for("behavior", torch.tensor([7]))
    target = model.targets_for("behavior", torch.tensor([7]))
    row = int(codes[0, 0])
    table = model.decoders["behavior"].token_emb

    def loss_of_row(e):
        full = torch.cat([table[:row], e[None], table[row + 1:]])
        return contrastive_loss(_decode_summary(model, full, memory, pad, codes), target)

    emb = table[row].detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(loss_of_row(emb), emb)
    assert float(g.abs().max()) > 1e-6
    rep = finite_difference_check(loss_of_row, [table[row].detach()])
    assert rep.passed, rep


def _decode_summary(model, full_table, memory, pad, codes):
    """Summary embedding with the behaviour token table swapped for a differentiable copy."""
    dec = model.decoders["behavior"]
    saved = dec.token_emb
    try:
        del dec.token_emb
        dec.token_emb = full_table
        return summary_embedding(model, "behavior", memory, pad, codes)
    finally:
        del dec.token_emb
        dec.token_emb = saved


def test_stream_isolation():
    model = tiny_model(13)
    randomize_parameters(model, 13)
    batch = random_batch(model, 3, np.random.default_rng(0))
    memory, pad = encode_history(model, batch.histories, batch.pad_mask)
    loss = generation_loss(model, "semantic", memory, pad, model.codes_for("semantic", batch.targets))
    names = [n for n, _ in model.decoders["behavior"].named_parameters()]
    grads = torch.autograd.grad(loss, list(model.decoders["behavior"].parameters()), allow_unused=True)
    assert names and all(g is None or float(g.abs().max()) == 0.0 for g in grads)


def test_config_and_stream_validation():
    with pytest.raises(ModelError):
        ModelConfig(summary_position="middle")
    with pytest.raises(ModelError):
        ModelConfig(metric="l2")
    tree = build_code_tree(np.random.default_rng(0).normal(size=(5, 2)), 2)
    with pytest.raises(ModelError):
        StreamConfig("behavior", tree, np.ones((4, 3)))
    with pytest.raises(ModelError):
        Batch.from_lists([[1], []])
