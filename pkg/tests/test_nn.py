import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch.func import functional_call

from eager.nn import (
    AdamState,
    CheckpointError,
    DecoderBlock,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    NonFiniteGradientError,
    adam_step,
    attention,
    causal_mask,
    cross_entropy_loss,
    finite_difference_check,
    layer_norm,
    load_checkpoint,
    log_softmax,
    multi_head_attention,
    save_checkpoint,
    softmax,
)

D = torch.float64


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


def test_softmax_examples():
    assert softmax(torch.tensor([0.0, 0.0], dtype=D)).tolist() == [0.5, 0.5]
    out = softmax(torch.tensor([1000.0, 0.0], dtype=D))
    assert torch.isfinite(out).all()
    assert out[0].item() == pytest.approx(1.0) and out[1].item() < 1e-300


def test_softmax_matches_high_precision():
    mpmath.mp.prec = 128
    x = rand(7, seed=3) * 5
    exps = [mpmath.exp(mpmath.mpf(float(v))) for v in x]
    total = mpmath.fsum(exps)
    ref = [float(e / total) for e in exps]
    np.testing.assert_allclose(softmax(x).numpy(), ref, rtol=0, atol=1e-12)
    ref_log = [float(mpmath.log(e / total)) for e in exps]
    np.testing.assert_allclose(log_softmax(x).numpy(), ref_log, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-500, 500), min_size=1, max_size=30))
def test_softmax_rows_sum_to_one(values):
    out = softmax(torch.tensor(values, dtype=D))
    assert abs(out.sum().item() - 1.0) < 1e-9
    assert (out >= 0).all()


def test_cross_entropy_uniform():
    loss = cross_entropy_loss(torch.zeros(3, 256, dtype=D), torch.tensor([0, 17, 255]))
    assert loss.item() == pytest.approx(math.log(256), abs=1e-12)
    assert math.log(256) == pytest.approx(5.5452, abs=1e-4)


def test_cross_entropy_confident_limit():
    logits = torch.zeros(1, 10, dtype=D)
    logits[0, 4] = 800.0
    assert cross_entropy_loss(logits, torch.tensor([4])).item() < 1e-300


def test_cross_entropy_gradient_closed_form():
    logits = rand(4, 6, seed=1).requires_grad_(True)
    targets = torch.tensor([0, 5, 2, 2])
    cross_entropy_loss(logits, targets).backward()
    onehot = torch.nn.functional.one_hot(targets, 6).to(D)
    expected = (torch.softmax(logits.detach(), -1) - onehot) / 4
    torch.testing.assert_close(logits.grad, expected, rtol=0, atol=1e-14)
    rep = finite_difference_check(lambda x: cross_entropy_loss(x, targets), [logits.detach()])
    assert rep.passed and rep.max_rel_error < 1e-4


def test_cross_entropy_range_error():
    with pytest.raises(ValueError):
        cross_entropy_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


def oracle_attention(q, k, v, causal):
    """Straight-line loops over positions in float64."""
    t, d = q.shape
    out = np.zeros_like(v)
    for i in range(t):
        keys = range(i + 1) if causal else range(k.shape[0])
        scores = [sum(q[i, c] * k[j, c] for c in range(d)) / math.sqrt(d) for j in keys]
        m = max(scores)
        w = [math.exp(s - m) for s in scores]
        z = sum(w)
        for j, wj in zip(keys, w):
            out[i] += wj / z * v[j]
    return out


@pytest.mark.parametrize("causal", [False, True])
def test_single_head_matches_oracle(causal):
    torch.manual_seed(0)
    layer = MultiHeadAttention(4, 1).double()
    x = rand(1, 3, 4, seed=2)
    got = multi_head_attention(layer, x, x, causal_mask=causal)[0].detach().numpy()
    xn = x[0].numpy()
    q = xn @ layer.q.weight.detach().numpy() + layer.q.bias.detach().numpy()
    k = xn @ layer.k.weight.detach().numpy() + layer.k.bias.detach().numpy()
    v = xn @ layer.v.weight.detach().numpy() + layer.v.bias.detach().numpy()
    mixed = oracle_attention(q, k, v, causal)
    ref = mixed @ layer.o.weight.detach().numpy() + layer.o.bias.detach().numpy()
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-10)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_single_position_returns_value_projection(heads):
    torch.manual_seed(1)
    layer = MultiHeadAttention(8, heads).double()
    x = rand(2, 1, 8, seed=4)
    with torch.no_grad():
        expected = layer.o(layer.v(x))
        torch.testing.assert_close(layer(x, x), expected, rtol=0, atol=1e-12)


def test_causal_prefix_unaffected_by_future():
    torch.manual_seed(2)
    layer = MultiHeadAttention(8, 2).double()
    x = rand(1, 5, 8, seed=5)
    y = x.clone()
    y[:, 1:] = rand(1, 4, 8, seed=6)
    with torch.no_grad():
        a = layer(x, x, causal=True)
        b = layer(y, y, causal=True)
    torch.testing.assert_close(a[:, 0], b[:, 0], rtol=0, atol=0)


def test_masked_weights_exactly_zero():
    q = rand(2, 5, 3, seed=7)
    _, w = attention(q, q, q, causal_mask(5))
    assert (w.triu(1) == 0).all()
    torch.testing.assert_close(w.sum(-1), torch.ones(2, 5, dtype=D))


def test_pad_mask_hides_keys():
    torch.manual_seed(3)
    layer = MultiHeadAttention(4, 2).double()
    q = rand(1, 2, 4, seed=8)
    kv = rand(1, 3, 4, seed=9)
    pad = torch.tensor([[False, False, True]])
    kv2 = kv.clone()
    kv2[:, 2] += 100.0
    with torch.no_grad():
        torch.testing.assert_close(layer(q, kv, pad_mask=pad), layer(q, kv2, pad_mask=pad))


def test_attention_dim_errors():
    with pytest.raises(ValueError):
        MultiHeadAttention(6, 4)
    layer = MultiHeadAttention(4, 2)
    with pytest.raises(ValueError):
        layer(torch.zeros(1, 2, 4), torch.zeros(1, 2, 5))


def test_layer_norm_examples():
    g, b = torch.ones(5, dtype=D), torch.zeros(5, dtype=D)
    assert layer_norm(torch.full((5,), 3.0, dtype=D), g, b).abs().max().item() == 0.0
    out = layer_norm(rand(4, 5, seed=10) * 7 + 2, g, b)
    torch.testing.assert_close(out.mean(-1), torch.zeros(4, dtype=D), rtol=0, atol=1e-12)
    var = out.var(-1, unbiased=False)
    assert ((var - 1).abs() < 1e-3).all()
    rep = finite_difference_check(lambda x, a, c: (layer_norm(x, a, c) * rand(4, 5, seed=11)).sum(),
                                  [rand(4, 5, seed=12), 1 + rand(5, seed=13) * 0.1, rand(5, seed=14)])
    assert rep.passed


def test_linear_layer_gradient_tight():
    torch.manual_seed(4)
    layer = Linear(3, 2).double()
    names = [n for n, _ in layer.named_parameters()]
    w = rand(5, 2, seed=15)

    def fn(x, *ps):
        return (functional_call(layer, dict(zip(names, ps)), (x,)) * w).sum()

    rep = finite_difference_check(fn, [rand(5, 3, seed=16)] + [p.detach() for p in layer.parameters()])
    assert rep.max_rel_error < 1e-6


def test_decoder_block_gradient():
    torch.manual_seed(5)
    block = DecoderBlock(8, 2, ffn_mult=2, dropout=0.0).double()
    with torch.no_grad():
        for p in block.parameters():
            p.add_(0.3 * torch.randn_like(p))
    names = [n for n, _ in block.named_parameters()]
    w = rand(2, 3, 8, seed=17)
    memory = rand(2, 4, 8, seed=18)

    def fn(x, mem, *ps):
        return (functional_call(block, dict(zip(names, ps)), (x, mem)) * w).sum()

    inputs = [rand(2, 3, 8, seed=19), memory] + [p.detach() for p in block.parameters()]
    rep = finite_difference_check(fn, inputs, max_coords=8)
    assert rep.passed, rep.per_input


def test_corrupted_gradient_is_caught():
    x = rand(3, 4, seed=20)
    targets = torch.tensor([1, 0, 3])
    good = finite_difference_check(lambda z: cross_entropy_loss(z, targets), [x])
    assert good.passed
    xg = x.clone().requires_grad_(True)
    cross_entropy_loss(xg, targets).backward()
    bad = xg.grad.clone()
    bad[0, 0] += 0.01
    rep = finite_difference_check(lambda z: cross_entropy_loss(z, targets), [x], analytic=[bad])
    assert not rep.passed


def test_module_layer_norm_matches_function():
    ln = LayerNorm(4).double()
    x = rand(3, 4, seed=21)
    torch.testing.assert_close(ln(x), layer_norm(x, ln.gain, ln.bias))


def test_adam_first_step_closed_form():
    p = torch.zeros(1, dtype=D)
    state = AdamState(lr=1e-3)
    adam_step(state, {"w": p}, {"w": torch.ones(1, dtype=D)})
    assert -p.item() == pytest.approx(1e-3 / (1 + 1e-8), rel=1e-12)
    assert abs(-p.item() - 0.000999999) < 1e-9


def test_adam_zero_grad_keeps_params():
    p = torch.tensor([0.5, -1.0], dtype=D)
    state = AdamState()
    adam_step(state, {"w": p}, {"w": torch.zeros(2, dtype=D)})
    assert p.tolist() == [0.5, -1.0]
    assert state.step_count == 1


def test_adam_warmup_schedule():
    state = AdamState(lr=1e-3, warmup_steps=100)
    assert state.effective_lr(50) == pytest.approx(0.0005)
    assert state.effective_lr(100) == pytest.approx(1e-3)
    assert state.effective_lr(1000) == pytest.approx(1e-3)


def test_adam_matches_reference_implementation():
    torch.manual_seed(6)
    ours = torch.randn(4, 3, dtype=D)
    ref = ours.clone().requires_grad_(True)
    opt = torch.optim.Adam([ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    state = AdamState(lr=1e-2)
    for step in range(5):
        g = rand(4, 3, seed=30 + step)
        adam_step(state, {"w": ours}, {"w": g})
        ref.grad = g.clone()
        opt.step()
    torch.testing.assert_close(ours, ref.detach(), rtol=0, atol=1e-12)


def test_adam_rejects_non_finite():
    with pytest.raises(NonFiniteGradientError):
        adam_step(AdamState(), {"w": torch.zeros(2)}, {"w": torch.tensor([1.0, float("nan")])})


def test_training_steps_are_bit_identical():
    def run():
        torch.manual_seed(7)
        block = DecoderBlock(8, 2, dropout=0.1)
        params = dict(block.named_parameters())
        state = AdamState(lr=1e-3, warmup_steps=3)
        x, mem = torch.randn(2, 3, 8), torch.randn(2, 4, 8)
        for _ in range(4):
            loss = block(x, mem).pow(2).mean()
            grads = torch.autograd.grad(loss, list(params.values()))
            adam_step(state, params, dict(zip(params, grads)))
        return {k: v.detach().clone() for k, v in params.items()}

    a, b = run(), run()
    for k in a:
        assert torch.equal(a[k], b[k])


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(8)
    block = DecoderBlock(8, 2)
    save_checkpoint(block.state_dict(), tmp_path / "a", extra={"note": 1})
    save_checkpoint(block.state_dict(), tmp_path / "b", extra={"note": 1})
    for name in ("manifest.json", "params.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    state = load_checkpoint(tmp_path / "a", expected=block.state_dict())
    for k, v in block.state_dict().items():
        assert torch.equal(state[k], v)


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    save_checkpoint(DecoderBlock(8, 2).state_dict(), tmp_path / "c")
    with pytest.raises(CheckpointError, match="ffn.up.weight"):
        load_checkpoint(tmp_path / "c", expected=DecoderBlock(8, 2, ffn_mult=2).state_dict())
    with pytest.raises(CheckpointError, match="lacks"):
        load_checkpoint(tmp_path / "c", expected={**DecoderBlock(8, 2).state_dict(), "extra.w": torch.zeros(1)})
