"""Built-in correctness suites: finite-difference gradients and beam search vs exhaustive ranking."""

from __future__ import annotations

import time
from typing import Callable, Dict, List, Optional, TextIO, Tuple

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from .codes import CodeTree, build_code_tree
from .infer import beam_search_encoded, eval_mode
from .model import (
    Batch,
    EagerModel,
    ModelConfig,
    StreamConfig,
    encode_history,
    generation_nll,
    stream_forward,
    total_loss,
)
from .nn import (
    GradCheckReport,
    MultiHeadAttention,
    attention,
    causal_mask,
    cross_entropy_loss,
    finite_difference_check,
    layer_norm,
    log_softmax,
    softmax,
)
from .train import draw_transfer_inputs

GRAD_TOL = 1e-4
LOGPROB_TOL = 1e-9


def tiny_model(seed: int = 0, num_items: int = 24, branch_k: int = 3, hidden: int = 8,
               dtype: torch.dtype = torch.float64, summary_position: str = "tail",
               metric: str = "smooth_l1", streams=("behavior", "semantic"), dropout: float = 0.0,
               num_negatives: int = 1) -> EagerModel:
    """A small random two-stream model over random item embeddings (used by the check suites)."""
    rng = np.random.default_rng(seed)
    configs = []
    for s_idx, name in enumerate(streams):
        emb = rng.normal(size=(num_items, 6))
        tree = build_code_tree(emb, branch_k, seed=seed + s_idx, stream_tag=name)
        configs.append(StreamConfig(name, tree, rng.normal(size=(num_items, 5))))
    cfg = ModelConfig(hidden=hidden, heads=2, enc_layers=1, dec_layers=1, transfer_layers=1, ffn_mult=2,
                      dropout=dropout, summary_position=summary_position, metric=metric,
                      num_negatives=num_negatives)
    return EagerModel(num_items, configs, cfg, seed=seed, dtype=dtype)


def random_batch(model: EagerModel, size: int, rng: np.random.Generator, max_len: int = 5) -> Batch:
    hist = [rng.integers(0, model.num_items, size=int(rng.integers(1, max_len + 1))).tolist() for _ in range(size)]
    return Batch.from_lists(hist, rng.integers(0, model.num_items, size=size).tolist())


class _LossOf(nn.Module):
    def __init__(self, model: EagerModel, batch: Batch, tin, gct: bool, stt: bool):
        super().__init__()
        self.model = model
        self.batch, self.tin, self.gct, self.stt = batch, tin, gct, stt

    def forward(self):
        return total_loss(self.model, self.batch, self.tin, self.gct, self.stt)[0]


def randomize_parameters(model: EagerModel, seed: int = 0, scale: float = 0.3) -> None:
    """Move every parameter to a random point where gradients are well above round-off.

    At the 0.02 init scale attention is nearly uniform and some gradients sit
    near 1e-8, where finite differences measure noise rather than slope.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            base = 1.0 if name.endswith(".gain") else 0.0
            p.copy_(base + scale * torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype))


def model_loss_check(model: EagerModel, batch: Batch, tin=None, enable_gct: bool = True,
                     enable_stt: bool = True, max_coords: int = 4, seed: int = 0) -> GradCheckReport:
    """Finite-difference check of the full loss with respect to every parameter tensor."""
    wrapper = _LossOf(model, batch, tin, enable_gct, enable_stt)
    names = [n for n, _ in model.named_parameters()]
    params = [p.detach() for _, p in model.named_parameters()]

    def fn(*tensors):
        return functional_call(wrapper, {f"model.{n}": t for n, t in zip(names, tensors)}, ())

    model.train()
    return finite_difference_check(fn, params, tol=GRAD_TOL, max_coords=max_coords, seed=seed)


def op_cases(seed: int = 0) -> Dict[str, Tuple[Callable, List[torch.Tensor]]]:
    """Scalar test functions for each differentiable op, with double-precision inputs."""
    g = torch.Generator().manual_seed(seed)

    def r(*shape):
        return torch.randn(*shape, generator=g, dtype=torch.float64)

    w34, w46, w6 = r(4, 3), r(4, 6), r(6)
    targets = torch.tensor([0, 2, 1, 2])
    mask = causal_mask(4)
    mha = MultiHeadAttention(6, 2).double()
    mha_names = [n for n, _ in mha.named_parameters()]

    def mha_fn(x, *ps):
        out = functional_call(mha, dict(zip(mha_names, ps)), (x, x), {"causal": True})
        return (out * w6).sum()

    return {
        "softmax": (lambda x: (softmax(x) * w34).sum(), [r(4, 3)]),
        "log_softmax": (lambda x: (log_softmax(x) * w34).sum(), [r(4, 3)]),
        "cross_entropy": (lambda x: cross_entropy_loss(x, targets), [r(4, 3)]),
        "layer_norm": (lambda x, a, b: (layer_norm(x, a, b) * w46).sum(), [r(4, 6), 1 + 0.1 * r(6), 0.1 * r(6)]),
        "attention": (lambda q, k, v: (attention(q, k, v, mask)[0] * w34).sum(), [r(4, 3), r(4, 3), r(4, 3)]),
        "multi_head_attention": (mha_fn, [r(1, 4, 6)] + [p.detach().clone() for p in mha.parameters()]),
    }


def gradient_suite(seed: int = 0) -> Dict[str, GradCheckReport]:
    reports = {}
    for name, (fn, inputs) in op_cases(seed).items():
        reports[name] = finite_difference_check(fn, inputs, tol=GRAD_TOL)
    rng = np.random.default_rng(seed)
    for position in ("tail", "head", "mean"):
        model = tiny_model(seed, summary_position=position)
        randomize_parameters(model, seed)
        batch = random_batch(model, 3, rng)
        tin = draw_transfer_inputs(model, batch.targets.tolist(), rng)
        reports[f"full_loss[{position}]"] = model_loss_check(model, batch, tin, seed=seed)
    return reports


def exhaustive_ranking(model: EagerModel, stream: str, history) -> List[Tuple[Tuple[int, ...], float]]:
    """Every item's code with its teacher-forced log-probability, best first, ties by code."""
    tree: CodeTree = model.tree(stream)
    codes = torch.as_tensor(tree.codes, dtype=torch.long)
    with eval_mode(model):
        memory, pad = encode_history(model, [list(history)])
        out = stream_forward(model, stream, memory, pad, codes, with_summary=False)
        logp = (-generation_nll(out, codes)).double().numpy()
    ranked = sorted(((tuple(int(d) for d in tree.codes[i]), float(logp[i])) for i in range(tree.num_items)),
                    key=lambda cs: (-cs[1], cs[0]))
    return ranked


def beam_oracle_case(model: EagerModel, stream: str, history) -> Tuple[bool, float]:
    """Full-width beam vs exhaustive ranking; returns (same order, max logprob gap)."""
    tree = model.tree(stream)
    width = tree.branch_k ** tree.depth
    with eval_mode(model):
        memory, pad = encode_history(model, [list(history)])
        hyps = beam_search_encoded(model, stream, memory, pad, width, tree.num_items)[0]
    oracle = exhaustive_ranking(model, stream, history)
    same = [h.digits for h in hyps] == [c for c, _ in oracle]
    gap = max(abs(h.logprob - lp) for h, (_, lp) in zip(hyps, oracle))
    return same, gap


def beam_suite(cases: int = 20, seed: int = 0) -> List[Tuple[bool, float]]:
    rng = np.random.default_rng(seed)
    results = []
    for case in range(cases):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(k + 1, min(k ** 4, 4096 // k) + 1))
        position = ("tail", "head", "mean")[case % 3]
        model = tiny_model(seed + case, num_items=n, branch_k=k, summary_position=position)
        randomize_parameters(model, seed + case)
        history = rng.integers(0, n, size=int(rng.integers(1, 6))).tolist()
        for stream in model.stream_names:
            results.append(beam_oracle_case(model, stream, history))
    return results


def run_selfcheck(seed: int = 0, out: Optional[TextIO] = None) -> bool:
    ok = True
    t0 = time.perf_counter()
    for name, rep in gradient_suite(seed).items():
        ok &= rep.passed
        if out is not None:
            out.write(f"grad {name:<24} max_rel_err={rep.max_rel_error:.2e} {'PASS' if rep.passed else 'FAIL'}\n")
    results = beam_suite(seed=seed)
    beam_ok = all(same and gap < LOGPROB_TOL for same, gap in results)
    ok &= beam_ok
    if out is not None:
        worst = max(gap for _, gap in results)
        out.write(f"beam oracle {len(results)} searches max_gap={worst:.2e} {'PASS' if beam_ok else 'FAIL'}\n")
        out.write(f"selfcheck {'PASS' if ok else 'FAIL'} in {time.perf_counter() - t0:.1f}s\n")
    return bool(ok)
