"""Transformer building blocks, losses, Adam with warmup, gradient checking and checkpoint I/O.

Differentiation is torch autograd; the ops themselves are written out here so
masking, normalisation and loss conventions stay explicit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

LN_EPS = 1e-5
INIT_STD = 0.02


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    z = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    z = x - x.amax(dim=dim, keepdim=True).detach()
    return z - torch.log(torch.exp(z).sum(dim=dim, keepdim=True))


def cross_entropy_loss(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits`` (B x V)."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    vocab = logits.shape[-1]
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= vocab):
        raise ValueError(f"target index out of range [0, {vocab})")
    logp = log_softmax(logits, dim=-1)
    return -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1).mean()


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[Tensor] = None):
    """Scaled dot-product attention. ``mask`` is True where attending is forbidden.

    Returns (output, weights); masked weights are exactly zero.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(mask, float("-inf"))
    weights = softmax(scores, dim=-1)
    if mask is not None:
        weights = weights.masked_fill(mask, 0.0)
    return weights @ v, weights


def causal_mask(t: int, device=None) -> Tensor:
    return torch.triu(torch.ones(t, t, dtype=torch.bool, device=device), diagonal=1)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, std: float = INIT_STD):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(d_in, d_out) * std)
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.o = Linear(dim, dim)

    def forward(self, q_in: Tensor, kv_in: Tensor, causal: bool = False,
                pad_mask: Optional[Tensor] = None) -> Tensor:
        """q_in (B, Tq, D), kv_in (B, Tk, D); pad_mask (B, Tk) True at padded keys."""
        if q_in.shape[-1] != self.dim or kv_in.shape[-1] != self.dim:
            raise ValueError(f"expected feature dim {self.dim}, got {q_in.shape[-1]} / {kv_in.shape[-1]}")
        b, tq, _ = q_in.shape
        tk = kv_in.shape[1]
        hd = self.dim // self.heads

        def split(x, t):
            return x.view(b, t, self.heads, hd).transpose(1, 2)

        q, k, v = split(self.q(q_in), tq), split(self.k(kv_in), tk), split(self.v(kv_in), tk)
        mask = None
        if causal:
            if tq != tk:
                raise ValueError("causal attention needs equal query and key lengths")
            mask = causal_mask(tq, q_in.device)[None, None]
        if pad_mask is not None:
            pm = pad_mask[:, None, None, :]
            mask = pm if mask is None else (mask | pm)
        out, _ = attention(q, k, v, mask)
        return self.o(out.transpose(1, 2).reshape(b, tq, self.dim))


def multi_head_attention(layer: MultiHeadAttention, q_in: Tensor, kv_in: Tensor,
                         causal_mask: bool = False, pad_mask: Optional[Tensor] = None) -> Tensor:
    return layer(q_in, kv_in, causal=causal_mask, pad_mask=pad_mask)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.up = Linear(dim, hidden)
        self.down = Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(torch.relu(self.up(x)))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention + feed-forward."""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4, dropout: float = 0.1):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult * dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor, pad_mask: Optional[Tensor] = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, pad_mask=pad_mask))
        return x + self.drop(self.ffn(self.norm2(x)))


class DecoderBlock(nn.Module):
    """Pre-norm self-attention (causal or not), cross-attention, feed-forward."""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4, dropout: float = 0.1, causal: bool = True):
        super().__init__()
        self.causal = causal
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm3 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult * dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor, memory: Tensor, memory_pad_mask: Optional[Tensor] = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, causal=self.causal))
        x = x + self.drop(self.cross_attn(self.norm2(x), memory, pad_mask=memory_pad_mask))
        return x + self.drop(self.ffn(self.norm3(x)))


# -- optimisation ------------------------------------------------------------

class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 0
    step_count: int = 0
    m: Dict[str, Tensor] = field(default_factory=dict)
    v: Dict[str, Tensor] = field(default_factory=dict)

    def effective_lr(self, step: Optional[int] = None) -> float:
        step = self.step_count if step is None else step
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup_steps)


@torch.no_grad()
def adam_step(state: AdamState, params: Dict[str, Tensor], grads: Dict[str, Optional[Tensor]]) -> None:
    """Bias-corrected Adam update in place; missing gradients count as zero."""
    for name, g in grads.items():
        if g is not None and not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient for {name} at step {state.step_count + 1}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.betas
    lr = state.effective_lr(t)
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if g is None:
            m.mul_(b1)
            v.mul_(b2)
        else:
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: List[float]
    tol: float
    refined: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def finite_difference_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], tol: float = 1e-4,
                            h: float = 1e-4, max_coords: Optional[int] = None, seed: int = 0,
                            analytic: Optional[Sequence[Tensor]] = None, atol: float = 1e-6,
                            refine: int = 2) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn(*inputs)`` with central differences.

    The step is ``h * max(1, |x|)`` per coordinate. Error per input is
    max|analytic - numeric| divided by the larger of the two gradients'
    max-norms (floored at ``atol`` so exactly-zero gradients compare against
    round-off). At most ``max_coords`` coordinates per input are probed.
    A coordinate that disagrees is re-measured with steps 10x and 100x
    smaller (``refine`` times): a kink inside the +-h window (ReLU, Huber)
    resolves, a wrong gradient does not. ``analytic`` overrides the autograd
    gradients (negative controls).
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    if analytic is None:
        out = fn(*inputs)
        grads = torch.autograd.grad(out, inputs, allow_unused=True)
        analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, grads)]
    rng = np.random.default_rng(seed)
    errors = []
    refined = 0
    with torch.no_grad():
        work = [x.detach().clone() for x in inputs]

        def central(flat, c, step):
            orig = flat[c].item()
            flat[c] = orig + step
            f_plus = float(fn(*work))
            flat[c] = orig - step
            f_minus = float(fn(*work))
            flat[c] = orig
            return (f_plus - f_minus) / (2 * step)

        for idx, x in enumerate(work):
            flat = x.view(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and coords.size > max_coords:
                coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
            a = analytic[idx].reshape(-1)[torch.as_tensor(coords)].double()
            num = torch.tensor([central(flat, c, h * max(1.0, abs(flat[c].item()))) for c in coords],
                               dtype=torch.float64)

            def scale():
                return max(a.abs().max().item() if a.numel() else 0.0,
                           num.abs().max().item() if num.numel() else 0.0, atol)

            for j, c in enumerate(coords):
                step = h * max(1.0, abs(flat[c].item()))
                for _ in range(refine):
                    if abs(a[j].item() - num[j].item()) / scale() < tol:
                        break
                    step /= 10.0
                    retry = central(flat, c, step)
                    if abs(a[j].item() - retry) < abs(a[j].item() - num[j].item()):
                        num[j] = retry
                        refined += 1
            diff = (a - num).abs().max().item() if a.numel() else 0.0
            errors.append(diff / scale())
    return GradCheckReport(max(errors) if errors else 0.0, errors, tol, refined)


# -- checkpoints -------------------------------------------------------------

class CheckpointError(ValueError):
    pass


MANIFEST = "manifest.json"
BLOB = "params.bin"


def save_checkpoint(state: Dict[str, Tensor], directory, extra: Optional[dict] = None) -> None:
    """Write a JSON manifest (name, shape, dtype, offset) and one little-endian blob."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"tensors": entries}
    if extra:
        manifest["extra"] = extra
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (d / BLOB).write_bytes(b"".join(chunks))


def load_checkpoint(directory, expected: Optional[Dict[str, Tensor]] = None) -> Dict[str, Tensor]:
    """Read a checkpoint; with ``expected`` (a state dict) names and shapes must match."""
    d = Path(directory)
    manifest = json.loads((d / MANIFEST).read_text())
    blob = (d / BLOB).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if expected is not None:
        missing = [n for n in expected if n not in out]
        if missing:
            raise CheckpointError(f"checkpoint lacks tensor {missing[0]!r}")
        unexpected = [n for n in out if n not in expected]
        if unexpected:
            raise CheckpointError(f"checkpoint has unexpected tensor {unexpected[0]!r}")
        for name, ref in expected.items():
            if tuple(out[name].shape) != tuple(ref.shape):
                raise CheckpointError(
                    f"tensor {name!r}: checkpoint shape {tuple(out[name].shape)} "
                    f"!= model shape {tuple(ref.shape)}")
    return out


def checkpoint_extra(directory) -> dict:
    return json.loads((Path(directory) / MANIFEST).read_text()).get("extra", {})
