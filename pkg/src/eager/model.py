"""Two-stream generative recommender: shared history encoder, per-stream code decoders
with a summary token, and a bidirectional transfer module between streams."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor, nn

from .codes import CodeTree
from .nn import (
    INIT_STD,
    DecoderBlock,
    EncoderBlock,
    LayerNorm,
    Linear,
    cross_entropy_loss,
    log_softmax,
)

SUMMARY_POSITIONS = ("head", "mean", "tail")
METRICS = ("cosine", "infonce", "smooth_l1")
DIRECTIONS = {
    "semantic_to_behavior": ("semantic", "behavior"),
    "behavior_to_semantic": ("behavior", "semantic"),
}


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden: int = 128
    enc_layers: int = 1
    dec_layers: int = 4
    transfer_layers: int = 1
    heads: int = 4
    ffn_mult: int = 4
    dropout: float = 0.1
    max_history: int = 20
    summary_position: str = "tail"
    metric: str = "smooth_l1"
    infonce_temperature: float = 0.07
    lambda1: float = 1.0
    lambda2: float = 1.0
    mask_ratio: float = 0.5
    replace_ratio: float = 0.5
    num_negatives: int = 32
    direction: str = "semantic_to_behavior"

    def __post_init__(self):
        if self.summary_position not in SUMMARY_POSITIONS:
            raise ModelError(f"summary_position must be one of {SUMMARY_POSITIONS}")
        if self.metric not in METRICS:
            raise ModelError(f"metric must be one of {METRICS}")
        if self.direction not in DIRECTIONS:
            raise ModelError(f"direction must be one of {tuple(DIRECTIONS)}")
        if self.hidden % self.heads:
            raise ModelError("hidden must be divisible by heads")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class StreamConfig:
    name: str
    code_tree: CodeTree
    distill_target: np.ndarray
    summary_position: Optional[str] = None
    contrastive_metric: Optional[str] = None

    def __post_init__(self):
        self.distill_target = np.asarray(getattr(self.distill_target, "matrix", self.distill_target))
        if self.distill_target.shape[0] != self.code_tree.num_items:
            raise ModelError(
                f"stream {self.name!r}: {self.code_tree.num_items} coded items but "
                f"{self.distill_target.shape[0]} distillation rows")


@dataclass
class LossBreakdown:
    gen: float = 0.0
    con: float = 0.0
    recon: float = 0.0
    recog: float = 0.0
    total: float = 0.0
    lambda1: float = 1.0
    lambda2: float = 1.0


@dataclass
class Batch:
    histories: Tensor  # (B, T) long, right padded
    pad_mask: Tensor   # (B, T) bool, True at padding
    targets: Tensor    # (B,) long

    @classmethod
    def from_lists(cls, histories: Sequence[Sequence[int]], targets: Optional[Sequence[int]] = None):
        if any(len(h) == 0 for h in histories):
            raise ModelError("empty history")
        t = max(len(h) for h in histories)
        items = torch.zeros(len(histories), t, dtype=torch.long)
        pad = torch.ones(len(histories), t, dtype=torch.bool)
        for i, h in enumerate(histories):
            items[i, :len(h)] = torch.as_tensor(list(h), dtype=torch.long)
            pad[i, :len(h)] = False
        tg = torch.as_tensor(list(targets) if targets is not None else [-1] * len(histories), dtype=torch.long)
        return cls(items, pad, tg)

    @classmethod
    def from_examples(cls, examples):
        return cls.from_lists([e.history for e in examples], [e.target for e in examples])


@dataclass
class TransferInputs:
    """Per-step random draws for the transfer objectives (rows align with the batch)."""
    mask_positions: Tensor   # (B, l) bool
    negatives: Tensor        # (B, l, J) long digits, only read at masked positions
    corrupted_codes: Tensor  # (B, l) long


def _param(*shape, std=INIT_STD):
    return nn.Parameter(torch.randn(*shape) * std)


class HistoryEncoder(nn.Module):
    def __init__(self, num_items: int, cfg: ModelConfig):
        super().__init__()
        self.item_emb = _param(num_items, cfg.hidden)
        # Positions count back from the most recent item.
        self.pos_emb = _param(cfg.max_history, cfg.hidden)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.hidden, cfg.heads, cfg.ffn_mult, cfg.dropout) for _ in range(cfg.enc_layers))
        self.norm = LayerNorm(cfg.hidden)

    def forward(self, items: Tensor, pad_mask: Tensor) -> Tensor:
        t = items.shape[1]
        if t > self.pos_emb.shape[0]:
            raise ModelError(f"history length {t} exceeds max_history {self.pos_emb.shape[0]}")
        lengths = (~pad_mask).sum(1, keepdim=True)
        pos = (lengths - 1 - torch.arange(t)).clamp(min=0)
        x = self.drop(self.item_emb[items] + self.pos_emb[pos])
        for blk in self.blocks:
            x = blk(x, pad_mask)
        return self.norm(x)


class StreamDecoder(nn.Module):
    """Causal decoder over level-offset code tokens plus SOS and summary specials."""

    def __init__(self, branch_k: int, depth: int, distill_dim: int, cfg: ModelConfig):
        super().__init__()
        self.branch_k, self.depth = branch_k, depth
        self.sos = depth * branch_k
        self.summary = depth * branch_k + 1
        self.token_emb = _param(depth * branch_k + 2, cfg.hidden)
        self.pos_emb = _param(depth + 2, cfg.hidden)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg.hidden, cfg.heads, cfg.ffn_mult, cfg.dropout, causal=True)
            for _ in range(cfg.dec_layers))
        self.norm = LayerNorm(cfg.hidden)
        self.head_w = _param(depth, cfg.hidden, branch_k)
        self.head_b = nn.Parameter(torch.zeros(depth, branch_k))
        self.projection = Linear(cfg.hidden, distill_dim)

    def level_tokens(self, codes: Tensor) -> Tensor:
        if codes.numel() and (int(codes.min()) < 0 or int(codes.max()) >= self.branch_k):
            raise ModelError(f"code digit outside [0, {self.branch_k})")
        return codes + torch.arange(codes.shape[-1]) * self.branch_k

    def forward(self, tokens: Tensor, memory: Tensor, memory_pad: Optional[Tensor]) -> Tensor:
        x = self.drop(self.token_emb[tokens] + self.pos_emb[: tokens.shape[1]])
        for blk in self.blocks:
            x = blk(x, memory, memory_pad)
        return self.norm(x)

    def level_logits(self, states: Tensor, level: int) -> Tensor:
        return states @ self.head_w[level] + self.head_b[level]


class TransferModule(nn.Module):
    """Bidirectional decoder over [CLS, code tokens] cross-attending to one guide vector."""

    def __init__(self, depth: int, cfg: ModelConfig):
        super().__init__()
        self.cls = _param(cfg.hidden)
        self.mask = _param(cfg.hidden)
        self.pos_emb = _param(depth + 1, cfg.hidden)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg.hidden, cfg.heads, cfg.ffn_mult, cfg.dropout, causal=False)
            for _ in range(cfg.transfer_layers))
        self.norm = LayerNorm(cfg.hidden)
        self.token_head = Linear(cfg.hidden, cfg.hidden)
        self.recog_head = Linear(cfg.hidden, 1, std=0.0)

    def forward(self, token_emb: Tensor, tokens: Tensor, guide: Tensor,
                mask_positions: Optional[Tensor] = None) -> Tensor:
        x = token_emb[tokens]
        if mask_positions is not None:
            x = torch.where(mask_positions[..., None], self.mask.expand_as(x), x)
        b = tokens.shape[0]
        x = torch.cat([self.cls.expand(b, 1, -1), x], dim=1) + self.pos_emb
        x = self.drop(x)
        memory = guide[:, None, :]
        for blk in self.blocks:
            x = blk(x, memory)
        return self.norm(x)


class EagerModel(nn.Module):
    def __init__(self, num_items: int, streams: Sequence[StreamConfig], config: Optional[ModelConfig] = None,
                 seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if not streams:
            raise ModelError("at least one stream is required")
        self.config = cfg = config or ModelConfig()
        self.num_items = num_items
        self.stream_names: List[str] = [s.name for s in streams]
        if len(set(self.stream_names)) != len(self.stream_names):
            raise ModelError("stream names must be unique")
        self.streams: Dict[str, StreamConfig] = {s.name: s for s in streams}
        for s in streams:
            if s.code_tree.num_items != num_items:
                raise ModelError(f"stream {s.name!r} codes {s.code_tree.num_items} items, model has {num_items}")
            s.summary_position = s.summary_position or cfg.summary_position
            s.contrastive_metric = s.contrastive_metric or cfg.metric
            if s.summary_position not in SUMMARY_POSITIONS or s.contrastive_metric not in METRICS:
                raise ModelError(f"stream {s.name!r}: bad summary position or metric")

        guide, guided = DIRECTIONS[cfg.direction]
        self.guide_stream = guide if guide in self.streams else None
        self.guided_stream = guided if guided in self.streams else None

        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.encoder = HistoryEncoder(num_items, cfg)
            self.decoders = nn.ModuleDict({
                s.name: StreamDecoder(s.code_tree.branch_k, s.code_tree.depth, s.distill_target.shape[1], cfg)
                for s in streams})
            self.transfer = None
            if self.guide_stream and self.guided_stream:
                self.transfer = TransferModule(self.streams[self.guided_stream].code_tree.depth, cfg)

        for s in streams:
            self.register_buffer(f"codes_{s.name}", torch.as_tensor(s.code_tree.codes, dtype=torch.long),
                                 persistent=False)
            self.register_buffer(f"target_{s.name}", torch.as_tensor(s.distill_target, dtype=dtype),
                                 persistent=False)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.encoder.item_emb.dtype

    @property
    def has_transfer(self) -> bool:
        return self.transfer is not None

    def tree(self, stream: str) -> CodeTree:
        return self.streams[stream].code_tree

    def codes_for(self, stream: str, items: Tensor) -> Tensor:
        return getattr(self, f"codes_{stream}")[items]

    def targets_for(self, stream: str, items: Tensor) -> Tensor:
        return getattr(self, f"target_{stream}")[items]

    def exclusive_parameters(self) -> Dict[str, List[str]]:
        """Names of parameters that only the contrastive / transfer objectives touch."""
        names = [n for n, _ in self.named_parameters()]
        return {
            "projection": [n for n in names if ".projection." in n],
            "transfer": [n for n in names if n.startswith("transfer.")],
        }


# -- forward passes ----------------------------------------------------------

def encode_history(model: EagerModel, histories, pad_mask: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """Encode a batch of histories. Accepts a (B, T) tensor plus pad mask, or lists of item indices.

    Returns (H, pad_mask) with H of shape (B, T, hidden).
    """
    if not isinstance(histories, Tensor):
        seqs = [histories] if histories and np.isscalar(histories[0]) else histories
        b = Batch.from_lists(seqs)
        histories, pad_mask = b.histories, b.pad_mask
    if histories.shape[1] == 0:
        raise ModelError("empty history")
    if pad_mask is None:
        pad_mask = torch.zeros_like(histories, dtype=torch.bool)
    if int(histories.max()) >= model.num_items or int(histories.min()) < 0:
        raise ModelError("history item index out of range")
    return model.encoder(histories, pad_mask), pad_mask


@dataclass
class StreamOutput:
    logits: List[Tensor]                 # per level, (B, branch_k)
    summary_state: Optional[Tensor]      # (B, hidden)
    states: Tensor = field(repr=False)   # (B, T, hidden)


def stream_forward(model: EagerModel, stream: str, memory: Tensor, memory_pad: Optional[Tensor],
                   codes: Tensor, with_summary: bool = True) -> StreamOutput:
    """Teacher-forced pass of one stream decoder over target ``codes`` (B, l)."""
    dec: StreamDecoder = model.decoders[stream]
    position = model.streams[stream].summary_position
    b, l = codes.shape
    if l != dec.depth:
        raise ModelError(f"code length {l} != stream depth {dec.depth}")
    code_tok = dec.level_tokens(codes)
    sos = torch.full((b, 1), dec.sos, dtype=torch.long)
    summ = torch.full((b, 1), dec.summary, dtype=torch.long)
    if position == "head":
        tokens = torch.cat([summ, sos, code_tok[:, :-1]], 1)
        offset = 1
    elif with_summary:
        tail = [summ] if position == "tail" else []
        tokens = torch.cat([sos, code_tok, *tail], 1)
        offset = 0
    else:
        tokens = torch.cat([sos, code_tok[:, :-1]], 1)
        offset = 0
    if memory.shape[0] != b:
        memory = memory.expand(b, -1, -1)
        memory_pad = None if memory_pad is None else memory_pad.expand(b, -1)
    states = dec(tokens, memory, memory_pad)
    logits = [dec.level_logits(states[:, offset + j], j) for j in range(l)]
    summary = None
    if position == "head":
        summary = states[:, 0]
    elif with_summary and position == "tail":
        summary = states[:, l + 1]
    elif with_summary:
        summary = states[:, 1:l + 1].mean(1)
    return StreamOutput(logits, summary, states)


def generation_nll(out: StreamOutput, codes: Tensor) -> Tensor:
    """Per-example negative log-likelihood summed over code levels, shape (B,)."""
    total = 0.0
    for j, logits in enumerate(out.logits):
        total = total - log_softmax(logits).gather(1, codes[:, j:j + 1]).squeeze(1)
    return total


def generation_loss(model: EagerModel, stream: str, memory: Tensor, memory_pad: Optional[Tensor],
                    target_codes: Tensor) -> Tensor:
    out = stream_forward(model, stream, memory, memory_pad, target_codes, with_summary=False)
    return sum(cross_entropy_loss(lg, target_codes[:, j]) for j, lg in enumerate(out.logits))


def summary_embedding(model: EagerModel, stream: str, memory: Tensor, memory_pad: Optional[Tensor],
                      codes: Tensor) -> Tensor:
    out = stream_forward(model, stream, memory, memory_pad, codes, with_summary=True)
    return model.decoders[stream].projection(out.summary_state)


def smooth_l1(x: Tensor, y: Tensor, delta: float = 1.0) -> Tensor:
    d = (x - y).abs()
    return torch.where(d < delta, 0.5 * d * d / delta, d - 0.5 * delta).mean(-1)


def contrastive_loss(summary: Tensor, target: Tensor, metric: str = "smooth_l1",
                     items: Optional[Tensor] = None, temperature: float = 0.07) -> Tensor:
    """Distance between projected summary states and frozen item embeddings, batch-mean.

    ``infonce`` scores each summary against the distinct in-batch targets
    (cosine / temperature) with its own item as the positive.
    """
    target = target.detach()
    if summary.shape != target.shape:
        raise ModelError(f"summary {tuple(summary.shape)} vs target {tuple(target.shape)}")
    if summary.dim() == 1:
        summary, target = summary[None], target[None]
    if metric == "smooth_l1":
        return smooth_l1(summary, target).mean()
    sn = summary.norm(dim=-1)
    tn = target.norm(dim=-1)
    if bool((sn == 0).any()) or bool((tn == 0).any()):
        raise ModelError("zero-norm vector in cosine-based contrastive loss")
    if metric == "cosine":
        return (1.0 - (summary * target).sum(-1) / (sn * tn)).mean()
    if metric == "infonce":
        if items is None:
            items = torch.arange(summary.shape[0])
        uniq, inverse = torch.unique(items, return_inverse=True)
        first = torch.zeros(len(uniq), dtype=torch.long)
        first[inverse.flip(0)] = torch.arange(len(items) - 1, -1, -1)
        cands = target[first] / tn[first, None]
        logits = (summary / sn[:, None]) @ cands.T / temperature
        return cross_entropy_loss(logits, inverse)
    raise ModelError(f"unknown metric {metric!r}")


def transfer_forward(model: EagerModel, guided_codes: Tensor, guide_summary: Tensor,
                     mask_positions: Optional[Tensor] = None,
                     replaced_codes: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
    """Run the transfer module; returns (token states (B, l, h), cls state (B, h))."""
    if model.transfer is None:
        raise ModelError("model has no transfer module (needs both guide and guided streams)")
    if mask_positions is not None and replaced_codes is not None:
        raise ModelError("mask and replacement corruption cannot be combined in one pass")
    dec: StreamDecoder = model.decoders[model.guided_stream]
    codes = replaced_codes if replaced_codes is not None else guided_codes
    if guide_summary.dim() == 1:
        guide_summary = guide_summary[None].expand(codes.shape[0], -1)
    states = model.transfer(dec.token_emb, dec.level_tokens(codes), guide_summary, mask_positions)
    return states[:, 1:], states[:, 0]


def info_nce(query: Tensor, positive: Tensor, negatives: Tensor) -> Tensor:
    """Mean of -log softmax at the positive over [positive, negatives] dot-product scores.

    query (M, h), positive (M, h), negatives (M, J, h).
    """
    pos = (query * positive).sum(-1, keepdim=True)
    neg = torch.einsum("mh,mjh->mj", query, negatives)
    return -log_softmax(torch.cat([pos, neg], 1))[:, 0].mean()


def reconstruction_loss(model: EagerModel, guided_codes: Tensor, guide_summary: Tensor,
                        mask_positions: Tensor, negatives: Tensor) -> Tensor:
    """Contrastive recovery of masked guided-stream digits.

    ``negatives`` (B, l, J) holds sampled same-level digits; only masked
    positions are used. Averaged over all masked positions in the batch.
    """
    dec: StreamDecoder = model.decoders[model.guided_stream]
    j = negatives.shape[-1]
    if j >= dec.branch_k:
        raise ModelError(f"{j} negatives need a level vocabulary larger than {dec.branch_k}")
    if not bool(mask_positions.any()):
        raise ModelError("reconstruction needs at least one masked position")
    token_states, _ = transfer_forward(model, guided_codes, guide_summary, mask_positions=mask_positions)
    bi, li = torch.nonzero(mask_positions, as_tuple=True)
    query = model.transfer.token_head(token_states[bi, li])
    offset = li * dec.branch_k
    positive = dec.token_emb[guided_codes[bi, li] + offset]
    negs = dec.token_emb[negatives[bi, li] + offset[:, None]]
    return info_nce(query, positive, negs)


def recognition_logits(model: EagerModel, codes: Tensor, guide_summary: Tensor,
                       replaced_codes: Optional[Tensor] = None) -> Tensor:
    _, cls = transfer_forward(model, codes, guide_summary, replaced_codes=replaced_codes)
    return model.transfer.recog_head(cls).squeeze(-1)


def recognition_loss(model: EagerModel, guided_codes: Tensor, guide_summary: Tensor,
                     corrupted_codes: Tensor) -> Tensor:
    """-[log s+ + log(1 - s-)], batch mean, with s = sigmoid(recognition head on CLS)."""
    z_pos = recognition_logits(model, guided_codes, guide_summary)
    z_neg = recognition_logits(model, guided_codes, guide_summary, replaced_codes=corrupted_codes)
    return -(nn.functional.logsigmoid(z_pos) + nn.functional.logsigmoid(-z_neg)).mean()


def total_loss(model: EagerModel, batch: Batch, transfer_inputs: Optional[TransferInputs] = None,
               enable_gct: bool = True, enable_stt: bool = True) -> Tuple[Tensor, LossBreakdown]:
    """Generation + lambda1 * contrastive + lambda2 * (reconstruction + recognition)."""
    cfg = model.config
    if enable_stt and model.transfer is None:
        raise ModelError("transfer task enabled but the model has no guide/guided stream pair")
    if enable_stt and transfer_inputs is None:
        raise ModelError("transfer task enabled but no transfer inputs were drawn")
    memory, pad = encode_history(model, batch.histories, batch.pad_mask)
    zero = memory.new_zeros(())
    gen, con, recon, recog = zero, zero, zero, zero
    summaries: Dict[str, Tensor] = {}
    for name in model.stream_names:
        codes = model.codes_for(name, batch.targets)
        need_summary = enable_gct or (enable_stt and name == model.guide_stream)
        out = stream_forward(model, name, memory, pad, codes, with_summary=need_summary)
        gen = gen + generation_nll(out, codes).mean()
        if need_summary:
            summaries[name] = out.summary_state
        if enable_gct:
            s = model.streams[name]
            proj = model.decoders[name].projection(out.summary_state)
            con = con + contrastive_loss(proj, model.targets_for(name, batch.targets), s.contrastive_metric,
                                         items=batch.targets, temperature=cfg.infonce_temperature)
    if enable_stt:
        guided_codes = model.codes_for(model.guided_stream, batch.targets)
        guide = summaries[model.guide_stream]
        recon = reconstruction_loss(model, guided_codes, guide, transfer_inputs.mask_positions,
                                    transfer_inputs.negatives)
        recog = recognition_loss(model, guided_codes, guide, transfer_inputs.corrupted_codes)
    total = gen + cfg.lambda1 * con + cfg.lambda2 * (recon + recog)
    vals = [float(torch.as_tensor(x).detach()) for x in (gen, con, recon, recog, total)]
    breakdown = LossBreakdown(*vals, cfg.lambda1, cfg.lambda2)
    return total, breakdown

