"""Trie-constrained beam search per stream and confidence-based fusion across streams."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import Tensor

from .model import Batch, EagerModel, encode_history
from .nn import log_softmax

DEFAULT_BEAM = 100


class InferenceError(ValueError):
    pass


@dataclass
class BeamHypothesis:
    digits: Tuple[int, ...]
    logprob: float


@dataclass
class RankedList:
    entries: List[Tuple[int, float]] = field(default_factory=list)
    k: int = 0

    @property
    def items(self) -> List[int]:
        return [i for i, _ in self.entries]

    @property
    def scores(self) -> List[float]:
        return [s for _, s in self.entries]

    def __len__(self):
        return len(self.entries)


@contextmanager
def eval_mode(model: torch.nn.Module):
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            yield
    finally:
        model.train(was_training)


def next_level_logprobs(model: EagerModel, stream: str, memory: Tensor, memory_pad: Optional[Tensor],
                        prefixes: Tensor) -> np.ndarray:
    """Log-probabilities (R, branch_k) of the next digit after each prefix row (R, j)."""
    dec = model.decoders[stream]
    r, j = prefixes.shape
    parts = []
    if model.streams[stream].summary_position == "head":
        parts.append(torch.full((r, 1), dec.summary, dtype=torch.long))
    parts.append(torch.full((r, 1), dec.sos, dtype=torch.long))
    if j:
        parts.append(prefixes + torch.arange(j) * dec.branch_k)
    states = dec(torch.cat(parts, 1), memory, memory_pad)
    return log_softmax(dec.level_logits(states[:, -1], j)).double().numpy()


def _lex_rank(prefixes: Sequence[Tuple[int, ...]]) -> np.ndarray:
    order = sorted(range(len(prefixes)), key=lambda i: prefixes[i])
    rank = np.empty(len(prefixes), dtype=np.int64)
    rank[order] = np.arange(len(prefixes))
    return rank


def beam_search_encoded(model: EagerModel, stream: str, memory: Tensor, memory_pad: Optional[Tensor],
                        beam_size: int, topk: int) -> List[List[BeamHypothesis]]:
    """Beam search for every row of an encoded batch (U, T, h); one hypothesis list per row."""
    if topk < 1 or beam_size < topk:
        raise InferenceError(f"need beam_size >= topk >= 1, got beam={beam_size} topk={topk}")
    tree = model.tree(stream)
    n_users = memory.shape[0]
    beams: List[List[BeamHypothesis]] = [[BeamHypothesis((), 0.0)] for _ in range(n_users)]
    for level in range(tree.depth):
        owners = np.array([u for u, hyps in enumerate(beams) for _ in hyps], dtype=np.int64)
        if owners.size == 0:
            break
        prefixes = torch.tensor([h.digits for hyps in beams for h in hyps], dtype=torch.long).reshape(
            len(owners), level)
        idx = torch.as_tensor(owners)
        pad = None if memory_pad is None else memory_pad[idx]
        logp = next_level_logprobs(model, stream, memory[idx], pad, prefixes)
        row = 0
        new_beams = []
        for u, hyps in enumerate(beams):
            parents, digits, scores = [], [], []
            for p, h in enumerate(hyps):
                valid = tree.valid_next_digits(h.digits)
                parents.append(np.full(valid.size, p))
                digits.append(valid)
                scores.append(h.logprob + logp[row + p, valid])
            row += len(hyps)
            if not hyps:
                new_beams.append([])
                continue
            parents = np.concatenate(parents)
            digits = np.concatenate(digits)
            scores = np.concatenate(scores)
            prank = _lex_rank([h.digits for h in hyps])[parents]
            order = np.lexsort((digits, prank, -scores))[:beam_size]
            new_beams.append([BeamHypothesis(hyps[parents[i]].digits + (int(digits[i]),), float(scores[i]))
                              for i in order])
        beams = new_beams
    return [hyps[:topk] for hyps in beams]


def beam_search(model: EagerModel, stream: str, history: Sequence[int], beam_size: int = DEFAULT_BEAM,
                topk: int = 10) -> List[Tuple[Tuple[int, ...], float]]:
    with eval_mode(model):
        memory, pad = encode_history(model, [list(history)])
        hyps = beam_search_encoded(model, stream, memory, pad, beam_size, topk)[0]
    return [(h.digits, h.logprob) for h in hyps]


def confidence_score(code_logprob: float, code_len: int) -> float:
    """Length-normalised negative log-likelihood; lower means more confident."""
    if code_len < 1:
        raise InferenceError("code length must be >= 1")
    return -float(code_logprob) / code_len


def fuse_rankings(per_stream: Sequence[Sequence[Tuple[int, float]]], k: int) -> RankedList:
    """Merge per-stream (item, score) lists: keep each item's best score, sort ascending.

    Score ties go to the earlier stream, then the lower item index.
    """
    best = {}
    for s_idx, entries in enumerate(per_stream):
        for item, score in entries:
            key = (float(score), s_idx)
            if item not in best or key < best[item]:
                best[item] = key
    ranked = sorted(best.items(), key=lambda kv: (kv[1][0], kv[1][1], kv[0]))[:k]
    return RankedList([(int(item), key[0]) for item, key in ranked], k)


class EagerRecommender:
    """Batch recommender over a trained model: encode once, search each stream, fuse."""

    def __init__(self, model: EagerModel, beam_size: int = DEFAULT_BEAM, streams: Optional[Iterable[str]] = None,
                 chunk_size: int = 64):
        self.model = model
        self.beam_size = beam_size
        self.streams = list(streams) if streams is not None else list(model.stream_names)
        self.chunk_size = chunk_size

    def stream_candidates(self, histories: Sequence[Sequence[int]], k: int):
        """Per user, per stream: (item, confidence) lists sorted ascending."""
        model = self.model
        beam = max(self.beam_size, 1)
        if beam < k:
            raise InferenceError(f"beam size {beam} < k {k}")
        out = [[[] for _ in self.streams] for _ in histories]
        with eval_mode(model):
            for start in range(0, len(histories), self.chunk_size):
                chunk = histories[start:start + self.chunk_size]
                batch = Batch.from_lists(chunk)
                memory, pad = encode_history(model, batch.histories, batch.pad_mask)
                for s_idx, name in enumerate(self.streams):
                    tree = model.tree(name)
                    results = beam_search_encoded(model, name, memory, pad, beam, min(k, tree.num_items))
                    for u, hyps in enumerate(results):
                        entries = []
                        for h in hyps:
                            item = tree.code_to_item(h.digits)
                            if item is None:
                                raise InferenceError(f"beam produced unknown code {h.digits}")
                            entries.append((item, confidence_score(h.logprob, tree.depth)))
                        out[start + u][s_idx] = entries
        return out

    def recommend(self, histories: Sequence[Sequence[int]], k: int) -> List[RankedList]:
        return [fuse_rankings(per_stream, k) for per_stream in self.stream_candidates(histories, k)]


def recommend_topk(model: EagerModel, history: Sequence[int], k: int = 10,
                   beam_size: int = DEFAULT_BEAM) -> RankedList:
    if len(history) == 0:
        raise InferenceError("empty history")
    return EagerRecommender(model, beam_size).recommend([list(history)], k)[0]
