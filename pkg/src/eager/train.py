"""Multi-task training loop with seeded shuffling, warmup and best-checkpoint selection."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np
import torch

from .codes import sample_replacement
from .corpus import Split, TrainingExample
from .evaluation import MetricsReport, evaluate_leave_one_out
from .infer import EagerRecommender
from .model import Batch, EagerModel, LossBreakdown, ModelError, TransferInputs, total_loss
from .nn import AdamState, adam_step

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "gen", "con", "recon", "recog", "total", "R@10", "N@10")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 200
    lr: float = 1e-3
    warmup_steps: int = 1000
    seed: int = 0
    eval_every: int = 0          # steps; 0 = once per epoch
    patience: int = 20           # evals without improvement; 0 disables early stopping
    max_steps: int = 0           # 0 = no cap
    tsg_only: bool = False
    enable_gct: bool = True
    enable_stt: bool = True
    eval_beam: int = 20
    eval_users: int = 0          # 0 = every validation user
    max_history: int = 20

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.tsg_only:
            self.enable_gct = False
            self.enable_stt = False


@dataclass
class EvalRecord:
    step: int
    recall10: float
    ndcg10: float


@dataclass
class TrainReport:
    history: List[LossBreakdown] = field(default_factory=list)
    evals: List[EvalRecord] = field(default_factory=list)
    best_step: int = 0
    best_ndcg10: float = -1.0
    steps: int = 0
    seconds: float = 0.0
    stopped_early: bool = False


def sample_corruptions(rng: np.random.Generator, code_len: int, mask_ratio: float = 0.5,
                       replace_ratio: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Independent draws of ceil(ratio * l) distinct positions for masking and for replacement."""
    if code_len < 1:
        raise ValueError("code length must be >= 1")
    n_mask = min(code_len, max(1, math.ceil(mask_ratio * code_len)))
    n_repl = min(code_len, max(1, math.ceil(replace_ratio * code_len)))
    mask = np.sort(rng.choice(code_len, size=n_mask, replace=False))
    repl = np.sort(rng.choice(code_len, size=n_repl, replace=False))
    return mask, repl


def sample_negative_digits(rng: np.random.Generator, true_digit: int, branch_k: int, count: int) -> np.ndarray:
    if count >= branch_k:
        raise ModelError(f"{count} negatives need a level vocabulary larger than {branch_k}")
    picks = rng.choice(branch_k - 1, size=count, replace=False)
    return picks + (picks >= true_digit)


def draw_transfer_inputs(model: EagerModel, targets: Sequence[int], rng: np.random.Generator) -> TransferInputs:
    cfg = model.config
    tree = model.tree(model.guided_stream)
    l, k = tree.depth, tree.branch_k
    b = len(targets)
    mask = np.zeros((b, l), dtype=bool)
    negatives = np.zeros((b, l, cfg.num_negatives), dtype=np.int64)
    corrupted = np.zeros((b, l), dtype=np.int64)
    for row, item in enumerate(targets):
        code = tree.codes[int(item)]
        m_pos, r_pos = sample_corruptions(rng, l, cfg.mask_ratio, cfg.replace_ratio)
        mask[row, m_pos] = True
        for p in m_pos:
            negatives[row, p] = sample_negative_digits(rng, int(code[p]), k, cfg.num_negatives)
        corrupted[row] = sample_replacement(tree, code, r_pos, rng)
    return TransferInputs(torch.from_numpy(mask), torch.from_numpy(negatives), torch.from_numpy(corrupted))


def validate(model: EagerModel, split: Split, config: TrainConfig, users: Optional[Sequence[int]] = None,
             ks=(10,)) -> MetricsReport:
    sub = split
    if users is not None:
        sub = Split([split.users[i] for i in users], split.num_items, split.excluded)
    rec = EagerRecommender(model, beam_size=max(config.eval_beam, max(ks)))
    return evaluate_leave_one_out(rec, sub, ks=ks, target_field="valid", max_history=config.max_history)


def _eval_users(split: Split, config: TrainConfig) -> Optional[List[int]]:
    if not config.eval_users or config.eval_users >= len(split.users):
        return None
    rng = np.random.default_rng([config.seed, 0xE7A1])
    return sorted(rng.choice(len(split.users), size=config.eval_users, replace=False).tolist())


def _snapshot(model: EagerModel) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(model: EagerModel, examples: Sequence[TrainingExample], split: Optional[Split], config: TrainConfig,
          log: Optional[TextIO] = None) -> TrainReport:
    """Optimise ``model`` in place; ends with the best-validation parameters loaded.

    Without a split no validation runs and the final parameters are kept.
    """
    if config.enable_stt and not model.has_transfer:
        raise ModelError("transfer task needs a guide and a guided stream")
    if not examples:
        raise ValueError("no training examples")
    torch.manual_seed(config.seed)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    sample_rng = np.random.default_rng([config.seed, 2])
    params = dict(model.named_parameters())
    state = AdamState(lr=config.lr, warmup_steps=config.warmup_steps)
    report = TrainReport()
    eval_users = _eval_users(split, config) if split is not None else None
    best_state = _snapshot(model)
    since_best = 0
    steps_per_epoch = math.ceil(len(examples) / config.batch_size)
    eval_every = config.eval_every or steps_per_epoch
    last = LossBreakdown()
    t0 = time.perf_counter()
    if log is not None:
        log.write("\t".join(LOG_COLUMNS) + "\n")

    def run_eval(step: int) -> bool:
        nonlocal best_state, since_best
        metrics = validate(model, split, config, eval_users)
        rec = EvalRecord(step, metrics.recall[10], metrics.ndcg[10])
        report.evals.append(rec)
        if log is not None:
            log.write(f"{step}\t{last.gen:.6f}\t{last.con:.6f}\t{last.recon:.6f}\t{last.recog:.6f}\t"
                      f"{last.total:.6f}\t{rec.recall10:.6f}\t{rec.ndcg10:.6f}\n")
            log.flush()
        logger.info("step %d gen %.4f total %.4f R@10 %.4f N@10 %.4f", step, last.gen, last.total,
                    rec.recall10, rec.ndcg10)
        if rec.ndcg10 > report.best_ndcg10:
            report.best_ndcg10, report.best_step = rec.ndcg10, step
            best_state = _snapshot(model)
            since_best = 0
        else:
            since_best += 1
        return bool(config.patience) and since_best >= config.patience

    step = 0
    done = False
    for _epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(examples))
        for start in range(0, len(order), config.batch_size):
            chunk = [examples[i] for i in order[start:start + config.batch_size]]
            batch = Batch.from_examples(chunk)
            tin = draw_transfer_inputs(model, batch.targets.tolist(), sample_rng) if config.enable_stt else None
            model.train()
            loss, last = total_loss(model, batch, tin, config.enable_gct, config.enable_stt)
            if not math.isfinite(last.total):
                raise TrainingDiverged(f"non-finite loss at step {step + 1}: {last}")
            for p in params.values():
                p.grad = None
            loss.backward()
            adam_step(state, params, {n: p.grad for n, p in params.items()})
            step += 1
            report.history.append(last)
            if split is not None and step % eval_every == 0:
                done = run_eval(step)
            if done or (config.max_steps and step >= config.max_steps):
                done = True
                break
        if done:
            break
    if split is not None and (not report.evals or report.evals[-1].step != step):
        run_eval(step)
    report.steps = step
    report.stopped_early = bool(config.patience) and since_best >= config.patience
    if split is not None:
        model.load_state_dict(best_state)
    report.seconds = time.perf_counter() - t0
    return report
