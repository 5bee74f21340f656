"""Leave-one-out Recall@K / NDCG@K."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Sequence

from .corpus import Split

DEFAULT_KS = (5, 10, 20)


def _items(ranked) -> Sequence[int]:
    return ranked.items if hasattr(ranked, "items") and not isinstance(ranked, dict) else ranked


def recall_at_k(ranked, target: int, k: int) -> int:
    return int(target in list(_items(ranked))[:k])


def ndcg_at_k(ranked, target: int, k: int) -> float:
    items = list(_items(ranked))[:k]
    if target not in items:
        return 0.0
    return 1.0 / math.log2(items.index(target) + 2)


@dataclass
class MetricsReport:
    recall: Dict[int, float] = field(default_factory=dict)
    ndcg: Dict[int, float] = field(default_factory=dict)
    num_eval_users: int = 0

    def as_dict(self) -> Dict[str, float]:
        out = {}
        for k in sorted(self.recall):
            out[f"recall@{k}"] = self.recall[k]
            out[f"ndcg@{k}"] = self.ndcg[k]
        return out

    def check(self) -> None:
        ks = sorted(self.recall)
        for a, b in zip(ks, ks[1:]):
            if self.recall[a] > self.recall[b] + 1e-12 or self.ndcg[a] > self.ndcg[b] + 1e-12:
                raise ValueError(f"metrics not monotone between @{a} and @{b}")
        for k in ks:
            if self.ndcg[k] > self.recall[k] + 1e-12:
                raise ValueError(f"ndcg@{k} exceeds recall@{k}")


def evaluate_rankings(rankings, targets: Sequence[int], ks=DEFAULT_KS) -> MetricsReport:
    ks = sorted(set(int(k) for k in ks))
    hits = {k: 0.0 for k in ks}
    gains = {k: 0.0 for k in ks}
    n = 0
    for ranked, target in zip(rankings, targets):
        n += 1
        for k in ks:
            hits[k] += recall_at_k(ranked, target, k)
            gains[k] += ndcg_at_k(ranked, target, k)
    denom = max(n, 1)
    report = MetricsReport({k: hits[k] / denom for k in ks}, {k: gains[k] / denom for k in ks}, n)
    report.check()
    return report


def evaluate_leave_one_out(recommender, split: Split, ks=DEFAULT_KS, target_field: str = "test",
                           max_history: int = 20) -> MetricsReport:
    """Score held-out targets. ``recommender.recommend(histories, k)`` returns ranked lists.

    Test histories include the validation item; all histories keep the last
    ``max_history`` items.
    """
    histories = split.histories(target_field, max_history)
    targets = split.targets(target_field)
    rankings = recommender.recommend(histories, max(ks))
    return evaluate_rankings(rankings, targets, ks)


def format_table(report: MetricsReport, title: str = "") -> str:
    ks = sorted(report.recall)
    lines = []
    if title:
        lines.append(title)
    lines.append("metric  " + "".join(f"{'@' + str(k):>10}" for k in ks))
    lines.append("recall  " + "".join(f"{report.recall[k]:>10.4f}" for k in ks))
    lines.append("ndcg    " + "".join(f"{report.ndcg[k]:>10.4f}" for k in ks))
    lines.append(f"users   {report.num_eval_users:>10d}")
    return "\n".join(lines)


def save_metrics(report: MetricsReport, path) -> None:
    lines = [f"{key}={value:.6f}\n" for key, value in report.as_dict().items()]
    lines.append(f"num_eval_users={report.num_eval_users}\n")
    Path(path).write_text("".join(lines))
