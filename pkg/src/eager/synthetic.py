"""Synthetic interaction logs with known structure, for sanity experiments."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .corpus import Interaction


def rule_corpus(num_items: int = 200, num_users: int = 500, min_len: int = 6, max_len: int = 10,
                seed: int = 0) -> Tuple[List[Interaction], Dict[str, str]]:
    """Users walk the catalogue in order: item i is always followed by item i+1 (mod N)."""
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(num_users):
        start = int(rng.integers(num_items))
        length = int(rng.integers(min_len, max_len + 1))
        for t in range(length):
            rows.append(Interaction(f"u{u}", f"i{(start + t) % num_items}", 1000 * u + t))
    texts = {f"i{i}": f"item{i} block{i // 10} band{i // 25} parity{i % 2}" for i in range(num_items)}
    return rows, texts


def clustered_corpus(items_per_cluster: int = 50, num_users: int = 600, min_len: int = 8, max_len: int = 14,
                     hop: int = 3, jump: float = 0.0, seed: int = 0) -> Tuple[List[Interaction], Dict[str, str]]:
    """Two item clusters; each user stays in one and steps 1..``hop`` items forward each time.

    With probability ``jump`` a step instead lands on a uniform item of the
    user's cluster.

    Item texts name the cluster plus a coarse position bucket, so the text
    space knows the cluster and neighbourhood while co-occurrence knows the
    step structure.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(num_users):
        cluster = int(rng.integers(2))
        pos = int(rng.integers(items_per_cluster))
        length = int(rng.integers(min_len, max_len + 1))
        for t in range(length):
            item = cluster * items_per_cluster + pos
            rows.append(Interaction(f"u{u}", f"c{cluster}_{item}", 1000 * u + t))
            if rng.random() < jump:
                pos = int(rng.integers(items_per_cluster))
            else:
                pos = (pos + int(rng.integers(1, hop + 1))) % items_per_cluster
    texts = {}
    for c in range(2):
        for p in range(items_per_cluster):
            item = c * items_per_cluster + p
            texts[f"c{c}_{item}"] = f"cluster{c} zone{c}_{p // 5} slot{p % 5} item{item}"
    return rows, texts


def write_interactions(rows: List[Interaction], path, delimiter: str = ",") -> None:
    Path(path).write_text("".join(f"{r.user_id}{delimiter}{r.item_id}{delimiter}{r.timestamp}\n" for r in rows))


def write_texts(texts: Dict[str, str], path) -> None:
    Path(path).write_text("".join(f"{item}\t{text}\n" for item, text in texts.items()))
