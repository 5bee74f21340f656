"""Balanced hierarchical k-means item tokenization and the prefix trie over codes."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

KMEANS_ITERS = 50


class CodeTreeError(ValueError):
    pass


def code_depth(n: int, branch_k: int) -> int:
    """Smallest l >= 1 with branch_k**l >= n, computed in integers."""
    if branch_k < 2:
        raise CodeTreeError("branch_k must be >= 2")
    depth, capacity = 1, branch_k
    while capacity < n:
        depth += 1
        capacity *= branch_k
    return depth


@dataclass
class CodeTree:
    branch_k: int
    depth: int
    codes: np.ndarray  # (N, depth) int64
    seed: int = 0
    stream_tag: str = ""
    centroids: Dict[Tuple[int, ...], np.ndarray] = field(default_factory=dict, repr=False)
    node_sizes: Dict[Tuple[int, ...], List[int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(-1, self.depth)
        self._leaf: Dict[Tuple[int, ...], int] = {}
        self._children: Dict[Tuple[int, ...], Dict[int, int]] = {}
        for item, row in enumerate(self.codes):
            code = tuple(int(d) for d in row)
            if code in self._leaf:
                raise CodeTreeError(f"items {self._leaf[code]} and {item} share code {code}")
            if any(d < 0 or d >= self.branch_k for d in code):
                raise CodeTreeError(f"item {item} has a digit outside [0, {self.branch_k})")
            self._leaf[code] = item
            for j in range(self.depth):
                counts = self._children.setdefault(code[:j], {})
                counts[code[j]] = counts.get(code[j], 0) + 1
        self._next = {p: np.array(sorted(c), dtype=np.int64) for p, c in self._children.items()}

    @property
    def num_items(self) -> int:
        return self.codes.shape[0]

    def item_to_code(self, item: int) -> List[int]:
        if not 0 <= item < self.num_items:
            raise IndexError(f"item {item} out of range [0, {self.num_items})")
        return [int(d) for d in self.codes[item]]

    def code_to_item(self, code: Sequence[int]) -> Optional[int]:
        code = tuple(int(d) for d in code)
        if len(code) != self.depth:
            raise CodeTreeError(f"code length {len(code)} != depth {self.depth}")
        return self._leaf.get(code)

    def valid_next_digits(self, prefix: Sequence[int]) -> np.ndarray:
        prefix = tuple(int(d) for d in prefix)
        if len(prefix) >= self.depth:
            raise CodeTreeError(f"prefix length {len(prefix)} must be < depth {self.depth}")
        return self._next.get(prefix, np.empty(0, dtype=np.int64))

    def subtree_size(self, prefix: Sequence[int]) -> int:
        prefix = tuple(prefix)
        if len(prefix) == self.depth:
            return int(prefix in self._leaf)
        return sum(self._children.get(prefix, {}).values())

    def max_imbalance(self) -> int:
        """Largest (max - min) child size over all internal nodes with more than one child."""
        worst = 0
        for counts in self._children.values():
            if len(counts) > 1:
                worst = max(worst, max(counts.values()) - min(counts.values()))
        return worst


def _node_rng(seed: int, path: Tuple[int, ...]) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, len(path), *path]))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, iters: int = KMEANS_ITERS):
    """Lloyd's k-means with k-means++ seeding. Returns (centroids, labels)."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centroids[:1]).ravel()
    for c in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids[c] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centroids[c:c + 1]).ravel())
    labels = np.full(n, -1)
    for _ in range(iters):
        new = np.argmin(_sq_dists(x, centroids), axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = x[members].mean(0)
    return centroids, labels


def balance_assignment(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Greedy capacity-constrained repair of a k-means assignment.

    Cluster sizes end up as n//k or n//k + 1. The larger k-means clusters get
    the extra slots. Surplus points leave over-full clusters farthest-first
    and go to the nearest cluster that still has room.
    """
    n, k = x.shape[0], centroids.shape[0]
    q, r = divmod(n, k)
    labels = labels.copy()
    sizes = np.bincount(labels, minlength=k)
    cap = np.full(k, q)
    cap[np.lexsort((np.arange(k), -sizes))[:r]] += 1
    dist = _sq_dists(x, centroids)
    movers = []
    for c in np.flatnonzero(sizes > cap):
        members = np.flatnonzero(labels == c)
        far_first = members[np.lexsort((members, -dist[members, c]))]
        movers.extend(far_first[: sizes[c] - cap[c]])
    movers.sort(key=lambda i: (-dist[i, labels[i]], i))
    for i in movers:
        sizes[labels[i]] -= 1
        open_ = np.flatnonzero(sizes < cap)
        dest = open_[np.lexsort((open_, dist[i, open_]))[0]]
        labels[i] = dest
        sizes[dest] += 1
    return labels


def _split(x: np.ndarray, items: np.ndarray, k: int, rng: np.random.Generator):
    """Partition ``items`` into k balanced groups, ordered for digit assignment."""
    if k >= len(items):
        groups = [items[i:i + 1] for i in range(len(items))]
        cents = [x[items[i]] for i in range(len(items))]
    else:
        pts = x[items]
        centroids, labels = kmeans(pts, k, rng)
        labels = balance_assignment(pts, centroids, labels)
        groups, cents = [], []
        for c in range(k):
            members = items[labels == c]
            groups.append(members)
            cents.append(x[members].mean(0))
    order = sorted(range(len(groups)), key=lambda g: (tuple(cents[g]), int(groups[g].min())))
    return [groups[g] for g in order], np.stack([cents[g] for g in order])


def build_code_tree(embeddings, branch_k: int = 256, seed: int = 0, stream_tag: str = "",
                    normalize: bool = False) -> CodeTree:
    """Recursively split the catalogue into ``branch_k`` balanced clusters per level.

    Every item ends up with a code of the same length ceil(log_k N) (at least
    one digit). Clusters no larger than ``branch_k`` split straight into
    singletons; once an item is alone its remaining digits are zero.
    """
    x = np.asarray(getattr(embeddings, "matrix", embeddings), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise CodeTreeError("embeddings must be a non-empty 2-D array")
    if not np.all(np.isfinite(x)):
        raise CodeTreeError("embeddings contain non-finite values")
    if branch_k < 2:
        raise CodeTreeError("branch_k must be >= 2")
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms == 0, 1.0, norms)
    n = x.shape[0]
    depth = code_depth(n, branch_k)
    codes = np.zeros((n, depth), dtype=np.int64)
    centroids: Dict[Tuple[int, ...], np.ndarray] = {}
    node_sizes: Dict[Tuple[int, ...], List[int]] = {}

    stack = [((), np.arange(n))]
    while stack:
        path, items = stack.pop()
        if len(items) == 1 or len(path) == depth:
            continue
        k = min(branch_k, len(items))
        groups, cents = _split(x, items, k, _node_rng(seed, path))
        centroids[path] = cents
        node_sizes[path] = [len(g) for g in groups]
        for digit, group in enumerate(groups):
            codes[group, len(path)] = digit
            stack.append((path + (digit,), group))
    return CodeTree(branch_k, depth, codes, seed, stream_tag, centroids, node_sizes)


def sample_replacement(tree: CodeTree, code: Sequence[int], positions: Sequence[int],
                       rng: np.random.Generator) -> List[int]:
    """Corrupt ``code`` at ``positions`` with different same-level digits.

    A replacement is drawn from digits that keep the corrupted prefix inside
    the trie when such digits exist, otherwise from the whole level alphabet.
    """
    if tree.branch_k < 2:
        raise CodeTreeError("cannot corrupt a code when each level has a single digit")
    out = [int(d) for d in code]
    targets = set(int(p) for p in positions)
    for j in range(tree.depth):
        if j not in targets:
            continue
        orig = out[j]
        valid = [int(d) for d in tree.valid_next_digits(out[:j]) if d != orig]
        if valid:
            out[j] = valid[int(rng.integers(len(valid)))]
        else:
            pick = int(rng.integers(tree.branch_k - 1))
            out[j] = pick + (pick >= orig)
    return out


def save_code_tree(tree: CodeTree, path) -> None:
    tag = tree.stream_tag or "-"
    lines = [f"{tree.num_items} {tree.branch_k} {tree.depth} {tag} {tree.seed}\n"]
    lines += [f"{i} {' '.join(map(str, row))}\n" for i, row in enumerate(tree.codes.tolist())]
    Path(path).write_text("".join(lines))


def load_code_tree(path) -> CodeTree:
    lines = Path(path).read_text().splitlines()
    n, branch_k, depth, tag, seed = lines[0].split()
    n, branch_k, depth = int(n), int(branch_k), int(depth)
    codes = np.zeros((n, depth), dtype=np.int64)
    seen = set()
    for line in lines[1:]:
        fields = [int(t) for t in line.split()]
        if len(fields) != depth + 1:
            raise CodeTreeError(f"{path}: bad code line {line!r}")
        codes[fields[0]] = fields[1:]
        seen.add(fields[0])
    if len(seen) != n:
        raise CodeTreeError(f"{path}: expected {n} items, found {len(seen)}")
    return CodeTree(branch_k, depth, codes, int(seed), "" if tag == "-" else tag)

