"""Interaction ingestion, k-core filtering and leave-one-out splitting."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple


class CorpusError(ValueError):
    pass


class EmptyDatasetError(CorpusError):
    pass


class ParseError(CorpusError):
    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class Dataset:
    user_ids: List[str]
    sequences: List[List[int]]
    item_ids: List[str]
    num_interactions: int = 0

    def __post_init__(self):
        self.item_index = {item: i for i, item in enumerate(self.item_ids)}

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def stats(self) -> dict:
        return {
            "num_users": self.num_users,
            "num_items": self.num_items,
            "num_interactions": self.num_interactions,
        }


@dataclass
class UserSplit:
    user_id: str
    train_seq: List[int]
    valid_target: int
    test_target: int


@dataclass
class Split:
    users: List[UserSplit]
    num_items: int
    excluded: int = 0

    def histories(self, target_field: str = "test", max_history: int = 20) -> List[List[int]]:
        if target_field not in ("valid", "test"):
            raise ValueError(f"target_field must be 'valid' or 'test', got {target_field!r}")
        out = []
        for u in self.users:
            seq = list(u.train_seq)
            if target_field == "test":
                seq.append(u.valid_target)
            out.append(seq[-max_history:])
        return out

    def targets(self, target_field: str = "test") -> List[int]:
        if target_field == "valid":
            return [u.valid_target for u in self.users]
        if target_field == "test":
            return [u.test_target for u in self.users]
        raise ValueError(f"target_field must be 'valid' or 'test', got {target_field!r}")


@dataclass(frozen=True)
class TrainingExample:
    history: Tuple[int, ...]
    target: int
    user: int = field(default=-1, compare=False)


def load_interactions(path, delimiter: str = ",", columns: Sequence[int] = (0, 1, 2)) -> List[Interaction]:
    """Parse a delimited interaction log.

    ``columns`` gives the zero-based positions of the user, item and timestamp
    fields, so logs with extra fields (ratings etc.) can be read directly.
    Exact duplicate rows are dropped; the first occurrence keeps its place.
    """
    path = Path(path)
    u_col, i_col, t_col = columns
    need = max(columns) + 1
    seen = set()
    rows: List[Interaction] = []
    with path.open(newline="", encoding="utf-8") as fh:
        for line_no, row in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < need:
                raise ParseError(path, line_no, f"expected at least {need} fields, got {len(row)}")
            user, item, ts = row[u_col].strip(), row[i_col].strip(), row[t_col].strip()
            if not user or not item:
                raise ParseError(path, line_no, "empty user or item id")
            try:
                timestamp = int(ts)
            except ValueError:
                try:
                    as_float = float(ts)
                except ValueError:
                    raise ParseError(path, line_no, f"bad timestamp {ts!r}") from None
                if not as_float.is_integer():
                    raise ParseError(path, line_no, f"non-integer timestamp {ts!r}")
                timestamp = int(as_float)
            rec = Interaction(user, item, timestamp)
            if rec in seen:
                continue
            seen.add(rec)
            rows.append(rec)
    if not rows:
        raise EmptyDatasetError(f"{path}: no interactions")
    return rows


def k_core_filter(interactions: Iterable[Interaction], k: int = 5) -> Dataset:
    """Drop users and items with fewer than ``k`` interactions until nothing changes.

    Users keep their first-appearance order; items get dense indices in the
    order they first appear in the surviving log. Sequences are sorted by
    timestamp, ties keeping input order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rows = list(interactions)
    while True:
        user_deg = Counter(r.user_id for r in rows)
        item_deg = Counter(r.item_id for r in rows)
        kept = [r for r in rows if user_deg[r.user_id] >= k and item_deg[r.item_id] >= k]
        if len(kept) == len(rows):
            break
        rows = kept
    if not rows:
        raise EmptyDatasetError(f"{k}-core filtering removed every interaction")

    item_ids: List[str] = []
    item_index = {}
    user_rows = {}
    for r in rows:
        if r.item_id not in item_index:
            item_index[r.item_id] = len(item_ids)
            item_ids.append(r.item_id)
        user_rows.setdefault(r.user_id, []).append(r)

    user_ids = list(user_rows)
    sequences = []
    for user in user_ids:
        ordered = sorted(user_rows[user], key=lambda r: r.timestamp)  # stable
        sequences.append([item_index[r.item_id] for r in ordered])
    return Dataset(user_ids=user_ids, sequences=sequences, item_ids=item_ids, num_interactions=len(rows))


def leave_one_out_split(dataset: Dataset) -> Split:
    users = []
    excluded = 0
    for user_id, seq in zip(dataset.user_ids, dataset.sequences):
        if len(seq) < 3:
            excluded += 1
            continue
        users.append(UserSplit(user_id, list(seq[:-2]), seq[-2], seq[-1]))
    return Split(users=users, num_items=dataset.num_items, excluded=excluded)


def make_training_examples(split: Split, max_history: int = 20) -> List[TrainingExample]:
    examples = []
    for u_idx, user in enumerate(split.users):
        seq = user.train_seq
        for p in range(1, len(seq)):
            examples.append(TrainingExample(tuple(seq[max(0, p - max_history):p]), seq[p], u_idx))
    return examples


# -- serialization ----------------------------------------------------------

def save_dataset(dataset: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "manifest.json").write_text(json.dumps(dataset.stats(), indent=2, sort_keys=True) + "\n")
    (d / "vocab.txt").write_text("".join(f"{item}\n" for item in dataset.item_ids))
    (d / "users.txt").write_text("".join(f"{user}\n" for user in dataset.user_ids))
    (d / "sequences.txt").write_text("".join(" ".join(map(str, s)) + "\n" for s in dataset.sequences))


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    item_ids = (d / "vocab.txt").read_text().splitlines()
    user_ids = (d / "users.txt").read_text().splitlines()
    sequences = [[int(t) for t in line.split()] for line in (d / "sequences.txt").read_text().splitlines()]
    ds = Dataset(user_ids, sequences, item_ids, manifest["num_interactions"])
    if ds.num_items != manifest["num_items"] or ds.num_users != manifest["num_users"]:
        raise CorpusError(f"{d}: manifest counts disagree with vocab/users files")
    return ds


def save_split(split: Split, path) -> None:
    lines = [f"# num_items={split.num_items} excluded={split.excluded}\n"]
    for u in split.users:
        lines.append(f"{u.user_id}\t{' '.join(map(str, u.train_seq))}\t{u.valid_target}\t{u.test_target}\n")
    Path(path).write_text("".join(lines))


def load_split(path) -> Split:
    lines = Path(path).read_text().splitlines()
    header = dict(kv.split("=") for kv in lines[0].lstrip("# ").split())
    users = []
    for line in lines[1:]:
        user_id, train, valid, test = line.split("\t")
        users.append(UserSplit(user_id, [int(t) for t in train.split()], int(valid), int(test)))
    return Split(users, int(header["num_items"]), int(header["excluded"]))


def training_sequences(dataset: Dataset) -> List[List[int]]:
    """Per-user sequences with valid/test items held out (short users kept whole)."""
    return [list(s[:-2]) if len(s) >= 3 else list(s) for s in dataset.sequences]
