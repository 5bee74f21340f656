"""Frozen item embedding providers: file loading, co-occurrence PPMI-SVD, hashed TF-IDF-SVD."""

from __future__ import annotations

import logging
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh, svds

logger = logging.getLogger(__name__)

# Dense SVD below this size; ARPACK above.
DENSE_SVD_LIMIT = 2500
NOISE_SCALE = 1e-3


class EmbeddingError(ValueError):
    pass


@dataclass
class EmbeddingMatrix:
    matrix: np.ndarray
    source_tag: str = "file"

    def __post_init__(self):
        m = np.asarray(self.matrix)
        if m.ndim != 2:
            raise EmbeddingError(f"embedding matrix must be 2-D, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise EmbeddingError("embedding matrix has non-finite entries")
        if m.shape[0] and np.any(np.linalg.norm(m, axis=1) == 0):
            raise EmbeddingError("embedding matrix has zero rows")
        self.matrix = m

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def save_embeddings(emb: EmbeddingMatrix, path) -> None:
    """Write ``N d`` header then rows; ``.bin`` stores little-endian f32, anything else text."""
    path = Path(path)
    m = emb.matrix
    header = f"{m.shape[0]} {m.shape[1]}\n".encode()
    if path.suffix == ".bin":
        path.write_bytes(header + np.ascontiguousarray(m, dtype="<f4").tobytes())
    else:
        rows = (" ".join(repr(float(v)) for v in row) for row in m)
        path.write_text(header.decode() + "".join(r + "\n" for r in rows))


def load_embeddings(path, expected_n: int, source_tag: str = "file") -> EmbeddingMatrix:
    path = Path(path)
    if path.suffix == ".bin":
        raw = path.read_bytes()
        nl = raw.index(b"\n")
        n, d = map(int, raw[:nl].split())
        body = raw[nl + 1:]
        if len(body) != n * d * 4:
            raise EmbeddingError(f"{path}: expected {n * d * 4} payload bytes, found {len(body)}")
        matrix = np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float32)
    else:
        lines = path.read_text().splitlines()
        n, d = map(int, lines[0].split())
        rows = [line.split() for line in lines[1:] if line.strip()]
        if len(rows) != n or any(len(r) != d for r in rows):
            raise EmbeddingError(f"{path}: header says {n}x{d} but body does not match")
        matrix = np.array(rows, dtype=np.float64).reshape(n, d)
    if n != expected_n:
        raise EmbeddingError(f"{path}: file has {n} rows, dataset has {expected_n} items")
    return EmbeddingMatrix(matrix, source_tag)


def truncated_svd(matrix, d: int, seed: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-``d`` singular triplets, descending, with each left vector's largest entry made positive."""
    n = min(matrix.shape)
    if d > n:
        raise EmbeddingError(f"requested rank {d} exceeds matrix rank bound {n}")
    if n <= DENSE_SVD_LIMIT or d >= n - 1:
        dense = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix)
        u, s, vt = np.linalg.svd(dense, full_matrices=False)
        u, s, vt = u[:, :d], s[:d], vt[:d]
    else:
        v0 = np.random.default_rng(seed).standard_normal(min(matrix.shape))
        u, s, vt = svds(sp.csr_matrix(matrix, dtype=np.float64), k=d, v0=v0)
        order = np.argsort(-s, kind="stable")
        u, s, vt = u[:, order], s[order], vt[order]
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivot, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, s, vt * signs[:, None]


def truncated_eigh(matrix, d: int, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Top-``d`` eigenpairs (largest algebraic first) of a symmetric matrix, signs fixed as above."""
    n = matrix.shape[0]
    if d > n:
        raise EmbeddingError(f"requested rank {d} exceeds matrix size {n}")
    if n <= DENSE_SVD_LIMIT or d >= n - 1:
        dense = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix)
        lam, q = np.linalg.eigh(dense)
    else:
        v0 = np.random.default_rng(seed).standard_normal(n)
        lam, q = eigsh(sp.csr_matrix(matrix, dtype=np.float64), k=d, which="LA", v0=v0)
    order = np.argsort(-lam, kind="stable")[:d]
    lam, q = lam[order], q[:, order]
    pivot = np.argmax(np.abs(q), axis=0)
    signs = np.sign(q[pivot, np.arange(q.shape[1])])
    signs[signs == 0] = 1.0
    return lam, q * signs


def _noise_fill(matrix: np.ndarray, seed: int, what: str) -> np.ndarray:
    zero = np.flatnonzero(np.linalg.norm(matrix, axis=1) == 0)
    if zero.size:
        logger.warning("%d %s item(s) have no signal; filling with deterministic noise", zero.size, what)
        rng = np.random.default_rng([seed, 0x5EED])
        noise = rng.standard_normal((matrix.shape[0], matrix.shape[1])) * NOISE_SCALE
        matrix = matrix.copy()
        matrix[zero] = noise[zero]
    return matrix


def ppmi_matrix(sequences: Sequence[Sequence[int]], num_items: int, window: int) -> sp.csr_matrix:
    """Symmetric positive PMI over items co-occurring within ``window`` positions.

    Marginals carry add-one smoothing; only observed pairs get a PMI value.
    """
    if window < 1:
        raise EmbeddingError("window must be >= 1")
    rows: List[int] = []
    cols: List[int] = []
    for seq in sequences:
        seq = list(seq)
        for p, a in enumerate(seq):
            for b in seq[p + 1:p + 1 + window]:
                if a != b:
                    rows += (a, b)
                    cols += (b, a)
    counts = sp.coo_matrix(
        (np.ones(len(rows)), (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64))),
        shape=(num_items, num_items),
    ).tocsr()
    counts.sum_duplicates()
    total = counts.sum()
    if total == 0:
        return sp.csr_matrix((num_items, num_items))
    marg = np.asarray(counts.sum(axis=1)).ravel() + 1.0
    coo = counts.tocoo()
    pmi = np.log(coo.data * total / (marg[coo.row] * marg[coo.col]))
    keep = pmi > 0
    out = sp.coo_matrix((pmi[keep], (coo.row[keep], coo.col[keep])), shape=counts.shape).tocsr()
    out.sort_indices()
    return out


def cooccurrence_behavior_embeddings(
    sequences: Sequence[Sequence[int]],
    num_items: int,
    d: int = 128,
    window: int = 3,
    seed: int = 0,
) -> EmbeddingMatrix:
    """Rows of Q sqrt(max(lambda, 0)) over the top-``d`` eigenpairs of the PPMI matrix.

    Dot products then approximate the positive part of PPMI itself, so items
    that co-occur directly end up close even without shared neighbours.
    """
    if d > num_items:
        raise EmbeddingError(f"dimension {d} exceeds item count {num_items}")
    ppmi = ppmi_matrix(sequences, num_items, window)
    lam, q = truncated_eigh(ppmi, d, seed)
    matrix = _noise_fill(q * np.sqrt(np.maximum(lam, 0.0)), seed, "isolated")
    return EmbeddingMatrix(matrix, "cooc-svd")


_TOKEN = re.compile(r"\w+", re.UNICODE)


def tfidf_matrix(texts: Sequence[str], n_features: int = 1 << 18) -> sp.csr_matrix:
    """Hashed-vocabulary TF-IDF with smooth idf and L2-normalised rows."""
    rows, cols, vals = [], [], []
    for r, text in enumerate(texts):
        counts = {}
        for tok in _TOKEN.findall((text or "").lower()):
            h = zlib.crc32(tok.encode("utf-8")) % n_features
            counts[h] = counts.get(h, 0) + 1
        for h in sorted(counts):
            rows.append(r)
            cols.append(h)
            vals.append(float(counts[h]))
    tf = sp.csr_matrix((vals, (rows, cols)), shape=(len(texts), n_features))
    df = np.bincount(tf.indices, minlength=n_features)
    idf = np.log((1.0 + len(texts)) / (1.0 + df)) + 1.0
    tfidf = tf.multiply(idf[None, :]).tocsr()
    norms = np.sqrt(np.asarray(tfidf.multiply(tfidf).sum(axis=1)).ravel())
    norms[norms == 0] = 1.0
    return sp.csr_matrix(sp.diags(1.0 / norms) @ tfidf)


def text_semantic_embeddings(item_texts: Sequence[str], d: int = 128, seed: int = 0) -> EmbeddingMatrix:
    if not any((t or "").strip() for t in item_texts):
        raise EmbeddingError("every item text is empty")
    tfidf = tfidf_matrix(item_texts)
    if d > len(item_texts):
        raise EmbeddingError(f"dimension {d} exceeds item count {len(item_texts)}")
    # Only the used columns matter; compacting keeps the dense path cheap.
    used = np.unique(tfidf.indices)
    compact = tfidf[:, used]
    rank = min(d, compact.shape[1])
    _, _, vt = truncated_svd(compact, rank, seed)
    # U S = A V; projecting each distinct row once keeps identical texts bit-identical.
    keys = [(tuple(compact.indices[compact.indptr[r]:compact.indptr[r + 1]]),
             tuple(compact.data[compact.indptr[r]:compact.indptr[r + 1]])) for r in range(compact.shape[0])]
    first = {}
    for r, key in enumerate(keys):
        first.setdefault(key, r)
    reps = np.array(sorted(first.values()))
    projected = np.asarray(compact[reps] @ vt.T)
    row_of = {r: i for i, r in enumerate(reps)}
    matrix = np.zeros((len(item_texts), d))
    matrix[:, :rank] = projected[[row_of[first[key]] for key in keys]]
    matrix = _noise_fill(matrix, seed, "empty-text")
    return EmbeddingMatrix(matrix, "text-svd")


def load_item_texts(path, item_ids: Sequence[str]) -> List[str]:
    """Read ``item_id<TAB>text`` lines; items without a line get an empty text."""
    texts = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        item, _, text = line.partition("\t")
        texts[item] = text
    return [texts.get(item, "") for item in item_ids]
