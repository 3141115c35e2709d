"""Embedding fusion, exact kNN search, and recall evaluation.

The index holds one image embedding and one text embedding per product;
a fused vector is the weighted sum w * image + (1 - w) * text scaled
back to unit norm. Search is exact (full dot-product scan) with a total
order: score descending, then product id ascending, so ties never
reorder between runs.

Evaluation embeds a corpus once, then sweeps a grid of (query weight,
index weight) pairs, scoring recall@1/5/10 per cell. The best cell
maximizes recall@1, breaking ties by recall@5, recall@10, then the
lexicographically smallest weight pair.

Embedding files are a flat binary: magic "MIME", u16 version, u32 dim,
u64 count, then count records of u64 id + dim float32 values, all
little-endian.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (ConfigError, ContractError, DataError,
                     DegenerateInputError, FormatError, ValidationError)
from .synthdata import Corpus
from .towers import TowerParams, embed_images, embed_texts, load_checkpoint

EMBEDDING_MAGIC = b"MIME"
EMBEDDING_VERSION = 1


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])

# Fused vectors shorter than this have no meaningful direction (the two
# inputs nearly cancel); refusing them beats returning noise.
DEGENERATE_FUSED_NORM = 1e-6

_UNIT_TOL = 1e-4

RECALL_KS = (1, 5, 10)

TASKS = ("image_to_image", "image_to_multimodal", "multimodal")

DEFAULT_INDEX_WEIGHT = 0.5
DEFAULT_QUERY_GRID = tuple(round(0.05 * i, 2) for i in range(21))


def _check_unit_rows(mat: np.ndarray, what: str) -> None:
    if mat.size == 0:
        return
    dev = np.abs(np.linalg.norm(mat, axis=1) - 1.0).max()
    if dev > _UNIT_TOL:
        raise ContractError(f"{what} rows are not unit-norm (max deviation {dev:.2e})")


def fuse_rows(image: np.ndarray, text: np.ndarray, weight: float,
              ids=None) -> np.ndarray:
    """Blend unit-norm image and text rows at the given image weight.

    weight 1 returns the image rows untouched and 0 the text rows, so a
    pure-image pipeline is bit-identical whether or not it goes through
    fusion. Interior weights re-normalize; a blend that cancels to ~zero
    norm raises, naming the offending row or id.
    """
    if not (0.0 <= weight <= 1.0):
        raise ValidationError(f"fusion weight must be in [0, 1], got {weight}")
    image = np.asarray(image)
    text = np.asarray(text)
    if image.shape != text.shape or image.ndim != 2:
        raise ContractError(
            f"fusion needs matching 2-D inputs, got {image.shape} and {text.shape}")
    _check_unit_rows(image, "image")
    _check_unit_rows(text, "text")
    if weight == 1.0:
        return image.copy()
    if weight == 0.0:
        return text.copy()
    blend = weight * image.astype(np.float64) + (1.0 - weight) * text.astype(np.float64)
    norms = np.linalg.norm(blend, axis=1, keepdims=True)
    if norms.size and norms.min() < DEGENERATE_FUSED_NORM:
        row = int(np.argmin(norms))
        label = f"id {ids[row]}" if ids is not None else f"row {row}"
        raise DegenerateInputError(
            f"fused vector for {label} has norm {float(norms[row, 0]):.2e}; "
            f"image and text embeddings cancel at weight {weight}")
    return (blend / norms).astype(image.dtype)


def fuse_one(image: np.ndarray, text: np.ndarray, weight: float) -> np.ndarray:
    """fuse_rows for a single pair of vectors."""
    return fuse_rows(image[None, :], text[None, :], weight)[0]


@dataclass
class SearchIndex:
    """Product ids with aligned image/text embeddings, fused at one weight."""
    product_ids: np.ndarray
    image: np.ndarray
    text: np.ndarray
    index_weight: float
    fused: np.ndarray

    @property
    def size(self) -> int:
        return int(self.product_ids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.fused.shape[1])

    def row_of(self, product_id: int) -> int | None:
        rows = np.flatnonzero(self.product_ids == product_id)
        return int(rows[0]) if rows.size else None


def build_index(product_ids, image: np.ndarray, text: np.ndarray,
                index_weight: float = DEFAULT_INDEX_WEIGHT) -> SearchIndex:
    """Fuse per-product embeddings into a searchable index."""
    ids = np.asarray(product_ids, dtype=np.int64)
    image = np.asarray(image, dtype=np.float32)
    text = np.asarray(text, dtype=np.float32)
    if ids.ndim != 1 or image.shape[0] != ids.shape[0] or text.shape[0] != ids.shape[0]:
        raise ContractError(
            f"ids/image/text row counts differ: {ids.shape[0]}, "
            f"{image.shape[0]}, {text.shape[0]}")
    if ids.size != np.unique(ids).size:
        values, counts = np.unique(ids, return_counts=True)
        raise DataError(f"duplicate product id {int(values[counts > 1][0])} in index")
    fused = fuse_rows(image, text, index_weight, ids=ids)
    return SearchIndex(product_ids=ids, image=image, text=text,
                       index_weight=index_weight, fused=fused)


@dataclass
class SearchHit:
    product_id: int
    score: float


def search(index: SearchIndex, query: np.ndarray, k: int) -> list[SearchHit]:
    """Exact top-k by cosine (dot product of unit vectors).

    Ordering is total: score descending, product id ascending on ties.
    Returns fewer than k hits only when the index is smaller than k.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    query = np.asarray(query)
    if query.shape != (index.dim,):
        raise ContractError(f"query shape {query.shape} does not match index dim {index.dim}")
    if index.size == 0:
        return []
    scores = index.fused @ query.astype(index.fused.dtype)
    order = np.lexsort((index.product_ids, -scores))[:k]
    return [SearchHit(product_id=int(index.product_ids[i]), score=float(scores[i]))
            for i in order]


def _ranks_of_truth(fused_index: np.ndarray, index_ids: np.ndarray,
                    queries: np.ndarray, truth_ids: np.ndarray,
                    chunk: int = 512) -> np.ndarray:
    """Rank (1-based) of each query's true product under the search order."""
    row_by_id = {int(pid): i for i, pid in enumerate(index_ids)}
    truth_rows = np.array([row_by_id[int(t)] for t in truth_ids], dtype=np.int64)
    ranks = np.empty(queries.shape[0], dtype=np.int64)
    for start in range(0, queries.shape[0], chunk):
        stop = min(start + chunk, queries.shape[0])
        scores = queries[start:stop] @ fused_index.T
        rows = np.arange(stop - start)
        truth_scores = scores[rows, truth_rows[start:stop]]
        stronger = (scores > truth_scores[:, None]).sum(axis=1)
        tied_earlier = ((scores == truth_scores[:, None])
                        & (index_ids[None, :] < truth_ids[start:stop, None])).sum(axis=1)
        ranks[start:stop] = stronger + tied_earlier + 1
    return ranks


@dataclass
class GridCell:
    query_weight: float
    index_weight: float
    recall: dict[int, float]

    def to_dict(self) -> dict:
        return {"query_weight": self.query_weight,
                "index_weight": self.index_weight,
                "recall": {str(k): v for k, v in self.recall.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "GridCell":
        return cls(query_weight=float(d["query_weight"]),
                   index_weight=float(d["index_weight"]),
                   recall={int(k): float(v) for k, v in d["recall"].items()})


@dataclass
class EvalReport:
    task: str
    query_count: int
    index_size: int
    cells: list[GridCell]
    best: GridCell

    def to_dict(self) -> dict:
        return {"task": self.task, "query_count": self.query_count,
                "index_size": self.index_size,
                "cells": [c.to_dict() for c in self.cells],
                "best": self.best.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(task=d["task"], query_count=int(d["query_count"]),
                   index_size=int(d["index_size"]),
                   cells=[GridCell.from_dict(c) for c in d["cells"]],
                   best=GridCell.from_dict(d["best"]))


def _pick_best(cells: list[GridCell]) -> GridCell:
    def key(c: GridCell):
        return (-c.recall[1], -c.recall[5], -c.recall[10], c.query_weight, c.index_weight)
    return min(cells, key=key)


def resolve_grid(task: str, query_weights=None, index_weights=None) -> list[tuple[float, float]]:
    """Expand task defaults into explicit (query_weight, index_weight) cells."""
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    if task == "image_to_image":
        if query_weights or index_weights:
            raise ConfigError("image_to_image admits no weight grid: both sides "
                              "are pure image embeddings")
        return [(1.0, 1.0)]
    iw = [float(w) for w in (index_weights if index_weights is not None
                             else [DEFAULT_INDEX_WEIGHT])]
    if task == "image_to_multimodal":
        if query_weights:
            raise ConfigError("image_to_multimodal fixes query_weight at 1.0; "
                              "only index weights vary")
        qw = [1.0]
    else:
        qw = [float(w) for w in (query_weights if query_weights is not None
                                 else DEFAULT_QUERY_GRID)]
    for w in list(qw) + list(iw):
        if not (0.0 <= w <= 1.0):
            raise ConfigError(f"grid weight {w} outside [0, 1]")
    return [(q, i) for i in iw for q in qw]


@dataclass
class CorpusEmbeddings:
    """Everything evaluate() needs, embedded once per (model, corpus)."""
    product_ids: np.ndarray
    catalog_image: np.ndarray
    product_text: np.ndarray
    query_ids: np.ndarray
    query_truth: np.ndarray
    query_image: np.ndarray
    query_text: np.ndarray


def embed_corpus(tp: TowerParams, corpus: Corpus) -> CorpusEmbeddings:
    """Embed all products (including distractors) and all queries."""
    products = corpus.index_products()
    if not products:
        raise DataError("corpus has no products to index")
    if not corpus.queries:
        raise DataError("corpus has no queries to evaluate")
    pids = np.array([p.product_id for p in products], dtype=np.int64)
    catalog = embed_images(tp, np.stack([p.catalog_image_features for p in products]),
                           "catalog")
    ptext = embed_texts(tp, [p.product_text_tokens for p in products], "product")
    qids = np.array([q.query_id for q in corpus.queries], dtype=np.int64)
    truth = np.array([q.product_id for q in corpus.queries], dtype=np.int64)
    qimage = embed_images(tp, np.stack([q.query_image_features for q in corpus.queries]),
                          "query")
    qtext = embed_texts(tp, [q.query_text_tokens for q in corpus.queries], "query")
    return CorpusEmbeddings(product_ids=pids, catalog_image=catalog, product_text=ptext,
                            query_ids=qids, query_truth=truth,
                            query_image=qimage, query_text=qtext)


def evaluate_embedded(emb: CorpusEmbeddings, task: str,
                      grid: list[tuple[float, float]]) -> EvalReport:
    """Score recall@k over the grid using precomputed embeddings."""
    cells: list[GridCell] = []
    for index_weight in sorted({iw for _, iw in grid}):
        fused_index = fuse_rows(emb.catalog_image, emb.product_text, index_weight,
                                ids=emb.product_ids)
        for query_weight, iw in grid:
            if iw != index_weight:
                continue
            fused_q = fuse_rows(emb.query_image, emb.query_text, query_weight,
                                ids=emb.query_ids)
            ranks = _ranks_of_truth(fused_index, emb.product_ids, fused_q, emb.query_truth)
            recall = {k: float((ranks <= k).mean()) for k in RECALL_KS}
            cells.append(GridCell(query_weight=query_weight, index_weight=iw,
                                  recall=recall))
    cells.sort(key=lambda c: (c.index_weight, c.query_weight))
    return EvalReport(task=task, query_count=int(emb.query_ids.shape[0]),
                      index_size=int(emb.product_ids.shape[0]),
                      cells=cells, best=_pick_best(cells))


def evaluate(model, corpus: Corpus, task: str,
             query_weights=None, index_weights=None) -> EvalReport:
    """End-to-end evaluation of a TowerParams or checkpoint path."""
    tp = model if isinstance(model, TowerParams) else load_checkpoint(model)
    grid = resolve_grid(task, query_weights, index_weights)
    return evaluate_embedded(embed_corpus(tp, corpus), task, grid)


def write_embedding_file(path, ids, vectors: np.ndarray) -> None:
    """Write aligned ids and float32 vectors in the flat binary layout."""
    ids = np.asarray(ids, dtype=np.int64)
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or ids.shape[0] != vectors.shape[0]:
        raise ContractError(
            f"ids {ids.shape} and vectors {vectors.shape} do not align")
    if np.any(ids < 0):
        raise ContractError("embedding ids must be non-negative")
    dim = vectors.shape[1]
    records = np.empty(vectors.shape[0], dtype=_record_dtype(dim))
    records["id"] = ids.astype(np.uint64)
    records["vec"] = vectors
    buf = io.BytesIO()
    buf.write(EMBEDDING_MAGIC)
    buf.write(struct.pack("<H", EMBEDDING_VERSION))
    buf.write(struct.pack("<I", dim))
    buf.write(struct.pack("<Q", vectors.shape[0]))
    buf.write(records.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_embedding_file(path, expected_dim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Read an embedding file back as (ids int64, vectors float32)."""
    path = Path(path)
    blob = path.read_bytes()
    header = struct.calcsize("<4sHIQ")
    if len(blob) < header:
        raise FormatError(f"{path}: too short for an embedding header")
    magic, version, dim, count = struct.unpack_from("<4sHIQ", blob)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
    if version != EMBEDDING_VERSION:
        raise FormatError(f"{path}: unsupported version {version}, "
                          f"expected {EMBEDDING_VERSION}")
    if expected_dim is not None and dim != expected_dim:
        raise FormatError(f"{path}: dim {dim} does not match expected {expected_dim}")
    record = 8 + 4 * dim
    if len(blob) != header + count * record:
        raise FormatError(
            f"{path}: size {len(blob)} does not match header "
            f"(expected {header + count * record} for {count} records of dim {dim})")
    records = np.frombuffer(blob, dtype=_record_dtype(dim), count=count, offset=header)
    ids = records["id"].astype(np.int64)
    vectors = np.ascontiguousarray(records["vec"]).astype(np.float32)
    return ids, vectors


EMBEDDING_FILES = {
    "catalog_image": "catalog_image.emb",
    "product_text": "product_text.emb",
    "query_image": "query_image.emb",
    "query_text": "query_text.emb",
}


def export_embeddings(model, corpus: Corpus, out_dir) -> dict[str, Path]:
    """Embed a corpus and write the four standard embedding files."""
    tp = model if isinstance(model, TowerParams) else load_checkpoint(model)
    emb = embed_corpus(tp, corpus)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    tables = {
        "catalog_image": (emb.product_ids, emb.catalog_image),
        "product_text": (emb.product_ids, emb.product_text),
        "query_image": (emb.query_ids, emb.query_image),
        "query_text": (emb.query_ids, emb.query_text),
    }
    for name, (ids, vectors) in tables.items():
        path = out / EMBEDDING_FILES[name]
        write_embedding_file(path, ids, vectors)
        paths[name] = path
    return paths
