"""HTTP search service over a trained checkpoint and exported embeddings.

The service is read-only: it loads every artifact at startup (failing
fast with the offending path), fuses the product index at one fixed
index weight, and then answers searches. Query images arrive either as
a corpus query id (served from the exported embedding file) or as an
inline feature vector (encoded on the fly); optional query text is
fused at a per-request weight.

Errors use one JSON shape: {"error": {"code": ..., "message": ...}}
with codes not_found, validation_error, parse_error, degenerate_fusion.

In evaluation mode the service also reveals ground-truth product ids so
a client can show whether a search found the right product. Leave it
off for blind demos.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .errors import DataError, DegenerateInputError, FormatError, ServiceError, ValidationError
from .retrieval import (EMBEDDING_FILES, SearchIndex, build_index, fuse_one,
                        read_embedding_file, search)
from .synthdata import Corpus, ProductRecord, read_corpus, text_to_tokens, token_to_word
from .towers import TowerParams, embed_images, embed_texts, load_checkpoint

DEFAULT_K = 10
MAX_PAGE = 200


@dataclass(frozen=True)
class ServiceConfig:
    checkpoint: Path
    corpus_dir: Path
    embeddings_dir: Path
    index_weight: float = 0.5
    default_query_weight: float = 0.5
    default_k: int = DEFAULT_K
    evaluation_mode: bool = False

    def __post_init__(self):
        if not (0.0 <= self.index_weight <= 1.0):
            raise ValidationError(f"index_weight must be in [0, 1], got {self.index_weight}")
        if not (0.0 <= self.default_query_weight <= 1.0):
            raise ValidationError(
                f"default_query_weight must be in [0, 1], got {self.default_query_weight}")
        if self.default_k < 1:
            raise ValidationError(f"default_k must be >= 1, got {self.default_k}")


@dataclass
class ServiceState:
    """Everything loaded once at startup."""
    config: ServiceConfig
    tp: TowerParams
    corpus: Corpus
    products: dict[int, ProductRecord]
    distractor_ids: set[int]
    index: SearchIndex
    query_rows: dict[int, int]
    query_image: np.ndarray
    truth_by_query: dict[int, int]


def load_service_state(config: ServiceConfig) -> ServiceState:
    """Load and cross-validate all artifacts; raises on the first bad one."""
    tp = load_checkpoint(config.checkpoint)
    corpus = read_corpus(config.corpus_dir)
    emb_dir = Path(config.embeddings_dir)
    embed_dim = tp.config.embed_dim

    def load(name: str):
        path = emb_dir / EMBEDDING_FILES[name]
        if not path.is_file():
            raise FileNotFoundError(f"embedding file missing: {path}")
        return read_embedding_file(path, expected_dim=embed_dim)

    catalog_ids, catalog_vecs = load("catalog_image")
    text_ids, text_vecs = load("product_text")
    query_ids, query_vecs = load("query_image")

    if not np.array_equal(catalog_ids, text_ids):
        raise DataError("catalog_image and product_text files disagree on product ids")
    corpus_pids = [p.product_id for p in corpus.index_products()]
    if sorted(catalog_ids.tolist()) != sorted(corpus_pids):
        raise DataError("embedding files do not cover the corpus product ids")
    corpus_qids = sorted(q.query_id for q in corpus.queries)
    if sorted(query_ids.tolist()) != corpus_qids:
        raise DataError("query_image embeddings do not cover the corpus query ids")

    index = build_index(catalog_ids, catalog_vecs, text_vecs, config.index_weight)
    return ServiceState(
        config=config,
        tp=tp,
        corpus=corpus,
        products={p.product_id: p for p in corpus.index_products()},
        distractor_ids=corpus.distractor_ids(),
        index=index,
        query_rows={int(q): i for i, q in enumerate(query_ids)},
        query_image=query_vecs,
        truth_by_query={q.query_id: q.product_id for q in corpus.queries},
    )


def _expect(condition: bool, message: str, code: str = "validation_error",
            status: int = 400) -> None:
    if not condition:
        raise ServiceError(code, message, status)


def _as_int(value, what: str) -> int:
    _expect(isinstance(value, int) and not isinstance(value, bool),
            f"{what} must be an integer, got {value!r}")
    return value


def _resolve_query_tokens(state: ServiceState, raw) -> list[int] | None:
    """Normalize the query_text field: string, token list, or absent."""
    if raw is None:
        return None
    cfg = state.corpus.config
    if isinstance(raw, str):
        tokens = text_to_tokens(cfg, raw)
        return tokens or None
    _expect(isinstance(raw, list), "query_text must be a string or a list of token ids")
    if not raw:
        return None
    vocab = state.tp.config.vocab_size
    for pos, t in enumerate(raw):
        _expect(isinstance(t, int) and not isinstance(t, bool)
                and 0 <= t < vocab,
                f"query_text token at position {pos} is {t!r}, "
                f"expected an integer in [0, {vocab})")
    return list(raw)


def _resolve_query_image(state: ServiceState, body: dict) -> np.ndarray:
    qid = body.get("query_image_id")
    feats = body.get("query_image_features")
    _expect((qid is None) != (feats is None),
            "exactly one of query_image_id and query_image_features is required")
    if qid is not None:
        qid = _as_int(qid, "query_image_id")
        row = state.query_rows.get(qid)
        if row is None:
            raise ServiceError("not_found", f"unknown query id {qid}", status=404)
        return state.query_image[row]
    _expect(isinstance(feats, list) and all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in feats),
        "query_image_features must be a list of numbers")
    want = state.tp.config.image_feature_dim
    _expect(len(feats) == want,
            f"query_image_features has length {len(feats)}, expected {want}")
    arr = np.asarray(feats, dtype=np.float64)
    _expect(bool(np.all(np.isfinite(arr))), "query_image_features must be finite")
    return embed_images(state.tp, arr[None, :], "query")[0]


def handle_search(state: ServiceState, body: dict) -> dict:
    _expect(isinstance(body, dict), "request body must be a JSON object")
    known = {"query_image_id", "query_image_features", "query_text", "query_weight", "k"}
    unknown = set(body) - known
    _expect(not unknown, f"unknown fields: {sorted(unknown)}")

    image_emb = _resolve_query_image(state, body)
    tokens = _resolve_query_tokens(state, body.get("query_text"))

    k = body.get("k", state.config.default_k)
    k = _as_int(k, "k")
    _expect(k >= 1, f"k must be >= 1, got {k}")

    if tokens is None:
        query_weight = 1.0
        fused = image_emb
    else:
        query_weight = body.get("query_weight", state.config.default_query_weight)
        _expect(isinstance(query_weight, (int, float)) and not isinstance(query_weight, bool)
                and 0.0 <= float(query_weight) <= 1.0,
                f"query_weight must be a number in [0, 1], got {query_weight!r}")
        query_weight = float(query_weight)
        text_emb = embed_texts(state.tp, [tokens], "query")[0]
        try:
            fused = fuse_one(image_emb, text_emb, query_weight)
        except DegenerateInputError as exc:
            raise ServiceError("degenerate_fusion", str(exc), status=400) from None

    hits = search(state.index, fused, k)
    cfg = state.corpus.config
    results = []
    for rank, hit in enumerate(hits, start=1):
        product = state.products[hit.product_id]
        results.append({
            "rank": rank,
            "product_id": hit.product_id,
            "score": float(hit.score),
            "is_distractor": hit.product_id in state.distractor_ids,
            "text_words": [token_to_word(cfg, t) for t in product.product_text_tokens],
        })
    response = {
        "results": results,
        "effective": {
            "query_weight": query_weight,
            "index_weight": state.config.index_weight,
            "k": k,
            "used_text": tokens is not None,
            "query_tokens": tokens,
        },
    }
    if state.config.evaluation_mode:
        qid = body.get("query_image_id")
        truth = state.truth_by_query.get(qid) if qid is not None else None
        response["ground_truth_product_id"] = truth
    return response


def _feature_summary(features: np.ndarray) -> dict:
    return {
        "dim": int(features.shape[0]),
        "norm": float(np.linalg.norm(features)),
        "mean": float(features.mean()),
        "min": float(features.min()),
        "max": float(features.max()),
    }


def handle_product(state: ServiceState, product_id: int) -> dict:
    product = state.products.get(product_id)
    if product is None:
        raise ServiceError("not_found", f"unknown product id {product_id}", status=404)
    cfg = state.corpus.config
    out = {
        "product_id": product.product_id,
        "is_distractor": product.product_id in state.distractor_ids,
        "text_tokens": list(product.product_text_tokens),
        "text_words": [token_to_word(cfg, t) for t in product.product_text_tokens],
        "feature_summary": _feature_summary(product.catalog_image_features),
    }
    if state.config.evaluation_mode:
        by_product = state.corpus.queries_by_product()
        out["query_ids"] = [state.corpus.queries[i].query_id
                            for i in by_product.get(product.product_id, [])]
    return out


def handle_queries(state: ServiceState, offset: int, limit: int) -> dict:
    _expect(offset >= 0, f"offset must be >= 0, got {offset}")
    _expect(1 <= limit <= MAX_PAGE, f"limit must be in [1, {MAX_PAGE}], got {limit}")
    window = state.corpus.queries[offset:offset + limit]
    items = []
    for q in window:
        item = {
            "query_id": q.query_id,
            "features": [float(v) for v in q.query_image_features],
            "text_tokens": list(q.query_text_tokens),
        }
        if state.config.evaluation_mode:
            item["product_id"] = q.product_id
        items.append(item)
    return {"total": len(state.corpus.queries), "offset": offset,
            "limit": limit, "items": items}


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="shopmatch search service", docs_url=None, redoc_url=None)
    # the console is a static page served from any origin
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["GET", "POST"], allow_headers=["content-type"])

    @app.exception_handler(ServiceError)
    async def service_error(_request: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status,
                            content={"error": {"code": exc.code, "message": str(exc)}})

    @app.exception_handler(RequestValidationError)
    async def request_error(_request: Request, exc: RequestValidationError):
        kinds = {e.get("type", "") for e in exc.errors()}
        code = "parse_error" if any("json" in k for k in kinds) else "validation_error"
        return JSONResponse(status_code=400,
                            content={"error": {"code": code, "message": str(exc.errors())}})

    @app.get("/health")
    async def health():
        return {"status": "ok", "index_size": state.index.size,
                "embed_dim": state.index.dim}

    @app.get("/config")
    async def config():
        return {
            "index_weight": state.config.index_weight,
            "default_query_weight": state.config.default_query_weight,
            "default_k": state.config.default_k,
            "evaluation_mode": state.config.evaluation_mode,
            "embed_dim": state.index.dim,
            "image_feature_dim": state.tp.config.image_feature_dim,
            "vocab_size": state.tp.config.vocab_size,
            "temperature": state.tp.temperature(),
            "has_query_text_head": state.tp.has_query_text_head,
            "counts": {
                "products": len(state.corpus.products),
                "distractors": len(state.corpus.distractors),
                "queries": len(state.corpus.queries),
            },
        }

    @app.get("/products/{product_id}")
    async def product(product_id: int):
        return handle_product(state, product_id)

    @app.get("/queries")
    async def queries(offset: int = 0, limit: int = 24):
        return handle_queries(state, offset, limit)

    @app.post("/search")
    async def search_endpoint(request: Request):
        raw = await request.body()
        try:
            body = json.loads(raw) if raw else {}
        except json.JSONDecodeError as exc:
            raise ServiceError("parse_error", f"request body is not valid JSON: {exc}")
        return handle_search(state, body)

    return app


def serve(config: ServiceConfig, host: str = "127.0.0.1", port: int = 8080) -> None:
    """Load artifacts, then block serving HTTP until interrupted."""
    import uvicorn

    state = load_service_state(config)
    app = create_app(state)
    print(json.dumps({"serving": {"host": host, "port": port,
                                  "index_size": state.index.size}}), flush=True)
    uvicorn.run(app, host=host, port=port, log_level="warning")
