"""Synthetic street-to-shop corpus generator.

Every product is a latent concept vector. Catalog images are a fixed
linear projection of the concept plus studio noise, but they only show
the first catalog_coverage fraction of concept coordinates (a studio
photo misses attributes like fit or backside details). Query images
show the full concept, plus a background vector drawn from a shared
pool (scaled by background_strength) and heavier wild noise. Because
backgrounds are shared across products and queries are noisy, matching
query images straight to catalog images is the weakest supervision
path; text names concept coordinates exactly and anchors both image
roles.

Text is synthesized from the concept itself: each concept coordinate is
quantized to a level and emitted as one token, so a token sequence is a
lossy readout of the concept. Product text covers a configurable
fraction of coordinates and mixes in filler tokens; query text covers a
(usually larger) fraction with no filler. Distractors are products with
no queries.

Serialized layout: products.jsonl, queries.jsonl, distractors.jsonl and
manifest.json in one directory. Feature arrays are stored at float32
precision, which JSON round-trips exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError, ValidationError

MANIFEST_VERSION = 1

PAD_ID = 0
UNK_ID = 1
SIGNAL_BASE = 2

PAD_WORD = "<pad>"
UNK_WORD = "<unk>"


@dataclass(frozen=True)
class CorpusConfig:
    """Knobs for corpus size, noise, background confusion, and text density."""
    n_products: int = 2000
    n_queries_per_product: int = 5
    n_distractors: int = 8000
    concept_dim: int = 8
    image_feature_dim: int = 64
    vocab_size: int = 208
    quant_levels: int = 24
    background_pool_size: int = 12
    background_strength: float = 1.5
    noise_catalog: float = 0.2
    noise_query: float = 0.6
    catalog_coverage: float = 0.7
    product_text_density: float = 0.6
    query_text_density: float = 0.8
    n_filler_tokens: int = 8
    seed: int = 7

    def __post_init__(self):
        positive = ("n_products", "n_queries_per_product", "concept_dim",
                    "image_feature_dim", "vocab_size", "quant_levels",
                    "background_pool_size", "n_filler_tokens")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_distractors < 0:
            raise ConfigError(f"n_distractors must be >= 0, got {self.n_distractors}")
        for name in ("background_strength", "noise_catalog", "noise_query"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("product_text_density", "query_text_density", "catalog_coverage"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ConfigError(f"{name} must be in (0, 1], got {v}")
        if self.query_text_density < self.product_text_density:
            raise ConfigError(
                f"query_text_density {self.query_text_density} must be >= "
                f"product_text_density {self.product_text_density}: queries "
                f"describe the product at least as specifically as listings do")
        if self.filler_base + self.n_filler_tokens > self.vocab_size:
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small: need "
                f"{self.filler_base + self.n_filler_tokens} for pad/unk, "
                f"{self.concept_dim}x{self.quant_levels} signal tokens and "
                f"{self.n_filler_tokens} fillers")

    @property
    def filler_base(self) -> int:
        return SIGNAL_BASE + self.concept_dim * self.quant_levels

    @property
    def visible_dims(self) -> int:
        """Concept coordinates a catalog photo shows (always >= 1)."""
        return max(1, math.ceil(self.catalog_coverage * self.concept_dim))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown corpus config fields: {sorted(extra)}")
        return cls(**d)


def signal_token(config: CorpusConfig, dim: int, level: int) -> int:
    """Token id encoding 'coordinate dim sits at quantization level'."""
    if not (0 <= dim < config.concept_dim and 0 <= level < config.quant_levels):
        raise ValidationError(f"no token for dim={dim} level={level}")
    return SIGNAL_BASE + dim * config.quant_levels + level


def quantize_coordinate(config: CorpusConfig, value: float) -> int:
    """Map a (roughly standard normal) coordinate to a level in [0, L)."""
    scaled = (value + 2.0) / 4.0 * config.quant_levels
    return int(np.clip(math.floor(scaled), 0, config.quant_levels - 1))


def token_to_word(config: CorpusConfig, token: int) -> str:
    """Human-readable word for a token id (stable inverse of word_to_token)."""
    if token == PAD_ID:
        return PAD_WORD
    if token == UNK_ID:
        return UNK_WORD
    if SIGNAL_BASE <= token < config.filler_base:
        dim, level = divmod(token - SIGNAL_BASE, config.quant_levels)
        return f"attr{dim}_{level}"
    if config.filler_base <= token < config.filler_base + config.n_filler_tokens:
        return f"fill{token - config.filler_base}"
    raise ValidationError(f"token id {token} outside vocabulary layout")


def word_to_token(config: CorpusConfig, word: str) -> int:
    """Token id for a word; anything unrecognized maps to the unk id."""
    if word == PAD_WORD:
        return PAD_ID
    if word.startswith("attr"):
        try:
            dim, level = word[4:].split("_", 1)
            return signal_token(config, int(dim), int(level))
        except (ValueError, ValidationError):
            return UNK_ID
    if word.startswith("fill"):
        try:
            i = int(word[4:])
        except ValueError:
            return UNK_ID
        if 0 <= i < config.n_filler_tokens:
            return config.filler_base + i
    return UNK_ID


def text_to_tokens(config: CorpusConfig, text: str) -> list[int]:
    """Whitespace-split free text into token ids, unknown words to unk."""
    return [word_to_token(config, w) for w in text.split()]


@dataclass
class ProductRecord:
    product_id: int
    concept: np.ndarray
    catalog_image_features: np.ndarray
    product_text_tokens: tuple[int, ...]
    query_text_strings: tuple[tuple[int, ...], ...]

    def __eq__(self, other) -> bool:
        return (isinstance(other, ProductRecord)
                and self.product_id == other.product_id
                and np.array_equal(self.concept, other.concept)
                and np.array_equal(self.catalog_image_features, other.catalog_image_features)
                and self.product_text_tokens == other.product_text_tokens
                and self.query_text_strings == other.query_text_strings)


@dataclass
class QueryRecord:
    query_id: int
    product_id: int
    query_image_features: np.ndarray
    query_text_tokens: tuple[int, ...]
    background_id: int

    def __eq__(self, other) -> bool:
        return (isinstance(other, QueryRecord)
                and self.query_id == other.query_id
                and self.product_id == other.product_id
                and np.array_equal(self.query_image_features, other.query_image_features)
                and self.query_text_tokens == other.query_text_tokens
                and self.background_id == other.background_id)


@dataclass
class Corpus:
    config: CorpusConfig
    products: list[ProductRecord]
    distractors: list[ProductRecord]
    queries: list[QueryRecord]
    _queries_by_product: dict[int, list[int]] | None = field(default=None, repr=False)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Corpus)
                and self.config == other.config
                and self.products == other.products
                and self.distractors == other.distractors
                and self.queries == other.queries)

    def index_products(self) -> list[ProductRecord]:
        """Everything retrievable: real products first, then distractors."""
        return self.products + self.distractors

    def product_by_id(self) -> dict[int, ProductRecord]:
        return {p.product_id: p for p in self.index_products()}

    def distractor_ids(self) -> set[int]:
        return {p.product_id for p in self.distractors}

    def queries_by_product(self) -> dict[int, list[int]]:
        """product_id -> indices into self.queries, cached."""
        if self._queries_by_product is None:
            by: dict[int, list[int]] = {}
            for i, q in enumerate(self.queries):
                by.setdefault(q.product_id, []).append(i)
            self._queries_by_product = by
        return self._queries_by_product


def _text_tokens(config: CorpusConfig, concept: np.ndarray, density: float,
                 rng: np.random.Generator, with_filler: bool) -> tuple[int, ...]:
    n_dims = max(1, math.ceil(density * config.concept_dim))
    dims = rng.choice(config.concept_dim, size=n_dims, replace=False)
    tokens = [signal_token(config, int(d), quantize_coordinate(config, float(concept[d])))
              for d in dims]
    if with_filler:
        n_fill = int(rng.integers(1, config.n_filler_tokens + 1))
        tokens.extend(config.filler_base + int(i)
                      for i in rng.integers(0, config.n_filler_tokens, size=n_fill))
    order = rng.permutation(len(tokens))
    return tuple(tokens[i] for i in order)


def _make_product(config: CorpusConfig, pid: int, projection: np.ndarray,
                  rng: np.random.Generator, n_query_texts: int) -> ProductRecord:
    # Truncate the concept to storage precision before deriving anything
    # from it, so catalog and query features agree exactly when noise-free.
    concept = rng.normal(size=config.concept_dim).astype(np.float32)
    c64 = concept.astype(np.float64)
    noise = rng.normal(size=config.image_feature_dim)
    shown = c64.copy()
    shown[config.visible_dims:] = 0.0
    catalog = shown @ projection + config.noise_catalog * noise
    tokens = _text_tokens(config, c64, config.product_text_density, rng, with_filler=True)
    query_texts = tuple(
        _text_tokens(config, c64, config.query_text_density, rng, with_filler=False)
        for _ in range(n_query_texts))
    return ProductRecord(product_id=pid,
                         concept=concept,
                         catalog_image_features=catalog.astype(np.float32),
                         product_text_tokens=tokens,
                         query_text_strings=query_texts)


def generate_corpus(config: CorpusConfig) -> Corpus:
    """Deterministically expand a config into a full corpus (same seed, same bytes)."""
    rng = np.random.default_rng(config.seed)
    projection = rng.normal(0.0, 1.0 / np.sqrt(config.concept_dim),
                            size=(config.concept_dim, config.image_feature_dim))
    backgrounds = rng.normal(size=(config.background_pool_size, config.image_feature_dim))

    products = [_make_product(config, pid, projection, rng, config.n_queries_per_product)
                for pid in range(config.n_products)]

    queries: list[QueryRecord] = []
    qid = 0
    for product in products:
        # float32 storage truncated the concept; regenerate features from it.
        concept = product.concept.astype(np.float64)
        for i in range(config.n_queries_per_product):
            bg = int(rng.integers(config.background_pool_size))
            noise = rng.normal(size=config.image_feature_dim)
            feats = (concept @ projection
                     + config.background_strength * backgrounds[bg]
                     + config.noise_query * noise)
            queries.append(QueryRecord(query_id=qid,
                                       product_id=product.product_id,
                                       query_image_features=feats.astype(np.float32),
                                       query_text_tokens=product.query_text_strings[i],
                                       background_id=bg))
            qid += 1

    distractors = [_make_product(config, config.n_products + i, projection, rng,
                                 n_query_texts=0)
                   for i in range(config.n_distractors)]
    return Corpus(config=config, products=products, distractors=distractors, queries=queries)


def _float_list(arr: np.ndarray) -> list[float]:
    return [float(v) for v in arr]


def _product_line(p: ProductRecord) -> str:
    return json.dumps({
        "product_id": p.product_id,
        "concept": _float_list(p.concept),
        "catalog_image_features": _float_list(p.catalog_image_features),
        "product_text_tokens": list(p.product_text_tokens),
        "query_text_strings": [list(t) for t in p.query_text_strings],
    }, separators=(",", ":"))


def write_corpus(corpus: Corpus, out_dir) -> None:
    """Write products/queries/distractors JSONL plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "products.jsonl", "w") as f:
        for p in corpus.products:
            f.write(_product_line(p) + "\n")
    with open(out / "distractors.jsonl", "w") as f:
        for p in corpus.distractors:
            f.write(_product_line(p) + "\n")
    with open(out / "queries.jsonl", "w") as f:
        for q in corpus.queries:
            f.write(json.dumps({
                "query_id": q.query_id,
                "product_id": q.product_id,
                "query_image_features": _float_list(q.query_image_features),
                "query_text_tokens": list(q.query_text_tokens),
                "background_id": q.background_id,
            }, separators=(",", ":")) + "\n")
    manifest = {
        "format_version": MANIFEST_VERSION,
        "config": corpus.config.to_dict(),
        "counts": {
            "products": len(corpus.products),
            "distractors": len(corpus.distractors),
            "queries": len(corpus.queries),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _require_file(directory: Path, name: str) -> Path:
    path = directory / name
    if not path.is_file():
        raise FileNotFoundError(f"corpus file missing: {path}")
    return path


def _parse_product(obj: dict, where: str) -> ProductRecord:
    try:
        return ProductRecord(
            product_id=int(obj["product_id"]),
            concept=np.asarray(obj["concept"], dtype=np.float32),
            catalog_image_features=np.asarray(obj["catalog_image_features"], dtype=np.float32),
            product_text_tokens=tuple(int(t) for t in obj["product_text_tokens"]),
            query_text_strings=tuple(tuple(int(t) for t in s)
                                     for s in obj["query_text_strings"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{where}: bad product record: {exc}") from None


def _read_jsonl(path: Path):
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON: {exc}") from None


def read_corpus(directory) -> Corpus:
    """Load a corpus directory; validates structure and cross-references."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"corpus directory missing: {d}")
    manifest_path = _require_file(d, "manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{manifest_path}: invalid JSON: {exc}") from None
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ParseError(
            f"{manifest_path}: format_version {manifest.get('format_version')!r}, "
            f"expected {MANIFEST_VERSION}")
    try:
        config = CorpusConfig.from_dict(manifest["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        # a broken stored manifest is a file problem, not a usage problem
        raise ParseError(f"{manifest_path}: bad config block: {exc}") from None

    products = [_parse_product(obj, f"{d / 'products.jsonl'}:{n}")
                for n, obj in _read_jsonl(_require_file(d, "products.jsonl"))]
    distractors = [_parse_product(obj, f"{d / 'distractors.jsonl'}:{n}")
                   for n, obj in _read_jsonl(_require_file(d, "distractors.jsonl"))]
    queries = []
    for n, obj in _read_jsonl(_require_file(d, "queries.jsonl")):
        where = f"{d / 'queries.jsonl'}:{n}"
        try:
            queries.append(QueryRecord(
                query_id=int(obj["query_id"]),
                product_id=int(obj["product_id"]),
                query_image_features=np.asarray(obj["query_image_features"], dtype=np.float32),
                query_text_tokens=tuple(int(t) for t in obj["query_text_tokens"]),
                background_id=int(obj["background_id"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{where}: bad query record: {exc}") from None

    corpus = Corpus(config=config, products=products, distractors=distractors, queries=queries)
    _validate_corpus(corpus)
    return corpus


def _validate_corpus(corpus: Corpus) -> None:
    ids: set[int] = set()
    for p in corpus.index_products():
        if p.product_id in ids:
            raise DataError(f"duplicate product id {p.product_id}")
        ids.add(p.product_id)
        if p.catalog_image_features.shape != (corpus.config.image_feature_dim,):
            raise DataError(
                f"product {p.product_id}: features have shape "
                f"{p.catalog_image_features.shape}, expected "
                f"({corpus.config.image_feature_dim},)")
    qids: set[int] = set()
    for q in corpus.queries:
        if q.query_id in qids:
            raise DataError(f"duplicate query id {q.query_id}")
        qids.add(q.query_id)
        if q.product_id not in ids:
            raise DataError(f"query {q.query_id} references unknown product {q.product_id}")
        if q.query_image_features.shape != (corpus.config.image_feature_dim,):
            raise DataError(
                f"query {q.query_id}: features have shape "
                f"{q.query_image_features.shape}, expected "
                f"({corpus.config.image_feature_dim},)")
