"""Shared image/text encoders with role-specific projection heads.

One MLP embeds image feature vectors for both the query and catalog
roles; one token-pooling encoder embeds text for both the product and
query roles. What distinguishes the roles is a per-role linear
projection onto the shared metric space, followed by L2 normalization.
A model carries either three heads (query image, catalog image, product
text) or four (plus query text); the similarity temperature is a single
trainable log-scale scalar.

Checkpoints are a self-describing little-endian binary: magic "MIMC",
u16 version, a JSON config block, then a named float64 parameter table.
Save then load round-trips bit-exactly.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (ParamSet, Tensor, exp, forward_linear, matmul,
                       normalize_rows, reshape, tanh)
from .errors import CheckpointError, ConfigError, ContractError, DimensionError, ValidationError

CHECKPOINT_MAGIC = b"MIMC"
CHECKPOINT_VERSION = 1

ROLE_QUERY = "query"
ROLE_CATALOG = "catalog"
ROLE_PRODUCT = "product"

IMAGE_ROLES = (ROLE_QUERY, ROLE_CATALOG)
TEXT_ROLES = (ROLE_PRODUCT, ROLE_QUERY)

_IMAGE_PROJ = {ROLE_QUERY: "proj.query_image", ROLE_CATALOG: "proj.catalog_image"}
_TEXT_PROJ = {ROLE_PRODUCT: "proj.product_text", ROLE_QUERY: "proj.query_text"}


@dataclass(frozen=True)
class TowerConfig:
    """Dimensions and temperature bounds shared by all towers of a model."""
    image_feature_dim: int = 64
    vocab_size: int = 208
    max_tokens: int = 16
    hidden_dims: tuple[int, ...] = (96, 96)
    embed_dim: int = 64
    temperature_init: float = 0.07
    temperature_min: float = 0.01
    temperature_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        for name in ("image_feature_dim", "vocab_size", "max_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        # A 1-d metric space cannot separate anything: cosine scores collapse
        # to +/-1 and fusion weights become meaningless.
        if self.embed_dim < 2:
            raise ConfigError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if not self.hidden_dims or any(d < 1 for d in self.hidden_dims):
            raise ConfigError(f"hidden_dims must be positive ints, got {self.hidden_dims}")
        if not (0.0 < self.temperature_min < self.temperature_max):
            raise ConfigError(
                f"need 0 < temperature_min < temperature_max, got "
                f"{self.temperature_min}, {self.temperature_max}")
        if not (self.temperature_min <= self.temperature_init <= self.temperature_max):
            raise ConfigError(
                f"temperature_init {self.temperature_init} outside "
                f"[{self.temperature_min}, {self.temperature_max}]")

    def to_dict(self) -> dict:
        return {
            "image_feature_dim": self.image_feature_dim,
            "vocab_size": self.vocab_size,
            "max_tokens": self.max_tokens,
            "hidden_dims": list(self.hidden_dims),
            "embed_dim": self.embed_dim,
            "temperature_init": self.temperature_init,
            "temperature_min": self.temperature_min,
            "temperature_max": self.temperature_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TowerConfig":
        try:
            return cls(image_feature_dim=int(d["image_feature_dim"]),
                       vocab_size=int(d["vocab_size"]),
                       max_tokens=int(d["max_tokens"]),
                       hidden_dims=tuple(int(x) for x in d["hidden_dims"]),
                       embed_dim=int(d["embed_dim"]),
                       temperature_init=float(d["temperature_init"]),
                       temperature_min=float(d["temperature_min"]),
                       temperature_max=float(d["temperature_max"]))
        except KeyError as exc:
            raise ConfigError(f"tower config missing field {exc.args[0]!r}") from None


class TowerParams:
    """All trainable state for one model, stored in a flat ParamSet."""

    def __init__(self, config: TowerConfig, params: ParamSet):
        self.config = config
        self.params = params

    @property
    def has_query_text_head(self) -> bool:
        return "proj.query_text.w" in self.params

    def temperature(self) -> float:
        """Current clamped similarity temperature, as a plain float."""
        raw = float(np.exp(self.params["log_temperature"].data))
        return float(np.clip(raw, self.config.temperature_min, self.config.temperature_max))

    def temperature_tensor(self) -> Tensor:
        """Temperature as a graph node so the loss trains it."""
        return exp(self.params["log_temperature"])

    def clamp_temperature(self) -> None:
        """Pull log_temperature back into bounds after an optimizer step."""
        lt = self.params["log_temperature"]
        lt.data[...] = np.clip(lt.data,
                               np.log(self.config.temperature_min),
                               np.log(self.config.temperature_max))


def _expected_shapes(config: TowerConfig, with_query_text: bool) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    fan_in = config.image_feature_dim
    for i, width in enumerate(config.hidden_dims):
        shapes[f"image.layer{i}.w"] = (fan_in, width)
        shapes[f"image.layer{i}.b"] = (width,)
        fan_in = width
    shapes["text.embedding"] = (config.vocab_size, config.hidden_dims[0])
    shapes["text.hidden.w"] = (config.hidden_dims[0], config.hidden_dims[-1])
    shapes["text.hidden.b"] = (config.hidden_dims[-1],)
    heads = ["proj.query_image", "proj.catalog_image", "proj.product_text"]
    if with_query_text:
        heads.append("proj.query_text")
    for head in heads:
        shapes[f"{head}.w"] = (config.hidden_dims[-1], config.embed_dim)
        shapes[f"{head}.b"] = (config.embed_dim,)
    shapes["log_temperature"] = ()
    return shapes


def init_tower_params(config: TowerConfig, rng: np.random.Generator,
                      with_query_text: bool = False) -> TowerParams:
    """Draw fresh weights: N(0, 1/sqrt(fan_in)) matrices, zero biases."""
    params = ParamSet()
    for name, shape in _expected_shapes(config, with_query_text).items():
        if name == "log_temperature":
            params.add(name, np.log(config.temperature_init))
        elif name.endswith(".b"):
            params.add(name, np.zeros(shape))
        elif name == "text.embedding":
            params.add(name, rng.normal(0.0, 1.0, size=shape))
        else:
            params.add(name, rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape))
    return TowerParams(config, params)


def adapt_to_four_towers(tp: TowerParams, rng: np.random.Generator) -> TowerParams:
    """Give a three-head model a freshly initialized query-text head.

    The head is drawn by replaying a full four-head init on `rng`, so a
    model adapted from a fresh three-head init equals a fresh four-head
    init made with the same stream. Models that already have the head are
    copied unchanged (the stream is still consumed identically).
    """
    fresh = init_tower_params(tp.config, rng, with_query_text=True)
    dup = TowerParams(tp.config, tp.params.copy())
    if not dup.has_query_text_head:
        dup.params.add("proj.query_text.w", fresh.params["proj.query_text.w"].data.copy())
        dup.params.add("proj.query_text.b", fresh.params["proj.query_text.b"].data.copy())
    return dup


def _projection(tp: TowerParams, table: dict[str, str], role: str, kind: str):
    if role not in table:
        raise ContractError(f"unknown {kind} role {role!r}, expected one of {tuple(table)}")
    head = table[role]
    if f"{head}.w" not in tp.params:
        # A three-head model embeds query text through its only text head.
        if head == "proj.query_text":
            head = "proj.product_text"
        else:
            raise ContractError(f"model has no {head} head")
    return tp.params[f"{head}.w"], tp.params[f"{head}.b"]


def encode_image(tp: TowerParams, features, role: str,
                 debug: dict | None = None) -> Tensor:
    """Embed image feature vectors for one role; rows come out unit-norm.

    features: (N, image_feature_dim) array-like, or a single vector.
    Pass a dict as debug to capture the pre-projection activations.
    """
    x = features if isinstance(features, Tensor) else Tensor(features)
    single = x.data.ndim == 1
    if single:
        x = reshape(x, (1, x.data.shape[0]))
    if x.data.ndim != 2 or x.data.shape[1] != tp.config.image_feature_dim:
        raise DimensionError(
            f"image features {x.data.shape} do not match "
            f"image_feature_dim={tp.config.image_feature_dim}")
    h = x
    for i in range(len(tp.config.hidden_dims)):
        h = tanh(forward_linear(tp.params[f"image.layer{i}.w"],
                                tp.params[f"image.layer{i}.b"], h))
    if debug is not None:
        debug["pre_projection"] = h.data.copy()
    w, b = _projection(tp, _IMAGE_PROJ, role, "image")
    out = normalize_rows(forward_linear(w, b, h))
    return reshape(out, (out.data.shape[1],)) if single else out


def _pooling_matrix(token_rows: list[list[int]], config: TowerConfig) -> np.ndarray:
    """Mean-pool as a constant (N, vocab) matrix so grads flow via matmul.

    Pad id 0 never contributes; an all-pad row pools to the zero vector
    (the hidden layer's bias keeps the following projection non-degenerate).
    """
    pool = np.zeros((len(token_rows), config.vocab_size), dtype=np.float64)
    for r, row in enumerate(token_rows):
        kept = [t for t in row[:config.max_tokens] if t != 0]
        if not kept:
            continue
        share = 1.0 / len(kept)
        for t in kept:
            pool[r, t] += share
    return pool


def _normalize_token_rows(tokens) -> tuple[list[list[int]], bool]:
    if isinstance(tokens, np.ndarray):
        tokens = tokens.tolist()
    tokens = list(tokens)
    single = bool(tokens) and not isinstance(tokens[0], (list, tuple, np.ndarray))
    if not tokens:
        single = True
    rows = [tokens] if single else [list(r) for r in tokens]
    return [[int(t) for t in row] for row in rows], single


def encode_text(tp: TowerParams, tokens, role: str,
                debug: dict | None = None) -> Tensor:
    """Embed token-id sequences for one role; rows come out unit-norm.

    tokens: one sequence of ids, or a list of sequences (ragged fine,
    sequences are truncated to max_tokens). A three-head model serves the
    query role with its product-text head.
    """
    rows, single = _normalize_token_rows(tokens)
    for r, row in enumerate(rows):
        for pos, t in enumerate(row):
            if not (0 <= t < tp.config.vocab_size):
                raise ValidationError(
                    f"token id {t} out of vocabulary at sequence {r}, position {pos}")
    pooled = matmul(Tensor(_pooling_matrix(rows, tp.config)), tp.params["text.embedding"])
    h = tanh(forward_linear(tp.params["text.hidden.w"], tp.params["text.hidden.b"], pooled))
    if debug is not None:
        debug["pre_projection"] = h.data.copy()
    w, b = _projection(tp, _TEXT_PROJ, role, "text")
    out = normalize_rows(forward_linear(w, b, h))
    return reshape(out, (out.data.shape[1],)) if single else out


def embed_images(tp: TowerParams, features, role: str) -> np.ndarray:
    """encode_image without the tape, returned as float32 rows."""
    out = encode_image(tp, np.asarray(features, dtype=np.float64), role)
    return out.data.astype(np.float32)


def embed_texts(tp: TowerParams, token_rows, role: str) -> np.ndarray:
    """encode_text without the tape, returned as float32 rows."""
    out = encode_text(tp, token_rows, role)
    return out.data.astype(np.float32)


def save_checkpoint(tp: TowerParams, path) -> None:
    """Write the model to a self-describing binary file (atomic rename)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    config_blob = json.dumps(tp.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(config_blob)))
    buf.write(config_blob)
    names = sorted(tp.params.names())
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        data = tp.params[name].data
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", data.ndim))
        for dim in data.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> TowerParams:
    """Read a checkpoint, validating layout and every parameter shape."""
    path = Path(path)
    blob = path.read_bytes()
    view = memoryview(blob)
    offset = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointError(
                f"{path}: truncated while reading {what} "
                f"(need {n} bytes at offset {offset}, file has {len(blob)})")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(
            f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported version {version}, expected {CHECKPOINT_VERSION}")
    (config_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        config = TowerConfig.from_dict(json.loads(bytes(take(config_len, "config"))))
    except (json.JSONDecodeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: bad config block: {exc}") from None

    (n_params,) = struct.unpack("<I", take(4, "parameter count"))
    params = ParamSet()
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = tuple(struct.unpack("<I", take(4, "dim"))[0] for _ in range(ndim))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(take(8 * count, f"values of {name}"), dtype="<f8")
        params.add(name, data.reshape(shape).astype(np.float64))
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after parameter table")

    with_query_text = "proj.query_text.w" in params
    expected = _expected_shapes(config, with_query_text)
    got = {name: tuple(params[name].data.shape) for name in params.names()}
    if set(expected) != set(got):
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise CheckpointError(
            f"{path}: parameter names do not match config "
            f"(missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if got[name] != shape:
            raise CheckpointError(
                f"{path}: parameter {name} has shape {got[name]}, expected {shape}")
    return TowerParams(config, params)
