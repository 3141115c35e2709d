"""Symmetric InfoNCE losses over aligned multi-tower batches.

A batch is "aligned" when index i of every tower belongs to the same
product. For each tower pair (A, B) the loss is the mean of two
cross-entropies: classify the matching B for each A over all M gathered
candidates, and vice versa, with logits cos(a_i, b_j) / tau. The
three-head model sums 3 such pair losses; the four-head model sums all
6 pairs of its towers, unweighted.

Multi-shard training is simulated by concatenating per-shard batches
before the loss, so M = B * n_shards candidates compete exactly as they
would after a cross-device gather.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Tensor, concat_rows, diagonal, div, logsumexp, matmul,
                       mean, sub, transpose)
from .errors import ContractError, DataError, ValidationError

TOWER_QUERY_IMAGE = "query_image"
TOWER_CATALOG_IMAGE = "catalog_image"
TOWER_PRODUCT_TEXT = "product_text"
TOWER_QUERY_TEXT = "query_text"

# Canonical tower order; pair keys are "first:second" in this order.
TOWER_ORDER = (TOWER_QUERY_IMAGE, TOWER_CATALOG_IMAGE, TOWER_PRODUCT_TEXT, TOWER_QUERY_TEXT)

THREE_TOWER_PAIRS = (
    (TOWER_QUERY_IMAGE, TOWER_CATALOG_IMAGE),
    (TOWER_QUERY_IMAGE, TOWER_PRODUCT_TEXT),
    (TOWER_CATALOG_IMAGE, TOWER_PRODUCT_TEXT),
)

FOUR_TOWER_PAIRS = (
    (TOWER_QUERY_IMAGE, TOWER_CATALOG_IMAGE),
    (TOWER_QUERY_IMAGE, TOWER_PRODUCT_TEXT),
    (TOWER_QUERY_IMAGE, TOWER_QUERY_TEXT),
    (TOWER_CATALOG_IMAGE, TOWER_PRODUCT_TEXT),
    (TOWER_CATALOG_IMAGE, TOWER_QUERY_TEXT),
    (TOWER_PRODUCT_TEXT, TOWER_QUERY_TEXT),
)

IMAGE_ONLY_PAIRS = ((TOWER_QUERY_IMAGE, TOWER_CATALOG_IMAGE),)

_UNIT_NORM_TOL = 1e-6


def pair_key(a: str, b: str) -> str:
    i, j = TOWER_ORDER.index(a), TOWER_ORDER.index(b)
    return f"{a}:{b}" if i <= j else f"{b}:{a}"


@dataclass
class AlignedBatch:
    """Per-tower unit-norm embeddings, row i of each belonging to product_ids[i].

    Absent towers are None. shard_count records how many shards were
    concatenated to form this pool (1 for a raw batch).
    """
    product_ids: tuple[int, ...]
    towers: dict[str, Tensor]
    shard_count: int = 1

    def __post_init__(self):
        self.product_ids = tuple(int(p) for p in self.product_ids)
        if not self.towers:
            raise ContractError("batch has no towers")
        n = len(self.product_ids)
        for name, t in self.towers.items():
            if name not in TOWER_ORDER:
                raise ContractError(f"unknown tower name {name!r}")
            if t.data.ndim != 2 or t.data.shape[0] != n:
                raise ContractError(
                    f"tower {name} has shape {t.data.shape}, expected ({n}, embed_dim)")
            norms = np.linalg.norm(t.data, axis=1)
            worst = float(np.abs(norms - 1.0).max()) if n else 0.0
            if worst > _UNIT_NORM_TOL:
                raise ValidationError(
                    f"tower {name} rows are not unit-norm (max deviation {worst:.2e})")
        seen: set[int] = set()
        for p in self.product_ids:
            if p in seen:
                raise DataError(f"product id {p} appears more than once in the batch")
            seen.add(p)

    @property
    def size(self) -> int:
        return len(self.product_ids)

    def tower(self, name: str) -> Tensor:
        t = self.towers.get(name)
        if t is None:
            raise ContractError(f"batch is missing tower {name!r}")
        return t


def gather_shards(shards: list[AlignedBatch]) -> AlignedBatch:
    """Concatenate per-shard batches into one pool of M = B * n_shards rows.

    With a single shard this is the identity. Shards must agree on size
    and tower set, and no product may appear on two shards.
    """
    if not shards:
        raise ContractError("gather_shards needs at least one shard")
    if len(shards) == 1:
        return shards[0]
    names = set(shards[0].towers)
    size = shards[0].size
    for s in shards[1:]:
        if set(s.towers) != names:
            raise ContractError(f"shard tower sets differ: {sorted(names)} vs {sorted(s.towers)}")
        if s.size != size:
            raise ContractError(f"shard sizes differ: {size} vs {s.size}")
    ids: list[int] = []
    for s in shards:
        ids.extend(s.product_ids)
    towers = {name: concat_rows([s.towers[name] for s in shards]) for name in sorted(names)}
    return AlignedBatch(product_ids=tuple(ids), towers=towers, shard_count=len(shards))


def pair_infonce(a: Tensor, b: Tensor, tau) -> Tensor:
    """Symmetric InfoNCE between two aligned unit-norm embedding pools.

    loss = 0.5 * (mean_i CE(row i) + mean_j CE(col j)) where logits are
    (a @ b.T) / tau and the positive sits on the diagonal.
    """
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ContractError(
            f"pair_infonce needs equal 2-D shapes, got {a.data.shape} and {b.data.shape}")
    m = a.data.shape[0]
    if m < 2:
        raise ContractError(f"need at least 2 candidates for a contrastive pool, got {m}")
    if isinstance(tau, Tensor):
        if float(tau.data) <= 0.0:
            raise ValidationError(f"temperature must be positive, got {float(tau.data)}")
    elif tau <= 0.0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    logits = div(matmul(a, transpose(b)), tau)
    positives = diagonal(logits)
    a_to_b = mean(sub(logsumexp(logits, axis=1), positives))
    b_to_a = mean(sub(logsumexp(logits, axis=0), positives))
    return (a_to_b + b_to_a) * 0.5


@dataclass
class LossBreakdown:
    """Total loss plus each pair term, all still on the tape."""
    pairs: dict[str, Tensor] = field(default_factory=dict)
    total: Tensor | None = None

    def pair_values(self) -> dict[str, float]:
        return {k: float(v.data) for k, v in self.pairs.items()}

    def total_value(self) -> float:
        return float(self.total.data)


def _sum_pairs(batch: AlignedBatch, pairs, tau) -> LossBreakdown:
    out = LossBreakdown()
    for a_name, b_name in pairs:
        term = pair_infonce(batch.tower(a_name), batch.tower(b_name), tau)
        out.pairs[pair_key(a_name, b_name)] = term
        out.total = term if out.total is None else out.total + term
    return out


def loss_image_only(batch: AlignedBatch, tau) -> LossBreakdown:
    """Single query-image vs catalog-image InfoNCE term."""
    return _sum_pairs(batch, IMAGE_ONLY_PAIRS, tau)


def loss_three_tower(batch: AlignedBatch, tau) -> LossBreakdown:
    """Image-image alignment plus both image-to-product-text terms."""
    return _sum_pairs(batch, THREE_TOWER_PAIRS, tau)


def loss_four_tower(batch: AlignedBatch, tau) -> LossBreakdown:
    """Unweighted sum over all 6 pairs of the four towers."""
    return _sum_pairs(batch, FOUR_TOWER_PAIRS, tau)


LOSS_BY_MODE = {
    "image_only": loss_image_only,
    "three_tower": loss_three_tower,
    "four_tower": loss_four_tower,
}

TOWERS_BY_MODE = {
    "image_only": (TOWER_QUERY_IMAGE, TOWER_CATALOG_IMAGE),
    "three_tower": (TOWER_QUERY_IMAGE, TOWER_CATALOG_IMAGE, TOWER_PRODUCT_TEXT),
    "four_tower": TOWER_ORDER,
}
