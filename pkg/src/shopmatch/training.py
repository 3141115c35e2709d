"""Training loop: batch sampling, sharded loss, AdamW, checkpoints, logs.

One step samples B * n_shards distinct products (so the one-hot InfoNCE
targets are well defined), encodes each shard separately, concatenates
them into a single candidate pool, and backpropagates the mode's loss.
Runs are deterministic for a given seed: parameter init and batch
sampling draw from independent seeded streams, so a finetune that starts
from a freshly initialized four-head checkpoint reproduces a from-scratch
four-head run with the same seed exactly.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import backward
from .errors import ConfigError, NumericError, TrainingError
from .losses import (LOSS_BY_MODE, TOWER_CATALOG_IMAGE, TOWER_PRODUCT_TEXT,
                     TOWER_QUERY_IMAGE, TOWER_QUERY_TEXT, AlignedBatch,
                     gather_shards)
from .optim import OptimizerState, adam_step
from .synthdata import Corpus
from .towers import (TowerConfig, TowerParams, adapt_to_four_towers,
                     encode_image, encode_text, init_tower_params,
                     load_checkpoint, save_checkpoint)

MODES = ("image_only", "three_tower", "four_tower")

FINETUNE_LR_SCALE = 0.5


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the corpus itself."""
    mode: str = "three_tower"
    steps: int = 1200
    batch_size: int = 48
    shards: int = 2
    lr: float = 3e-3
    weight_decay: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 50
    tower: TowerConfig = field(default_factory=TowerConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.shards < 1:
            raise ConfigError(f"shards must be >= 1, got {self.shards}")
        if self.batch_size * self.shards < 2:
            raise ConfigError(
                "batch_size * shards must be >= 2 so each candidate pool "
                "contains a negative")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")


@dataclass
class ShardSample:
    """Raw (unencoded) inputs for one shard of a step."""
    product_ids: tuple[int, ...]
    query_image_features: np.ndarray
    catalog_image_features: np.ndarray
    product_text_tokens: list[tuple[int, ...]]
    query_text_tokens: list[tuple[int, ...]]


def sample_step(corpus: Corpus, batch_size: int, shards: int,
                rng: np.random.Generator) -> list[ShardSample]:
    """Draw B * shards distinct products, one random query (and query text) each.

    Products are sampled without replacement within the step and with
    replacement across steps. The draw sequence is mode-independent, so
    different modes trained with the same seed see identical batches.
    """
    by_product = corpus.queries_by_product()
    pool = [p for p in corpus.products if p.product_id in by_product]
    need = batch_size * shards
    if need > len(pool):
        raise ConfigError(
            f"batch_size*shards = {need} exceeds the {len(pool)} products "
            f"that have queries")
    chosen = rng.choice(len(pool), size=need, replace=False)
    samples: list[ShardSample] = []
    for s in range(shards):
        ids, qf, cf, pt, qt = [], [], [], [], []
        for k in chosen[s * batch_size:(s + 1) * batch_size]:
            product = pool[int(k)]
            q_indices = by_product[product.product_id]
            query = corpus.queries[q_indices[int(rng.integers(len(q_indices)))]]
            text_pick = int(rng.integers(len(product.query_text_strings)))
            ids.append(product.product_id)
            qf.append(query.query_image_features.astype(np.float64))
            cf.append(product.catalog_image_features.astype(np.float64))
            pt.append(product.product_text_tokens)
            qt.append(product.query_text_strings[text_pick])
        samples.append(ShardSample(product_ids=tuple(ids),
                                   query_image_features=np.stack(qf),
                                   catalog_image_features=np.stack(cf),
                                   product_text_tokens=pt,
                                   query_text_tokens=qt))
    return samples


def encode_shard(tp: TowerParams, shard: ShardSample, mode: str) -> AlignedBatch:
    """Run one shard through the towers the mode trains."""
    towers = {
        TOWER_QUERY_IMAGE: encode_image(tp, shard.query_image_features, "query"),
        TOWER_CATALOG_IMAGE: encode_image(tp, shard.catalog_image_features, "catalog"),
    }
    if mode in ("three_tower", "four_tower"):
        towers[TOWER_PRODUCT_TEXT] = encode_text(tp, shard.product_text_tokens, "product")
    if mode == "four_tower":
        towers[TOWER_QUERY_TEXT] = encode_text(tp, shard.query_text_tokens, "query")
    return AlignedBatch(product_ids=shard.product_ids, towers=towers)


@dataclass
class TrainRecord:
    step: int
    total: float
    pairs: dict[str, float]
    temperature: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "total": self.total,
                           "pairs": self.pairs, "temperature": self.temperature,
                           "wall_time": self.wall_time}, sort_keys=True)


def read_train_log(path) -> list[TrainRecord]:
    records = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            records.append(TrainRecord(step=obj["step"], total=obj["total"],
                                       pairs=obj["pairs"],
                                       temperature=obj["temperature"],
                                       wall_time=obj["wall_time"]))
    return records


@dataclass
class TrainResult:
    params: TowerParams
    records: list[TrainRecord]
    checkpoint_path: Path
    log_path: Path


def _dump_bad_step(out_dir: Path, step: int, shard_ids, error: Exception) -> Path:
    dump = {
        "step": step,
        "error": str(error),
        "shard_product_ids": [list(ids) for ids in shard_ids],
    }
    path = out_dir / f"diverged_step{step:06d}.json"
    path.write_text(json.dumps(dump, indent=2) + "\n")
    return path


def _run_loop(tp: TowerParams, corpus: Corpus, config: TrainConfig,
              out_dir: Path, rng: np.random.Generator) -> tuple[list[TrainRecord], Path]:
    loss_fn = LOSS_BY_MODE[config.mode]
    opt = OptimizerState(tp.params, lr=config.lr, weight_decay=config.weight_decay)
    records: list[TrainRecord] = []
    log_path = out_dir / "train_log.jsonl"
    start = time.monotonic()
    with open(log_path, "w") as log:
        for step in range(1, config.steps + 1):
            shards = sample_step(corpus, config.batch_size, config.shards, rng)
            try:
                batches = [encode_shard(tp, s, config.mode) for s in shards]
                pool = gather_shards(batches)
                breakdown = loss_fn(pool, tp.temperature_tensor())
                total = breakdown.total_value()
                if not np.isfinite(total):
                    raise NumericError(f"loss became {total}")
                backward(breakdown.total)
            except NumericError as exc:
                dump = _dump_bad_step(out_dir, step, [s.product_ids for s in shards], exc)
                raise TrainingError(
                    f"non-finite values at step {step}; offending batch written "
                    f"to {dump}") from exc
            adam_step(opt, tp.params)
            tp.clamp_temperature()
            record = TrainRecord(step=step, total=total,
                                 pairs=breakdown.pair_values(),
                                 temperature=tp.temperature(),
                                 wall_time=time.monotonic() - start)
            records.append(record)
            log.write(record.to_json() + "\n")
            if config.log_every and (step % config.log_every == 0 or step == config.steps):
                print(f"  step {step}/{config.steps} loss {total:.4f} "
                      f"tau {record.temperature:.4f}", file=sys.stderr)
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(tp, out_dir / f"checkpoint_{step:06d}.ckpt")
    return records, log_path


def _seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_seq, sample_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(sample_seq)


def train(corpus: Corpus, config: TrainConfig, out_dir) -> TrainResult:
    """Train a model from scratch; writes checkpoint_final.ckpt and the log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng_init, rng_sample = _seed_streams(config.seed)
    tp = init_tower_params(config.tower, rng_init,
                           with_query_text=(config.mode == "four_tower"))
    records, log_path = _run_loop(tp, corpus, config, out, rng_sample)
    ckpt = out / "checkpoint_final.ckpt"
    save_checkpoint(tp, ckpt)
    return TrainResult(params=tp, records=records, checkpoint_path=ckpt, log_path=log_path)


def finetune(corpus: Corpus, base_checkpoint, config: TrainConfig, out_dir) -> TrainResult:
    """Adapt a checkpoint to four heads and continue training it.

    A base model without a query-text head gets one freshly drawn from
    the init stream. config.mode must be four_tower; the tower geometry
    comes from the checkpoint itself.
    """
    if config.mode != "four_tower":
        raise ConfigError(f"finetune requires mode four_tower, got {config.mode!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = load_checkpoint(base_checkpoint)
    rng_init, rng_sample = _seed_streams(config.seed)
    tp = adapt_to_four_towers(base, rng_init)
    effective = dataclasses.replace(config, tower=tp.config)
    records, log_path = _run_loop(tp, corpus, effective, out, rng_sample)
    ckpt = out / "checkpoint_final.ckpt"
    save_checkpoint(tp, ckpt)
    return TrainResult(params=tp, records=records, checkpoint_path=ckpt, log_path=log_path)
