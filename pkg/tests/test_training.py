"""Training loop tests: batch sampling, descent, determinism, divergence
handling, and checkpoint adaptation.
"""

import json

import numpy as np
import pytest

from shopmatch.errors import ConfigError, TrainingError
from shopmatch.losses import pair_key
from shopmatch.towers import TowerConfig, init_tower_params, load_checkpoint, save_checkpoint
from shopmatch.training import (FINETUNE_LR_SCALE, TrainConfig, finetune,
                                read_train_log, sample_step, train)

# tower geometry matching the small_corpus fixture (7-dim features, vocab 50)
CORPUS_TOWER = TowerConfig(image_feature_dim=7, vocab_size=50, max_tokens=6,
                           hidden_dims=(8, 6), embed_dim=5)


def _config(**overrides):
    base = dict(mode="three_tower", steps=6, batch_size=4, shards=2,
                lr=3e-3, weight_decay=0.1, seed=0, log_every=0,
                tower=CORPUS_TOWER)
    base.update(overrides)
    return TrainConfig(**base)


# -----------------------------------------------------------------------------
# config validation
# -----------------------------------------------------------------------------


class TestTrainConfig:
    def test_zero_steps_rejected(self):
        with pytest.raises(ConfigError, match="steps"):
            _config(steps=0)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigError, match="mode"):
            _config(mode="five_tower")

    def test_single_row_pool_rejected(self):
        with pytest.raises(ConfigError, match="batch_size"):
            _config(batch_size=1, shards=1)

    def test_nonpositive_lr_rejected(self):
        with pytest.raises(ConfigError, match="lr"):
            _config(lr=0.0)


# -----------------------------------------------------------------------------
# batch sampling
# -----------------------------------------------------------------------------


class TestSampleStep:
    def test_products_are_distinct_within_step(self, small_corpus):
        shards = sample_step(small_corpus, 4, 2, np.random.default_rng(0))
        assert len(shards) == 2
        ids = [pid for s in shards for pid in s.product_ids]
        assert len(ids) == 8 and len(set(ids)) == 8

    def test_distractors_are_never_sampled(self, small_corpus):
        rng = np.random.default_rng(1)
        distractor_ids = small_corpus.distractor_ids()
        for _ in range(25):
            for shard in sample_step(small_corpus, 6, 2, rng):
                assert distractor_ids.isdisjoint(shard.product_ids)

    def test_same_rng_state_gives_identical_batches(self, small_corpus):
        a = sample_step(small_corpus, 4, 2, np.random.default_rng(7))
        b = sample_step(small_corpus, 4, 2, np.random.default_rng(7))
        for sa, sb in zip(a, b):
            assert sa.product_ids == sb.product_ids
            assert np.array_equal(sa.query_image_features, sb.query_image_features)
            assert sa.query_text_tokens == sb.query_text_tokens

    def test_oversized_batch_is_rejected(self, small_corpus):
        with pytest.raises(ConfigError, match="exceeds"):
            sample_step(small_corpus, 61, 1, np.random.default_rng(0))

    def test_features_match_the_sampled_product(self, small_corpus):
        by_id = small_corpus.product_by_id()
        (shard,) = sample_step(small_corpus, 5, 1, np.random.default_rng(3))
        for row, pid in enumerate(shard.product_ids):
            assert np.array_equal(shard.catalog_image_features[row],
                                  by_id[pid].catalog_image_features.astype(np.float64))
            assert shard.product_text_tokens[row] == by_id[pid].product_text_tokens
            assert shard.query_text_tokens[row] in by_id[pid].query_text_strings


# -----------------------------------------------------------------------------
# training runs
# -----------------------------------------------------------------------------


class TestTrain:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_descends(self, small_corpus, tmp_path, seed):
        config = _config(steps=50, batch_size=8, shards=1, seed=seed)
        result = train(small_corpus, config, tmp_path / f"run{seed}")
        totals = [r.total for r in result.records]
        assert np.mean(totals[-10:]) < np.mean(totals[:10])

    def test_run_is_deterministic(self, small_corpus, tmp_path):
        a = train(small_corpus, _config(), tmp_path / "a")
        b = train(small_corpus, _config(), tmp_path / "b")
        assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()
        for ra, rb in zip(a.records, b.records):
            # wall_time is the one legitimate difference between reruns
            assert (ra.step, ra.total, ra.pairs, ra.temperature) == \
                (rb.step, rb.total, rb.pairs, rb.temperature)

    def test_different_seeds_differ(self, small_corpus, tmp_path):
        a = train(small_corpus, _config(seed=0), tmp_path / "a")
        b = train(small_corpus, _config(seed=1), tmp_path / "b")
        assert a.checkpoint_path.read_bytes() != b.checkpoint_path.read_bytes()

    def test_log_file_round_trips(self, small_corpus, tmp_path):
        result = train(small_corpus, _config(), tmp_path)
        replayed = read_train_log(result.log_path)
        assert replayed == result.records
        assert [r.step for r in replayed] == list(range(1, 7))

    def test_temperature_stays_clamped(self, small_corpus, tmp_path):
        config = _config(steps=30, lr=0.05)  # aggressive lr pushes tau around
        result = train(small_corpus, config, tmp_path)
        for r in result.records:
            assert CORPUS_TOWER.temperature_min <= r.temperature <= CORPUS_TOWER.temperature_max

    def test_pair_logging_follows_mode(self, small_corpus, tmp_path):
        img = train(small_corpus, _config(mode="image_only"), tmp_path / "i")
        three = train(small_corpus, _config(mode="three_tower"), tmp_path / "t")
        four = train(small_corpus, _config(mode="four_tower"), tmp_path / "f")
        assert set(img.records[0].pairs) == {pair_key("query_image", "catalog_image")}
        assert len(three.records[0].pairs) == 3
        assert len(four.records[0].pairs) == 6

    def test_periodic_checkpoints(self, small_corpus, tmp_path):
        config = _config(steps=4, checkpoint_every=2)
        train(small_corpus, config, tmp_path)
        assert (tmp_path / "checkpoint_000002.ckpt").is_file()
        assert (tmp_path / "checkpoint_000004.ckpt").is_file()
        assert (tmp_path / "checkpoint_final.ckpt").is_file()

    def test_mode_head_layout(self, small_corpus, tmp_path):
        three = train(small_corpus, _config(), tmp_path / "t")
        four = train(small_corpus, _config(mode="four_tower"), tmp_path / "f")
        assert not three.params.has_query_text_head
        assert four.params.has_query_text_head
        assert not load_checkpoint(three.checkpoint_path).has_query_text_head

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts_with_dump(self, tmp_path):
        from shopmatch.synthdata import CorpusConfig, generate_corpus
        corpus = generate_corpus(CorpusConfig(
            n_products=4, n_queries_per_product=1, n_distractors=0,
            concept_dim=4, image_feature_dim=7, vocab_size=50,
            quant_levels=10, background_pool_size=2, n_filler_tokens=6, seed=2))
        corpus.queries[0].query_image_features[:] = np.inf
        # batch 2 x 2 shards covers all four products, so step 1 must hit it
        config = _config(steps=3, batch_size=2, shards=2)
        with pytest.raises(TrainingError, match="step 1"):
            train(corpus, config, tmp_path)
        dump = tmp_path / "diverged_step000001.json"
        assert dump.is_file()
        report = json.loads(dump.read_text())
        assert report["step"] == 1
        assert 0 in [pid for shard in report["shard_product_ids"] for pid in shard]


# -----------------------------------------------------------------------------
# finetuning
# -----------------------------------------------------------------------------


class TestFinetune:
    def test_requires_four_tower_mode(self, small_corpus, tmp_path):
        ckpt = tmp_path / "base.ckpt"
        save_checkpoint(init_tower_params(CORPUS_TOWER, np.random.default_rng(0)), ckpt)
        with pytest.raises(ConfigError, match="four_tower"):
            finetune(small_corpus, ckpt, _config(mode="three_tower"), tmp_path / "out")

    def test_fresh_base_reproduces_scratch_training(self, small_corpus, tmp_path):
        """Adapting an untrained checkpoint must equal training from scratch.

        The query-text head is drawn from the same init stream a scratch run
        would use, so the two trajectories coincide exactly.
        """
        seed = 5
        init_seq, _ = np.random.SeedSequence(seed).spawn(2)
        base = init_tower_params(CORPUS_TOWER, np.random.default_rng(init_seq),
                                 with_query_text=False)
        ckpt = tmp_path / "base.ckpt"
        save_checkpoint(base, ckpt)

        config = _config(mode="four_tower", steps=8, seed=seed)
        tuned = finetune(small_corpus, ckpt, config, tmp_path / "ft")
        scratch = train(small_corpus, config, tmp_path / "sc")

        assert sorted(tuned.params.params.names()) == \
            sorted(scratch.params.params.names())
        for name in scratch.params.params.names():
            assert np.array_equal(tuned.params.params[name].data,
                                  scratch.params.params[name].data), name

    def test_trained_base_keeps_its_weights_at_step_zero(self, small_corpus, tmp_path):
        base_run = train(small_corpus, _config(steps=4), tmp_path / "base")
        tuned = finetune(small_corpus, base_run.checkpoint_path,
                         _config(mode="four_tower", steps=1, lr=3e-3 * FINETUNE_LR_SCALE),
                         tmp_path / "ft")
        assert tuned.params.has_query_text_head
        assert len(tuned.records) == 1
        assert len(tuned.records[0].pairs) == 6

    def test_finetune_is_deterministic(self, small_corpus, tmp_path):
        base = train(small_corpus, _config(steps=2), tmp_path / "base")
        config = _config(mode="four_tower", steps=3, seed=9)
        a = finetune(small_corpus, base.checkpoint_path, config, tmp_path / "a")
        b = finetune(small_corpus, base.checkpoint_path, config, tmp_path / "b")
        assert a.checkpoint_path.read_bytes() == b.checkpoint_path.read_bytes()
