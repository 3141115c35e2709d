"""CLI tests: option precedence, determinism contract, exit codes, and the
full gen/train/finetune/export/eval pipeline with its artifacts.

Commands run in-process through cli.main so coverage and tracebacks work.
"""

import json
import re

import pytest

from shopmatch.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from shopmatch.retrieval import EMBEDDING_FILES, EvalReport

GEN_ARGS = ["--n-products", "30", "--n-queries-per-product", "2",
            "--n-distractors", "5", "--concept-dim", "4",
            "--image-feature-dim", "10", "--vocab-size", "50",
            "--quant-levels", "10", "--background-pool-size", "3",
            "--n-filler-tokens", "6"]

TRAIN_ARGS = ["--steps", "8", "--batch-size", "4", "--shards", "2",
              "--hidden-dims", "12,10", "--embed-dim", "8",
              "--max-tokens", "8", "--log-every", "0"]


def _gen(out, seed="11"):
    return main(["gen-data", "--out", str(out), "--seed", seed, *GEN_ARGS])


# -----------------------------------------------------------------------------
# full pipeline (built once, inspected by several tests)
# -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert _gen(corpus) == EXIT_OK
    assert main(["train", "--corpus", str(corpus), "--out", str(root / "run"),
                 "--seed", "1", *TRAIN_ARGS]) == EXIT_OK
    assert main(["finetune", "--corpus", str(corpus),
                 "--base-checkpoint", str(root / "run" / "checkpoint_final.ckpt"),
                 "--out", str(root / "tuned"), "--seed", "1", "--steps", "4",
                 "--batch-size", "4", "--shards", "2", "--log-every", "0"]) == EXIT_OK
    assert main(["export-embeddings",
                 "--checkpoint", str(root / "tuned" / "checkpoint_final.ckpt"),
                 "--corpus", str(corpus), "--out", str(root / "emb")]) == EXIT_OK
    assert main(["eval", "--checkpoint", str(root / "tuned" / "checkpoint_final.ckpt"),
                 "--corpus", str(corpus), "--task", "multimodal",
                 "--query-weights", "0.0,0.5,1.0",
                 "--out", str(root / "report.json")]) == EXIT_OK
    return root


class TestPipeline:
    def test_training_writes_figure_checkpoint_and_log(self, pipeline):
        assert (pipeline / "run" / "checkpoint_final.ckpt").is_file()
        assert (pipeline / "run" / "train_log.jsonl").is_file()
        assert (pipeline / "run" / "training_curves.png").stat().st_size > 0
        assert (pipeline / "tuned" / "training_curves.png").is_file()

    def test_export_writes_all_embedding_tables(self, pipeline):
        for name in EMBEDDING_FILES.values():
            assert (pipeline / "emb" / name).stat().st_size > 0

    def test_eval_writes_report_csv_and_figure(self, pipeline):
        report = EvalReport.from_dict(json.loads((pipeline / "report.json").read_text()))
        assert report.task == "multimodal"
        assert [c.query_weight for c in report.cells] == [0.0, 0.5, 1.0]
        assert report.index_size == 35  # 30 products + 5 distractors

        # delimited grid: header plus one row per cell
        csv_lines = (pipeline / "report.csv").read_text().splitlines()
        assert len(csv_lines) == 1 + len(report.cells)
        assert csv_lines[0] == "query_weight,index_weight,recall_at_1,recall_at_5,recall_at_10"
        assert (pipeline / "report.png").stat().st_size > 0

    def test_eval_can_skip_the_figure(self, pipeline):
        out = pipeline / "nofig.json"
        assert main(["eval", "--checkpoint",
                     str(pipeline / "tuned" / "checkpoint_final.ckpt"),
                     "--corpus", str(pipeline / "corpus"), "--task", "image_to_image",
                     "--out", str(out), "--no-figure"]) == EXIT_OK
        assert out.is_file()
        assert out.with_suffix(".csv").is_file()
        assert not out.with_suffix(".png").exists()


# -----------------------------------------------------------------------------
# determinism contract
# -----------------------------------------------------------------------------


class TestSeedHandling:
    def test_gen_data_is_reproducible(self, tmp_path):
        assert _gen(tmp_path / "a") == EXIT_OK
        assert _gen(tmp_path / "b") == EXIT_OK
        for name in ("manifest.json", "products.jsonl", "queries.jsonl",
                     "distractors.jsonl"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_stochastic_stage_requires_a_seed_decision(self, tmp_path, capsys):
        rc = main(["gen-data", "--out", str(tmp_path / "c"), *GEN_ARGS])
        assert rc == EXIT_CONFIG
        assert "--seed" in capsys.readouterr().err

    def test_seed_and_nondeterministic_conflict(self, tmp_path, capsys):
        rc = main(["gen-data", "--out", str(tmp_path / "c"), "--seed", "1",
                   "--nondeterministic", *GEN_ARGS])
        assert rc == EXIT_CONFIG
        assert "not both" in capsys.readouterr().err

    def test_nondeterministic_run_echoes_its_seed(self, tmp_path, capsys):
        rc = main(["gen-data", "--out", str(tmp_path / "c"),
                   "--nondeterministic", *GEN_ARGS])
        assert rc == EXIT_OK
        err = capsys.readouterr().err
        drawn = re.search(r"drew seed (\d+)", err)
        assert drawn is not None
        manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
        assert manifest["config"]["seed"] == int(drawn.group(1))


# -----------------------------------------------------------------------------
# option precedence
# -----------------------------------------------------------------------------


class TestConfigFile:
    def test_config_file_overrides_defaults(self, tmp_path, capsys):
        cfg = tmp_path / "gen.json"
        cfg.write_text(json.dumps({"n_products": 12, "n_queries_per_product": 2,
                                   "n_distractors": 3, "concept_dim": 4,
                                   "image_feature_dim": 10, "vocab_size": 50,
                                   "quant_levels": 10, "background_pool_size": 3,
                                   "n_filler_tokens": 6, "seed": 5}))
        rc = main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "c")])
        assert rc == EXIT_OK
        out = capsys.readouterr()
        assert json.loads(out.out)["products"] == 12

    def test_flags_override_the_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "gen.json"
        cfg.write_text(json.dumps({"n_products": 12}))
        rc = main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "c"),
                   "--seed", "5", *GEN_ARGS])  # GEN_ARGS pins n-products 30
        assert rc == EXIT_OK
        out = capsys.readouterr()
        echo = json.loads(out.err.splitlines()[0])
        assert echo["config"]["n_products"] == 30
        assert json.loads(out.out)["products"] == 30

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "gen.json"
        cfg.write_text(json.dumps({"n_prodcts": 12}))
        rc = main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "c"),
                   "--seed", "5"])
        assert rc == EXIT_CONFIG
        assert "n_prodcts" in capsys.readouterr().err

    def test_malformed_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "gen.json"
        cfg.write_text("{nope")
        rc = main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "c"),
                   "--seed", "5"])
        assert rc == EXIT_IO
        assert "invalid JSON" in capsys.readouterr().err

    def test_non_object_config_file(self, tmp_path):
        cfg = tmp_path / "gen.json"
        cfg.write_text("[1, 2]")
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "c"),
                     "--seed", "5"]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "absent.json"),
                     "--out", str(tmp_path / "c"), "--seed", "5"]) == EXIT_IO


# -----------------------------------------------------------------------------
# exit codes
# -----------------------------------------------------------------------------


class TestExitCodes:
    def test_missing_subcommand_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 2
        capsys.readouterr()

    def test_gen_requires_out(self, tmp_path, capsys):
        rc = main(["gen-data", "--seed", "1", *GEN_ARGS])
        assert rc == EXIT_CONFIG
        assert "--out" in capsys.readouterr().err

    def test_invalid_train_steps_names_the_field(self, pipeline, tmp_path, capsys):
        rc = main(["train", "--corpus", str(pipeline / "corpus"),
                   "--out", str(tmp_path / "r"), "--seed", "1", "--steps", "0"])
        assert rc == EXIT_CONFIG
        assert "steps" in capsys.readouterr().err

    def test_bad_hidden_dims_string(self, pipeline, tmp_path, capsys):
        rc = main(["train", "--corpus", str(pipeline / "corpus"),
                   "--out", str(tmp_path / "r"), "--seed", "1",
                   "--hidden-dims", "a,b"])
        assert rc == EXIT_CONFIG
        assert "hidden_dims" in capsys.readouterr().err

    def test_missing_corpus_directory_is_io(self, tmp_path, capsys):
        rc = main(["train", "--corpus", str(tmp_path / "nowhere"),
                   "--out", str(tmp_path / "r"), "--seed", "1", *TRAIN_ARGS])
        assert rc == EXIT_IO
        assert "corpus" in capsys.readouterr().err

    def test_corrupt_corpus_reports_line(self, tmp_path, capsys):
        assert _gen(tmp_path / "corpus") == EXIT_OK
        path = tmp_path / "corpus" / "products.jsonl"
        lines = path.read_text().splitlines()
        lines[1] = "{broken"
        path.write_text("\n".join(lines) + "\n")
        rc = main(["train", "--corpus", str(tmp_path / "corpus"),
                   "--out", str(tmp_path / "r"), "--seed", "1", *TRAIN_ARGS])
        assert rc == EXIT_IO
        assert "products.jsonl:2" in capsys.readouterr().err

    def test_eval_on_missing_checkpoint_is_io(self, pipeline, tmp_path, capsys):
        rc = main(["eval", "--checkpoint", str(tmp_path / "absent.ckpt"),
                   "--corpus", str(pipeline / "corpus"), "--task", "multimodal",
                   "--out", str(tmp_path / "rep.json")])
        assert rc == EXIT_IO
        capsys.readouterr()

    def test_image_to_image_rejects_weight_grid(self, pipeline, tmp_path, capsys):
        rc = main(["eval", "--checkpoint",
                   str(pipeline / "tuned" / "checkpoint_final.ckpt"),
                   "--corpus", str(pipeline / "corpus"), "--task", "image_to_image",
                   "--query-weights", "0.5", "--out", str(tmp_path / "rep.json")])
        assert rc == EXIT_CONFIG
        assert "grid" in capsys.readouterr().err

    def test_finetune_requires_base_checkpoint(self, pipeline, tmp_path, capsys):
        rc = main(["finetune", "--corpus", str(pipeline / "corpus"),
                   "--out", str(tmp_path / "r"), "--seed", "1"])
        assert rc == EXIT_CONFIG
        assert "base-checkpoint" in capsys.readouterr().err

    def test_serve_rejects_bad_index_weight(self, pipeline, capsys):
        rc = main(["serve", "--checkpoint",
                   str(pipeline / "tuned" / "checkpoint_final.ckpt"),
                   "--corpus", str(pipeline / "corpus"),
                   "--embeddings", str(pipeline / "emb"),
                   "--index-weight", "1.5"])
        assert rc == EXIT_CONFIG
        assert "index_weight" in capsys.readouterr().err

    def test_serve_requires_embeddings(self, pipeline, capsys):
        rc = main(["serve", "--checkpoint",
                   str(pipeline / "tuned" / "checkpoint_final.ckpt"),
                   "--corpus", str(pipeline / "corpus")])
        assert rc == EXIT_CONFIG
        assert "embeddings" in capsys.readouterr().err
