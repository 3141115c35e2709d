"""Command-line pipeline: gen-data, train, finetune, export, eval, serve.

Every subcommand accepts --config FILE (JSON whose keys are the long
flag names with underscores); explicit flags win over the file, which
wins over built-in defaults. The effective configuration is echoed to
stderr as one JSON line before any work starts.

Stochastic stages (gen-data, train, finetune) refuse to run without
--seed unless --nondeterministic is passed, in which case the seed is
drawn from the OS and echoed so the run can still be reproduced.

Exit codes: 0 success, 2 bad configuration or usage, 3 runtime failure,
4 missing or malformed files.
"""

from __future__ import annotations

import argparse
import json
import secrets
import sys
from pathlib import Path

from .errors import (CheckpointError, ConfigError, FormatError, ParseError,
                     ShopMatchError, ValidationError)
from .retrieval import evaluate, export_embeddings
from .synthdata import CorpusConfig, generate_corpus, read_corpus, write_corpus
from .towers import TowerConfig
from .training import FINETUNE_LR_SCALE, TrainConfig, finetune, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4


def _echo(command: str, options: dict) -> None:
    print(json.dumps({"command": command, "config": options}, sort_keys=True),
          file=sys.stderr)


def _merged(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file missing: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config file must hold a JSON object")
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        merged.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _resolve_seed(options: dict) -> int:
    """Enforce the determinism contract for stochastic stages."""
    if options.get("seed") is not None and options.get("nondeterministic"):
        raise ConfigError("pass either --seed or --nondeterministic, not both")
    if options.get("seed") is not None:
        return int(options["seed"])
    if options.get("nondeterministic"):
        seed = secrets.randbits(31)
        print(f"nondeterministic run: drew seed {seed}", file=sys.stderr)
        return seed
    raise ConfigError("this stage is stochastic: pass --seed N for a "
                      "reproducible run or --nondeterministic to opt out")


def _parse_float_list(text: str, what: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated numbers, got {text!r}") from None


def _parse_int_tuple(text: str, what: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip() != "")
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated ints, got {text!r}") from None


GEN_DEFAULTS = {
    "out": None, "seed": None, "nondeterministic": False,
    "n_products": 2000, "n_queries_per_product": 5, "n_distractors": 8000,
    "concept_dim": 8, "image_feature_dim": 64, "vocab_size": 208,
    "quant_levels": 24, "background_pool_size": 12, "background_strength": 1.5,
    "noise_catalog": 0.2, "noise_query": 0.6, "catalog_coverage": 0.7,
    "product_text_density": 0.6, "query_text_density": 0.8,
    "n_filler_tokens": 8,
}


def cmd_gen_data(args: argparse.Namespace) -> int:
    options = _merged(args, GEN_DEFAULTS)
    if not options["out"]:
        raise ConfigError("--out is required")
    options["seed"] = _resolve_seed(options)
    _echo("gen-data", options)
    fields = {k: v for k, v in options.items()
              if k in CorpusConfig.__dataclass_fields__}
    corpus = generate_corpus(CorpusConfig(**fields))
    write_corpus(corpus, options["out"])
    print(json.dumps({"out": str(options["out"]),
                      "products": len(corpus.products),
                      "distractors": len(corpus.distractors),
                      "queries": len(corpus.queries)}))
    return EXIT_OK


TRAIN_DEFAULTS = {
    "corpus": None, "out": None, "mode": "three_tower",
    "steps": 1200, "batch_size": 48, "shards": 2,
    "lr": 3e-3, "weight_decay": 0.1, "seed": None, "nondeterministic": False,
    "checkpoint_every": 0, "log_every": 50,
    "hidden_dims": "96,96", "embed_dim": 64, "max_tokens": 16,
    "temperature_init": 0.07, "no_figure": False,
}


def _train_common(args: argparse.Namespace, finetune_from: str | None) -> int:
    options = _merged(args, TRAIN_DEFAULTS if finetune_from is None else FINETUNE_DEFAULTS)
    for key in ("corpus", "out"):
        if not options[key]:
            raise ConfigError(f"--{key} is required")
    options["seed"] = _resolve_seed(options)
    command = "finetune" if finetune_from else "train"
    _echo(command, {**options, "corpus": str(options["corpus"]),
                    "out": str(options["out"])})
    corpus = read_corpus(options["corpus"])

    if finetune_from is None:
        tower = TowerConfig(
            image_feature_dim=corpus.config.image_feature_dim,
            vocab_size=corpus.config.vocab_size,
            max_tokens=int(options["max_tokens"]),
            hidden_dims=_parse_int_tuple(str(options["hidden_dims"]), "hidden_dims"),
            embed_dim=int(options["embed_dim"]),
            temperature_init=float(options["temperature_init"]))
    else:
        tower = TowerConfig()  # replaced by the checkpoint's config

    tc = TrainConfig(mode=options["mode"] if finetune_from is None else "four_tower",
                     steps=int(options["steps"]),
                     batch_size=int(options["batch_size"]),
                     shards=int(options["shards"]),
                     lr=float(options["lr"]),
                     weight_decay=float(options["weight_decay"]),
                     seed=int(options["seed"]),
                     checkpoint_every=int(options["checkpoint_every"]),
                     log_every=int(options["log_every"]),
                     tower=tower)
    if finetune_from is None:
        result = train(corpus, tc, options["out"])
    else:
        result = finetune(corpus, finetune_from, tc, options["out"])
    if not options["no_figure"]:
        from .figures import save_training_figure
        figure = save_training_figure(result.records, Path(options["out"]) / "training_curves.png")
        print(f"figure: {figure}", file=sys.stderr)
    print(json.dumps({"checkpoint": str(result.checkpoint_path),
                      "log": str(result.log_path),
                      "final_loss": result.records[-1].total,
                      "temperature": result.records[-1].temperature}))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    return _train_common(args, None)


FINETUNE_DEFAULTS = {
    "corpus": None, "out": None, "base_checkpoint": None,
    "steps": 1200, "batch_size": 48, "shards": 2,
    "lr": 3e-3 * FINETUNE_LR_SCALE, "weight_decay": 0.1,
    "seed": None, "nondeterministic": False,
    "checkpoint_every": 0, "log_every": 50, "no_figure": False,
}


def cmd_finetune(args: argparse.Namespace) -> int:
    options = _merged(args, FINETUNE_DEFAULTS)
    if not options["base_checkpoint"]:
        raise ConfigError("--base-checkpoint is required")
    return _train_common(args, str(options["base_checkpoint"]))


def cmd_export(args: argparse.Namespace) -> int:
    defaults = {"checkpoint": None, "corpus": None, "out": None}
    options = _merged(args, defaults)
    for key in defaults:
        if not options[key]:
            raise ConfigError(f"--{key} is required")
    _echo("export-embeddings", {k: str(v) for k, v in options.items()})
    corpus = read_corpus(options["corpus"])
    paths = export_embeddings(options["checkpoint"], corpus, options["out"])
    print(json.dumps({name: str(path) for name, path in sorted(paths.items())}))
    return EXIT_OK


EVAL_DEFAULTS = {
    "checkpoint": None, "corpus": None, "task": None, "out": None,
    "query_weights": None, "index_weights": None, "no_figure": False,
}


def cmd_eval(args: argparse.Namespace) -> int:
    options = _merged(args, EVAL_DEFAULTS)
    for key in ("checkpoint", "corpus", "task", "out"):
        if not options[key]:
            raise ConfigError(f"--{key} is required")
    _echo("eval", {k: (str(v) if v is not None else None) for k, v in options.items()})
    corpus = read_corpus(options["corpus"])
    qw = (_parse_float_list(str(options["query_weights"]), "query_weights")
          if options["query_weights"] is not None else None)
    iw = (_parse_float_list(str(options["index_weights"]), "index_weights")
          if options["index_weights"] is not None else None)
    report = evaluate(options["checkpoint"], corpus, options["task"],
                      query_weights=qw, index_weights=iw)
    out = Path(options["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    from .figures import save_eval_figure, write_eval_csv
    csv_path = write_eval_csv(report, out.with_suffix(".csv"))
    print(f"report: {out}", file=sys.stderr)
    print(f"grid csv: {csv_path}", file=sys.stderr)
    if not options["no_figure"]:
        figure = save_eval_figure(report, out.with_suffix(".png"))
        print(f"figure: {figure}", file=sys.stderr)
    print(json.dumps({"task": report.task, "best": report.best.to_dict(),
                      "report": str(out)}))
    return EXIT_OK


SERVE_DEFAULTS = {
    "checkpoint": None, "corpus": None, "embeddings": None,
    "host": "127.0.0.1", "port": 8080,
    "index_weight": 0.5, "query_weight": 0.5, "k": 10,
    "evaluation_mode": False,
}


def cmd_serve(args: argparse.Namespace) -> int:
    options = _merged(args, SERVE_DEFAULTS)
    for key in ("checkpoint", "corpus", "embeddings"):
        if not options[key]:
            raise ConfigError(f"--{key} is required")
    _echo("serve", {**options, "checkpoint": str(options["checkpoint"]),
                    "corpus": str(options["corpus"]),
                    "embeddings": str(options["embeddings"])})
    from .service import ServiceConfig, serve
    config = ServiceConfig(checkpoint=Path(options["checkpoint"]),
                           corpus_dir=Path(options["corpus"]),
                           embeddings_dir=Path(options["embeddings"]),
                           index_weight=float(options["index_weight"]),
                           default_query_weight=float(options["query_weight"]),
                           default_k=int(options["k"]),
                           evaluation_mode=bool(options["evaluation_mode"]))
    serve(config, host=str(options["host"]), port=int(options["port"]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shopmatch",
        description="Train, evaluate, and serve multimodal product matchers "
                    "on a synthetic street-to-shop corpus.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="JSON file of options (flag names with underscores)")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus directory")
    add_config(p)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--nondeterministic", action="store_true", default=None)
    for name in ("n-products", "n-queries-per-product", "n-distractors",
                 "concept-dim", "image-feature-dim", "vocab-size", "quant-levels",
                 "background-pool-size", "n-filler-tokens"):
        p.add_argument(f"--{name}", type=int)
    for name in ("background-strength", "noise-catalog", "noise-query",
                 "catalog-coverage", "product-text-density", "query-text-density"):
        p.add_argument(f"--{name}", type=float)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from scratch")
    add_config(p)
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--mode", choices=("image_only", "three_tower", "four_tower"))
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--shards", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--nondeterministic", action="store_true", default=None)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--log-every", type=int)
    p.add_argument("--hidden-dims", help="comma-separated widths, e.g. 128,128")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--temperature-init", type=float)
    p.add_argument("--no-figure", action="store_true", default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("finetune",
                       help="adapt a checkpoint to four towers and keep training")
    add_config(p)
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--base-checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--shards", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--nondeterministic", action="store_true", default=None)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--log-every", type=int)
    p.add_argument("--no-figure", action="store_true", default=None)
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("export-embeddings",
                       help="embed a corpus with a checkpoint into .emb files")
    add_config(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_export)

    p = sub.add_parser("eval", help="recall@k over a fusion-weight grid")
    add_config(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--task", choices=("image_to_image", "image_to_multimodal", "multimodal"))
    p.add_argument("--out", help="report JSON path; CSV and PNG land beside it")
    p.add_argument("--query-weights", help="comma-separated weights in [0,1]")
    p.add_argument("--index-weights", help="comma-separated weights in [0,1]")
    p.add_argument("--no-figure", action="store_true", default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("serve", help="serve search over HTTP")
    add_config(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--embeddings")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--index-weight", type=float)
    p.add_argument("--query-weight", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--evaluation-mode", action="store_true", default=None)
    p.set_defaults(handler=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError, PermissionError,
            ParseError, FormatError, CheckpointError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ShopMatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
