"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric
failure. Argparse's own usage failures are remapped onto code 1 so the
contract holds for unknown flags and missing arguments too.

Subcommands mirror the pipeline stages plus the analysis and utility
wrappers; `run-all` is exactly the four stage subcommands in sequence.
"""

import argparse
import json
import sys

from . import pipeline
from .config import SearchConfig
from .errors import (ConfigError, ContractError, DataError, NumericError,
                     UsageError)
from .genome import ArchGenome, count_params

STAGE_COMMANDS = {
    "pretrain-supernet": "pretrain",
    "finetune-supernet": "finetune",
    "search": "search",
    "head-search": "heads",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="elm", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (section.key = value)")
    common.add_argument("--profile", choices=("desk", "micro", "paper"),
                        help="named base profile (default desk)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--workdir", help="override paths.workdir")
    common.add_argument("--corpus", help="override paths.corpus")
    common.add_argument("--resume", action="store_true",
                        help="reuse completed stage checkpoints")
    common.add_argument("--force", action="store_true",
                        help="proceed past config-hash mismatches")
    common.add_argument("--verify-f64", action="store_true",
                        help="re-check each epoch's first loss in float64")

    sub = parser.add_subparsers(dest="command", metavar="command")
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=[common],
                       help=f"run the {STAGE_COMMANDS[name]} stage")
    sub.add_parser("run-all", parents=[common],
                   help="all four search stages in sequence")

    p = sub.add_parser("train-final", parents=[common],
                       help="train a standalone model for a genome")
    p.add_argument("--genome", help="genome file (default: "
                                    "workdir/genome.final)")
    sub.add_parser("pretrain-teacher", parents=[common],
                   help="train the fixed wide teacher model")
    sub.add_parser("eval", parents=[common],
                   help="score the trained final model")

    p = sub.add_parser("analyze", parents=[common],
                       help="write analysis CSVs from checkpoints")
    p.add_argument("kind", choices=("pca", "cka", "blocksim"))
    p.add_argument("--layer", type=int, help="restrict cka to one layer")

    p = sub.add_parser("count-params", parents=[common],
                       help="exact parameter count of a genome")
    p.add_argument("--genome", required=True, help="genome file")

    sub.add_parser("export-figures", parents=[common],
                   help="re-derive figure CSVs from checkpoint state")
    return parser


def _resolve_config(args) -> SearchConfig:
    cfg = SearchConfig.profile(args.profile or "desk")
    if args.config:
        file_cfg = SearchConfig.load(args.config)
        cfg = cfg.with_overrides(file_cfg.values)
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.workdir:
        overrides["paths.workdir"] = args.workdir
    if args.corpus:
        overrides["paths.corpus"] = args.corpus
    return cfg.with_overrides(overrides)


def _dispatch(args) -> int:
    if args.command is None:
        raise UsageError("no subcommand given; see --help")
    if args.command == "count-params":
        cfg = _resolve_config(args)
        genome = ArchGenome.load(args.genome)
        if cfg["paths.corpus"]:
            from .train import load_corpus
            vocab_size = load_corpus(cfg["paths.corpus"],
                                     cfg["train.seq_len"],
                                     cfg["model.vocab_limit"]).vocab.size
        else:
            vocab_size = cfg["model.vocab_limit"]
        dims = cfg.model_dims(vocab_size)
        genome.validate(dims)
        print(count_params(genome, dims,
                           cfg["budget.count_embeddings"]))
        return 0

    cfg = _resolve_config(args)
    if args.command in STAGE_COMMANDS:
        report = pipeline.run_until(
            cfg, STAGE_COMMANDS[args.command], resume=args.resume,
            force=args.force, verify_f64=args.verify_f64,
            require_previous=True)
        print(json.dumps(report, sort_keys=True))
        return 0
    if args.command == "run-all":
        report = pipeline.run_search(cfg, resume=args.resume,
                                     force=args.force,
                                     verify_f64=args.verify_f64)
        print(json.dumps(report, sort_keys=True))
        return 0
    if args.command == "train-final":
        genome_path = args.genome or pipeline.RunDir(
            cfg["paths.workdir"]).file("genome.final")
        genome = ArchGenome.load(genome_path)
        metrics = pipeline.train_final(cfg, genome,
                                       verify_f64=args.verify_f64)
        print(json.dumps(metrics, sort_keys=True))
        return 0
    if args.command == "pretrain-teacher":
        metrics = pipeline.pretrain_teacher(cfg,
                                            verify_f64=args.verify_f64)
        print(json.dumps(metrics, sort_keys=True))
        return 0
    if args.command == "eval":
        metrics = pipeline.evaluate_final(cfg)
        print(json.dumps(metrics, sort_keys=True))
        return 0
    if args.command == "analyze":
        paths = pipeline.analyze(cfg, args.kind, layer=args.layer)
        for path in paths:
            print(path)
        return 0
    if args.command == "export-figures":
        for path in pipeline.export_figures(cfg):
            print(path)
        return 0
    raise UsageError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _dispatch(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, ConfigError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
