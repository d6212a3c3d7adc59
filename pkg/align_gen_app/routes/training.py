import argparse
import logging
from pathlib import Path

import torch

from align_gen_app.repository.checkpoints import load_checkpoint, save_checkpoint
from align_gen_app.repository.datasets import read_dataset
from align_gen_app.repository.reports import write_train_log
from align_gen_app.repository.vocab import resolve_vocabulary
from align_gen_app.routes.common import add_config_flag, default_help, probabilities, record_run, resolve, \
    run_config_path
from align_gen_app.services import trainer
from align_gen_app.services.model import AlignGenModel

logger = logging.getLogger(__name__)


def _log_path(args: argparse.Namespace) -> Path:
    return args.log if args.log is not None else args.out.with_name(args.out.name + ".log.csv")


def run_pretrain(args: argparse.Namespace) -> None:
    """
    The run_pretrain function trains a fresh model on the caption records of a dataset.

    :param args: Namespace: Parsed ``pretrain`` flags
    :return: None
    """
    resolved = resolve(args, pretrain_iterations=args.iterations, batch_size=args.batch_size, seed=args.seed)
    dataset = read_dataset(args.data)
    torch.manual_seed(resolved.seed)
    model = AlignGenModel(resolved.dit_config(), resolve_vocabulary(resolved.vocab_path))
    result = trainer.pretrain(dataset.captions, model, resolved.train_config("pretrain"), progress=True)
    save_checkpoint(model, args.out)
    write_train_log(_log_path(args), result)
    record_run(run_config_path(args.out), "pretrain", resolved,
               {"data": args.data, "out": args.out, "log": _log_path(args), "manifest": dataset.manifest_hash})


def run_adapt(args: argparse.Namespace) -> None:
    """
    The run_adapt function adapts a pretrained checkpoint on the pair records of a dataset.

    :param args: Namespace: Parsed ``adapt`` flags
    :return: None
    """
    resolved = resolve(args, adapt_iterations=args.iterations, batch_size=args.batch_size, seed=args.seed,
                       drop_ratio=args.drop_ratio, name_level_probs=args.name_probs)
    cfg = resolved.train_config("adapt", use_dem=False if args.no_dem else None,
                                use_mask=False if args.no_mask else None,
                                use_s_star=False if args.no_lt else None,
                                splice_mode="all" if args.replace_all else None)
    dataset = read_dataset(args.data)
    model = load_checkpoint(args.base)
    result = trainer.adapt(dataset.pairs, model, cfg, dataset.catalog, progress=True)
    logger.info("black references: %d of %d", result.dropped_refs, result.references_seen)
    save_checkpoint(model, args.out)
    write_train_log(_log_path(args), result)
    record_run(run_config_path(args.out), "adapt", resolved,
               {"data": args.data, "base": args.base, "out": args.out, "log": _log_path(args),
                "manifest": dataset.manifest_hash})


def _common(parser: argparse.ArgumentParser, iterations_field: str) -> None:
    parser.add_argument("--data", type=Path, required=True, help="dataset directory")
    parser.add_argument("--out", type=Path, required=True, help="checkpoint file to write")
    parser.add_argument("--log", type=Path, default=None, help="training log CSV (default: OUT.log.csv)")
    parser.add_argument("--iterations", type=int, default=None, help=default_help("optimizer steps", iterations_field))
    parser.add_argument("--batch-size", type=int, default=None, help=default_help("batch size", "batch_size"))
    parser.add_argument("--seed", type=int, default=None, help=default_help("training seed", "seed"))
    add_config_flag(parser)


def register(subparsers) -> None:
    pretrain = subparsers.add_parser("pretrain", help="train the base text-to-image model")
    _common(pretrain, "pretrain_iterations")
    pretrain.set_defaults(handler=run_pretrain)

    adapt = subparsers.add_parser("adapt", help="train LoRA, DEM and the learnable token on reference pairs")
    _common(adapt, "adapt_iterations")
    adapt.add_argument("--base", type=Path, required=True, help="pretrained checkpoint")
    adapt.add_argument("--drop-ratio", type=float, default=None,
                       help=default_help("probability of replacing a reference with black", "drop_ratio"))
    adapt.add_argument("--name-probs", type=probabilities, default=None,
                       help=default_help("surface,parent,broader name probabilities", "name_level_probs"))
    adapt.add_argument("--no-dem", action="store_true", help="use the learnable token without the DEM update")
    adapt.add_argument("--no-mask", action="store_true", help="disable the selective attention mask")
    adapt.add_argument("--no-lt", action="store_true", help="prompts carry the concept name only")
    adapt.add_argument("--replace-all", action="store_true", help="write every DEM output row back into the prompt")
    adapt.set_defaults(handler=run_adapt)
