import argparse
import logging
from pathlib import Path

import numpy as np

from align_gen_app.repository.datasets import write_dataset
from align_gen_app.repository.vocab import resolve_vocabulary, save_vocabulary
from align_gen_app.routes.common import add_config_flag, default_help, record_run, resolve, run_config_path
from align_gen_app.schemas import CorpusSpec
from align_gen_app.services import synthdata

logger = logging.getLogger(__name__)


def synth_data(args: argparse.Namespace) -> None:
    """
    The synth_data function renders a catalog, the skewed pretraining corpus and the anti-skewed
    pair dataset into one dataset directory, then prints the manifest hash.

    :param args: Namespace: Parsed ``synth-data`` flags
    :return: None
    """
    resolved = resolve(args, n_concepts=args.concepts, seed=args.seed, prior_skew=args.skew,
                       images_per_concept=args.images_per_concept)
    rng = np.random.default_rng(resolved.seed)
    catalog = synthdata.gen_catalog(resolved.n_concepts, rng)
    spec = CorpusSpec(n_concepts=resolved.n_concepts, images_per_concept=resolved.images_per_concept,
                      prior_skew=synthdata.default_skew(resolved.prior_skew))
    corpus = synthdata.make_pretrain_corpus(spec, rng, resolved.image_side)
    pairs = synthdata.make_pair_dataset(catalog, rng, args.pairs_per_concept, resolved.image_side,
                                        resolved.test_fraction)
    digest = write_dataset(args.out, catalog, corpus, pairs)
    save_vocabulary(args.out / "vocab.txt", resolve_vocabulary(resolved.vocab_path))
    record_run(run_config_path(args.out), "synth-data", resolved, {"out": args.out})
    print(digest)


def register(subparsers) -> None:
    parser = subparsers.add_parser("synth-data", help="render a synthetic glyph dataset")
    parser.add_argument("--out", type=Path, required=True, help="dataset directory to create")
    parser.add_argument("--concepts", type=int, default=None, help=default_help("catalog size", "n_concepts"))
    parser.add_argument("--seed", type=int, default=None, help=default_help("generator seed", "seed"))
    parser.add_argument("--skew", type=float, default=None,
                        help=default_help("probability of each shape's dominant colour", "prior_skew"))
    parser.add_argument("--images-per-concept", type=int, default=None,
                        help=default_help("pretraining images per catalog concept", "images_per_concept"))
    parser.add_argument("--pairs-per-concept", type=int, default=40,
                        help="reference/target pairs per anti-skewed concept (default: 40)")
    add_config_flag(parser)
    parser.set_defaults(handler=synth_data)
