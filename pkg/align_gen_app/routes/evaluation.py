import argparse
import logging
from pathlib import Path

from align_gen_app.repository.checkpoints import load_checkpoint
from align_gen_app.repository.datasets import contact_sheet, read_dataset, write_ppm
from align_gen_app.repository.reports import write_ablation_table, write_eval_report, write_json, \
    write_probe_report
from align_gen_app.routes.common import add_config_flag, default_help, record_run, resolve, run_config_path, seed_list
from align_gen_app.services import evalkit
from align_gen_app.services.errors import AcceptanceError, DataError
from align_gen_app.services.promptkit import SHAPES
from align_gen_app.services.synthdata import concept_from_id

logger = logging.getLogger(__name__)

PROBE_MIN_DELTA = 0.15
PRIOR_MIN_RATE = 0.7


def run_eval(args: argparse.Namespace) -> None:
    """
    The run_eval function scores a checkpoint on the held-out split and writes ``report.csv`` and ``report.json``.

    :param args: Namespace: Parsed ``eval`` flags
    :return: None
    """
    resolved = resolve(args, steps=args.steps, guidance=args.guidance, seed=args.seed)
    model = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    cases = evalkit.build_cases(dataset.pairs, per_concept=args.per_concept)
    sink = [] if args.contact_sheet else None
    report = evalkit.evaluate(model, cases, seed_list(args.seeds, resolved.seed), resolved.sample_config(),
                              evalkit.parse_variant(args.variant), sink)
    write_eval_report(args.out, report)
    if sink:
        write_ppm(args.out / "contact_sheet.ppm", contact_sheet([list(pair) for pair in sink]))
    record_run(run_config_path(args.out), "eval", resolved,
               {"ckpt": args.ckpt, "data": args.data, "out": args.out, "manifest": dataset.manifest_hash})
    print(report.model_dump_json(exclude={"rows"}))


def _probe_inputs(dataset):
    concepts, references, seen = [], [], set()
    for record, reference, _ in dataset.split("test"):
        if record.concept_id in seen:
            continue
        seen.add(record.concept_id)
        concepts.append(concept_from_id(record.concept_id))
        references.append(reference)
    if not concepts:
        raise DataError(f"{dataset.root}: no held-out concepts to probe")
    return concepts, references


def run_probe(args: argparse.Namespace) -> None:
    """
    The run_probe function compares generations with the true and a black reference on held-out concepts;
    ``--prior`` also reports how often bare class prompts produce the dominant pretraining colour.

    :param args: Namespace: Parsed ``probe`` flags
    :return: None
    """
    resolved = resolve(args, steps=args.steps, guidance=args.guidance, seed=args.seed)
    model = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    seeds = seed_list(args.seeds, resolved.seed)
    concepts, references = _probe_inputs(dataset)
    report = evalkit.misalignment_probe(model, concepts, references, seeds, resolved.sample_config(),
                                        min_seeds=args.min_seeds)
    print(report.model_dump_json())
    if args.out is not None:
        write_probe_report(args.out, report)
    failures = []
    if args.check and report.delta < PROBE_MIN_DELTA:
        failures.append(f"probe delta {report.delta:.4f} below {PROBE_MIN_DELTA}")
    if args.prior:
        rates = {shape: evalkit.prior_rate(model, shape, seeds, resolved.sample_config()) for shape in SHAPES}
        print(rates)
        if args.out is not None:
            write_json(args.out.with_name(args.out.stem + ".prior.json"), rates)
        if args.check:
            failures += [f"{shape} prior rate {rate:.2f} below {PRIOR_MIN_RATE}" for shape, rate in rates.items()
                         if rate < PRIOR_MIN_RATE]
    if failures:
        raise AcceptanceError("; ".join(failures))


def run_ablate(args: argparse.Namespace) -> None:
    """
    The run_ablate function adapts and evaluates one model per variant and writes ``ablation.csv``.

    :param args: Namespace: Parsed ``ablate`` flags
    :return: None
    """
    resolved = resolve(args, adapt_iterations=args.iterations, seed=args.seed)
    dataset = read_dataset(args.data)
    variants = [name for name in args.variants.split(",") if name.strip()]
    reports = evalkit.ablation_run(dataset.pairs, lambda: load_checkpoint(args.base), variants,
                                   resolved.train_config("adapt"), resolved.sample_config(),
                                   seed_list(args.seeds, resolved.seed), dataset.catalog, args.per_concept,
                                   progress=True)
    write_ablation_table(args.out / "ablation.csv", reports)
    for report in reports:
        write_eval_report(args.out / report.variant, report)
    record_run(run_config_path(args.out), "ablate", resolved,
               {"data": args.data, "base": args.base, "out": args.out, "manifest": dataset.manifest_hash})
    findings = evalkit.ablation_findings(reports)
    for finding in findings:
        logger.warning("ablation: %s", finding)
    if args.check and findings:
        raise AcceptanceError("; ".join(findings))


def _eval_flags(parser: argparse.ArgumentParser, seeds_default: int) -> None:
    parser.add_argument("--data", type=Path, required=True, help="dataset directory")
    parser.add_argument("--seeds", type=int, default=seeds_default,
                        help=f"number of sampling seeds (default: {seeds_default})")
    parser.add_argument("--seed", type=int, default=None, help=default_help("first sampling seed", "seed"))
    parser.add_argument("--steps", type=int, default=None, help=default_help("Euler steps", "steps"))
    parser.add_argument("--guidance", type=float, default=None, help=default_help("guidance scale", "guidance"))
    add_config_flag(parser)


def register(subparsers) -> None:
    evaluate = subparsers.add_parser("eval", help="score a checkpoint on the held-out split")
    _eval_flags(evaluate, 4)
    evaluate.add_argument("--ckpt", type=Path, required=True, help="checkpoint file")
    evaluate.add_argument("--out", type=Path, required=True, help="report directory")
    evaluate.add_argument("--per-concept", type=int, default=2, help="cases per held-out concept (default: 2)")
    evaluate.add_argument("--variant", default="full", help="inference flags of an ablation variant (default: full)")
    evaluate.add_argument("--contact-sheet", action="store_true", help="also write reference/generated image pairs")
    evaluate.set_defaults(handler=run_eval)

    probe = subparsers.add_parser("probe", help="true-reference versus black-reference concept preservation")
    _eval_flags(probe, 20)
    probe.add_argument("--ckpt", type=Path, required=True, help="checkpoint file")
    probe.add_argument("--out", type=Path, default=None, help="JSON report file")
    probe.add_argument("--min-seeds", type=int, default=20, help="smallest accepted seed count (default: 20)")
    probe.add_argument("--prior", action="store_true", help="also measure the dominant-colour rate of bare prompts")
    probe.add_argument("--check", action="store_true", help="exit with the acceptance code when thresholds fail")
    probe.set_defaults(handler=run_probe)

    ablate = subparsers.add_parser("ablate", help="adapt and evaluate one model per ablation variant")
    _eval_flags(ablate, 4)
    ablate.add_argument("--base", type=Path, required=True, help="pretrained checkpoint")
    ablate.add_argument("--variants", required=True,
                        help="comma list of full,no_lt,no_dem,no_mask,no_ts,replace_all,drop_R")
    ablate.add_argument("--out", type=Path, required=True, help="output directory")
    ablate.add_argument("--iterations", type=int, default=None,
                        help=default_help("adaptation steps per variant", "adapt_iterations"))
    ablate.add_argument("--per-concept", type=int, default=2, help="cases per held-out concept (default: 2)")
    ablate.add_argument("--check", action="store_true", help="exit with the acceptance code when an ordering fails")
    ablate.set_defaults(handler=run_ablate)
