import argparse
import logging
from pathlib import Path

from align_gen_app.repository.checkpoints import load_checkpoint
from align_gen_app.repository.datasets import write_ppm
from align_gen_app.repository.reports import write_telemetry
from align_gen_app.routes.common import add_config_flag, default_help, load_image, record_run, resolve, \
    run_config_path
from align_gen_app.schemas import NAME_LEVELS
from align_gen_app.services import attnlayout, flow
from align_gen_app.services.errors import UsageError
from align_gen_app.services.model import AlignGenModel
from align_gen_app.services.promptkit import PLACEHOLDER, build_multi_prompt, build_plain_prompt, build_prompt
from align_gen_app.services.synthdata import concept_from_id

logger = logging.getLogger(__name__)


def _bundle(model: AlignGenModel, prompt: str, concepts: list[str], n_refs: int, name_level: str):
    placeholders = prompt.count(PLACEHOLDER)
    vocab, max_len = model.vocab, model.cfg.max_text_len
    if placeholders == 0:
        return build_plain_prompt(prompt, vocab, max_len)
    if len(concepts) != placeholders:
        raise UsageError(f"prompt has {placeholders} '{PLACEHOLDER}' placeholders but {len(concepts)} --concept ids")
    if placeholders != n_refs:
        raise UsageError(f"prompt has {placeholders} placeholders for {n_refs} reference images")
    records = [concept_from_id(value) for value in concepts]
    if placeholders == 1:
        return build_prompt(prompt, records[0], name_level, vocab, max_len)
    return build_multi_prompt(prompt, records, vocab, max_len, name_level)


def _mask_dumper(path: Path, n_noisy: int, n_refs: int):
    written = []

    def hook(mask) -> None:
        if written:
            return
        n_text = mask.shape[-1] - (1 + n_refs) * n_noisy
        segments = attnlayout.segment_tags(n_noisy, n_text, n_refs)
        path.write_text(attnlayout.dump_mask(mask[0], segments) + "\n", encoding="utf-8")
        written.append(path)
        logger.info("attention mask written to %s", path)

    return hook


def run_sample(args: argparse.Namespace) -> None:
    """
    The run_sample function generates one image from a prompt and its reference image(s).

    The prompt holds one ``{C}`` per reference; ``--concept`` names the concept behind each placeholder.

    :param args: Namespace: Parsed ``sample`` flags
    :return: None
    """
    resolved = resolve(args, steps=args.steps, guidance=args.guidance, seed=args.seed)
    model = load_checkpoint(args.ckpt)
    side = model.cfg.image_side
    ref_paths = [path for path in args.ref.split(",") if path]
    concepts = [value for value in (args.concept or "").split(",") if value]
    bundle = _bundle(model, args.prompt, concepts, len(ref_paths), args.name_level)
    refs = [load_image(path, side) for path in ref_paths]
    if args.dump_mask:
        model.dit.mask_hooks.append(_mask_dumper(args.out.with_name(args.out.name + ".mask.txt"),
                                                 model.cfg.n_tokens, len(refs)))
    telemetry = [] if args.telemetry else None
    image = flow.sample(model, [bundle], refs, resolved.sample_config(), telemetry=telemetry)
    write_ppm(args.out, image[0].numpy())
    if telemetry is not None:
        write_telemetry(args.telemetry, telemetry)
    record_run(run_config_path(args.out), "sample", resolved,
               {"ckpt": args.ckpt, "ref": args.ref, "out": args.out, "prompt": args.prompt})


def run_vary(args: argparse.Namespace) -> None:
    """Generates a variation of an image from its redux tokens alone."""
    resolved = resolve(args, steps=args.steps, guidance=args.guidance, seed=args.seed)
    model = load_checkpoint(args.ckpt)
    image = flow.sample_variation(model, load_image(args.image, model.cfg.image_side), resolved.sample_config())
    write_ppm(args.out, image[0].numpy())
    record_run(run_config_path(args.out), "vary", resolved, {"ckpt": args.ckpt, "image": args.image, "out": args.out})


def _sampler_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--ckpt", type=Path, required=True, help="checkpoint file")
    parser.add_argument("--out", type=Path, required=True, help="PPM image to write")
    parser.add_argument("--steps", type=int, default=None, help=default_help("Euler steps", "steps"))
    parser.add_argument("--guidance", type=float, default=None, help=default_help("guidance scale", "guidance"))
    parser.add_argument("--seed", type=int, default=None, help=default_help("initial noise seed", "seed"))
    add_config_flag(parser)


def register(subparsers) -> None:
    sample = subparsers.add_parser("sample", help="generate an image from a prompt and reference image(s)")
    _sampler_flags(sample)
    sample.add_argument("--prompt", required=True, help="prompt text with one '{C}' per reference")
    sample.add_argument("--ref", required=True, help="reference PPM image, or IMG,IMG2 for several concepts")
    sample.add_argument("--concept", default=None, help="concept id per placeholder, e.g. square-red-plain")
    sample.add_argument("--name-level", choices=NAME_LEVELS, default="surface",
                        help="concept name level (default: surface)")
    sample.add_argument("--dump-mask", action="store_true", help="write the attention mask next to the output")
    sample.add_argument("--telemetry", type=Path, default=None, help="CSV of step, t and velocity norm")
    sample.set_defaults(handler=run_sample)

    vary = subparsers.add_parser("vary", help="generate a variation of an image from its redux tokens")
    _sampler_flags(vary)
    vary.add_argument("--image", type=Path, required=True, help="input PPM image")
    vary.set_defaults(handler=run_vary)
