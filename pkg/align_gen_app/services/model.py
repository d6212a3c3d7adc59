"""The composed model (text/redux encoders, DEM, backbone, learnable token) and its grouped parameter store."""
import logging
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import torch
from torch import nn

from align_gen_app.schemas import ConceptRecord, DitConfig, Phase, PromptBundle, SpliceMode
from align_gen_app.services import dem as dem_ops
from align_gen_app.services.ditnet import DiT
from align_gen_app.services.encoders import ReduxEncoder, TextEncoder, black_reference, encode_redux, encode_text
from align_gen_app.services.errors import ShapeError
from align_gen_app.services.lora import SegmentGate
from align_gen_app.services.promptkit import Vocabulary, empty_prompt

logger = logging.getLogger(__name__)

GROUPS = ("base", "lora", "dem", "s_star")
GROUP_CODES = {name: code for code, name in enumerate(GROUPS)}


def group_of(name: str) -> str:
    if name == "s_star":
        return "s_star"
    if name.startswith("dem."):
        return "dem"
    if name.rsplit(".", 1)[-1].startswith("lora_"):
        return "lora"
    return "base"


@dataclass
class Conditioning:
    """Timestep-independent inputs of one batch, prepared once and reused at every sampling step."""

    text_tokens: torch.Tensor
    relevance: torch.Tensor
    ref_tokens: list[torch.Tensor]
    gate: SegmentGate
    use_mask: bool = True


class AlignGenModel(nn.Module):
    def __init__(self, cfg: DitConfig, vocab: Vocabulary):
        super().__init__()
        if cfg.vocab_size not in (0, len(vocab)):
            raise ShapeError("AlignGenModel", (cfg.vocab_size,), (len(vocab),), detail="vocabulary size mismatch")
        self.cfg = cfg.model_copy(update={"vocab_size": len(vocab)})
        self.vocab = vocab
        self.text_encoder = TextEncoder(len(vocab), cfg.d, cfg.heads, cfg.mlp_ratio)
        self.redux_encoder = ReduxEncoder(cfg.d, cfg.redux_patch, cfg.redux_tokens, cfg.normalize_redux)
        self.dit = DiT(cfg)
        self.dem = dem_ops.DemModule(cfg.d, cfg.dem.heads, cfg.dem.mlp_ratio)
        self.s_star = nn.Parameter(torch.zeros(cfg.d))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.cfg.image_side, self.cfg.image_side, 3

    def bundle_ids(self, bundles: Sequence[PromptBundle]) -> torch.Tensor:
        return torch.tensor([bundle.token_ids for bundle in bundles], dtype=torch.long)

    def encode_prompts(self, bundles: Sequence[PromptBundle]) -> tuple[torch.Tensor, torch.Tensor]:
        ids = self.bundle_ids(bundles)
        relevance = torch.tensor([bundle.relevance for bundle in bundles], dtype=torch.bool)
        return encode_text(ids, self.text_encoder, self.s_star, self.vocab.s_star_id), relevance

    def redux(self, images: torch.Tensor) -> torch.Tensor:
        return encode_redux(images, self.redux_encoder)

    def prepare(self, bundles: Sequence[PromptBundle], ref_images: Sequence[torch.Tensor],
                redux_images: Optional[Sequence[torch.Tensor]] = None, ref_scale: float = 1.0,
                use_dem: bool = True, use_mask: bool = True, splice_mode: SpliceMode = "first_only") -> Conditioning:
        """
        The prepare function builds the conditioning of one batch.

        Prompts are encoded, the DEM updates the learnable token of every concept span from the redux
        tokens of the matching image, and reference images are embedded with the gated LoRA.

        :param bundles: Sequence[PromptBundle]: One prompt per batch element
        :param ref_images: Sequence[Tensor]: K reference batches ``(B, H, W, 3)`` entering attention
        :param redux_images: Sequence[Tensor] | None: Images feeding the DEM, one per span (defaults to ``ref_images``)
        :param ref_scale: float: LoRA scale on reference segments
        :param use_dem: bool: Update the learnable token (it is used raw otherwise)
        :param use_mask: bool: Apply the selective cross-modal attention mask
        :param splice_mode: SpliceMode: ``first_only`` or ``all``
        :return: A Conditioning reusable across timesteps
        """
        text_tokens, relevance = self.encode_prompts(bundles)
        gate = SegmentGate(ref_scale=ref_scale)
        redux_images = ref_images if redux_images is None else redux_images
        has_learnable = any(bundle.s_star_id is not None and bundle.spans for bundle in bundles)
        if use_dem and has_learnable and redux_images:
            redux = [self.redux(images) for images in redux_images]
            per_element = [[r[b] for r in redux] for b in range(len(bundles))]
            updatable = [bundle if bundle.s_star_id is not None else bundle.model_copy(update={"spans": []})
                         for bundle in bundles]
            text_tokens = dem_ops.apply_dem(text_tokens, updatable, per_element, self.dem, splice_mode)
        ref_tokens = self.dit.embed_refs(ref_images, gate)
        return Conditioning(text_tokens=text_tokens, relevance=relevance, ref_tokens=ref_tokens, gate=gate,
                            use_mask=use_mask)

    def prepare_unconditional(self, batch: int, n_refs: int, ref_scale: float = 1.0,
                              use_mask: bool = True) -> Conditioning:
        """Empty prompt with black references, the condition dropped during training."""
        bundles = [empty_prompt(self.vocab, self.cfg.max_text_len)] * batch
        side = self.cfg.image_side
        blacks = [black_reference(side, side, batch) for _ in range(n_refs)]
        return self.prepare(bundles, blacks, ref_scale=ref_scale, use_dem=False, use_mask=use_mask)

    def prepare_variation(self, images: torch.Tensor) -> Conditioning:
        """Redux tokens stand in for the prompt; the reference slot stays black."""
        tokens = self.redux(images)
        relevance = torch.zeros(tokens.shape[:2], dtype=torch.bool)
        gate = SegmentGate(ref_scale=0.0)
        black = black_reference(self.cfg.image_side, self.cfg.image_side, images.shape[0])
        return Conditioning(text_tokens=tokens, relevance=relevance, ref_tokens=self.dit.embed_refs([black], gate),
                            gate=gate)

    def velocity(self, x_t: torch.Tensor, t: torch.Tensor, cond: Conditioning) -> torch.Tensor:
        return self.dit.forward_tokens(x_t, t, cond.text_tokens, cond.relevance, cond.ref_tokens, cond.gate,
                                       cond.use_mask)

    @torch.no_grad()
    def init_s_star(self, catalog: Sequence[ConceptRecord]) -> None:
        """Sets the learnable token to the mean embedding of every surface-name token in the catalog."""
        ids = [token_id for concept in catalog for token_id in self.vocab.encode(concept.surface_name)]
        self.s_star.copy_(self.text_encoder.table[torch.tensor(ids)].mean(dim=0))


class ParamStore:
    """Named tensors of a model with their group and trainability."""

    def __init__(self, model: AlignGenModel):
        self.model = model

    def named(self) -> Iterator[tuple[str, nn.Parameter]]:
        return self.model.named_parameters()

    def group(self, name: str) -> str:
        return group_of(name)

    def tensors(self, group: str) -> dict[str, nn.Parameter]:
        return {name: p for name, p in self.named() if group_of(name) == group}

    def set_phase(self, phase: Phase) -> None:
        for name, param in self.named():
            base = group_of(name) == "base"
            param.requires_grad_(base if phase == "pretrain" else not base)
        logger.info("phase %s: %d trainable tensors", phase, len(self.trainable()))

    def trainable(self) -> dict[str, nn.Parameter]:
        return {name: p for name, p in self.named() if p.requires_grad}

    def snapshot(self, group: str) -> dict[str, torch.Tensor]:
        return {name: p.detach().clone() for name, p in self.tensors(group).items()}

    def changed_since(self, snapshot: dict[str, torch.Tensor]) -> list[str]:
        """Names whose values differ from ``snapshot`` (empty when nothing moved)."""
        current = dict(self.named())
        return [name for name, value in snapshot.items() if not torch.equal(current[name].detach(), value)]
