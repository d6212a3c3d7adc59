"""
Two-phase training. Pretraining fits the base model on (caption, image) pairs with black references;
adaptation freezes it and trains the LoRA adapters, the DEM and the learnable token on reference pairs
with reference dropout and concept-name substitution.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from align_gen_app.schemas import CaptionRecord, ConceptRecord, PairRecord, PromptBundle, TrainConfig
from align_gen_app.services import flow
from align_gen_app.services.encoders import black_reference
from align_gen_app.services.errors import DataError, NumericError, UsageError
from align_gen_app.services.model import AlignGenModel, ParamStore
from align_gen_app.services.promptkit import build_prompt, empty_prompt, sample_name_level
from align_gen_app.services.synthdata import caption_concept, make_concept, record_template

logger = logging.getLogger(__name__)


@dataclass
class StepRecord:
    step: int
    loss: float
    grad_norm: float
    dropped_refs: int


@dataclass
class TrainResult:
    phase: str
    log: list[StepRecord] = field(default_factory=list)
    skipped_steps: int = 0
    dropped_refs: int = 0
    references_seen: int = 0

    @property
    def initial_loss(self) -> Optional[float]:
        return self.log[0].loss if self.log else None

    @property
    def final_loss(self) -> Optional[float]:
        return self.log[-1].loss if self.log else None


class StepGuard:
    """Counts optimizer steps skipped for non-finite gradients and aborts after too many in a row."""

    def __init__(self, max_consecutive: int = 50):
        self.max_consecutive = max_consecutive
        self.consecutive = 0
        self.total = 0

    def skip(self, step: int, reason: str) -> None:
        self.consecutive += 1
        self.total += 1
        logger.warning("step %d skipped: %s (%d in a row)", step, reason, self.consecutive)
        if self.consecutive >= self.max_consecutive:
            raise NumericError(f"{self.consecutive} consecutive optimizer steps skipped, last at step {step}: {reason}")

    def ok(self) -> None:
        self.consecutive = 0


class DivergenceMonitor:
    """Aborts when the loss stays above ``factor`` times the first loss for ``patience`` consecutive steps."""

    def __init__(self, factor: float = 10.0, patience: int = 200):
        self.factor = factor
        self.patience = patience
        self.initial: Optional[float] = None
        self.streak = 0

    def update(self, step: int, loss: float) -> None:
        if self.initial is None:
            self.initial = loss
            return
        self.streak = self.streak + 1 if loss > self.factor * self.initial else 0
        if self.streak >= self.patience:
            raise NumericError(f"training diverged at step {step}: loss {loss:.4g} above {self.factor:g}x the "
                               f"initial {self.initial:.4g} for {self.streak} steps")


def build_optimizer(store: ParamStore, cfg: TrainConfig) -> torch.optim.AdamW:
    """
    The build_optimizer function creates AdamW over the trainable tensors of the current phase.

    Weight decay applies to matrices only; vectors (biases, norm gains) and the learnable token are not decayed.

    :param store: ParamStore: Parameters with their phase flags already set
    :param cfg: TrainConfig: Learning rate and weight decay
    :return: The optimizer
    """
    decay, no_decay = [], []
    for name, param in store.trainable().items():
        if param.ndim >= 2 and store.group(name) != "s_star":
            decay.append(param)
        else:
            no_decay.append(param)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    groups = [group for group in groups if group["params"]]
    if not groups:
        raise UsageError(f"no trainable parameters in phase {cfg.phase}")
    return torch.optim.AdamW(groups, lr=cfg.lr)


def optimizer_step(optimizer: torch.optim.Optimizer, guard: StepGuard, step: int = 0) -> bool:
    """
    Applies one update from the gradients already stored on the parameters.

    Non-finite gradients skip the update (counted by ``guard``) and clear the gradients.

    :return: True when the parameters were updated
    """
    params = [p for group in optimizer.param_groups for p in group["params"] if p.grad is not None]
    if any(not torch.isfinite(p.grad).all() for p in params):
        optimizer.zero_grad(set_to_none=True)
        guard.skip(step, "non-finite gradients")
        return False
    optimizer.step()
    guard.ok()
    return True


def _stack(images: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images)).float()


def _grad_norm(params: Sequence[torch.Tensor]) -> float:
    return torch.nn.utils.clip_grad_norm_(params, float("inf")).item()


def pretrain_loss(model: AlignGenModel, bundles: Sequence[PromptBundle], images: torch.Tensor,
                  generator: torch.Generator, redux_aux_weight: float = 0.5) -> torch.Tensor:
    """
    Flow-matching loss of a caption batch with black references and no learnable-token update, plus
    the redux auxiliary term where the image's redux tokens stand in for the caption.
    """
    side = model.cfg.image_side
    cond = model.prepare(bundles, [black_reference(side, side, images.shape[0])], ref_scale=0.0, use_dem=False)
    sample = flow.make_flow_sample(images, generator)
    value = flow.loss(sample, lambda x_t, t: model.velocity(x_t, t, cond))
    if redux_aux_weight > 0:
        variation = model.prepare_variation(images)
        value = value + redux_aux_weight * flow.loss(sample, lambda x_t, t: model.velocity(x_t, t, variation))
    return value


def adapt_loss(model: AlignGenModel, bundles: Sequence[PromptBundle], refs: torch.Tensor, redux_refs: torch.Tensor,
               targets: torch.Tensor, generator: torch.Generator, cfg: TrainConfig) -> torch.Tensor:
    """
    Flow-matching loss of a pair batch; ``refs`` enter attention (black where dropped) while the DEM
    always reads ``redux_refs``.
    """
    cond = model.prepare(bundles, [refs], [redux_refs], ref_scale=1.0, use_dem=cfg.use_dem, use_mask=cfg.use_mask,
                         splice_mode=cfg.splice_mode)
    sample = flow.make_flow_sample(targets, generator)
    return flow.loss(sample, lambda x_t, t: model.velocity(x_t, t, cond))


class _Loop:
    """Shared step bookkeeping of both phases."""

    def __init__(self, store: ParamStore, cfg: TrainConfig):
        self.cfg = cfg
        self.optimizer = build_optimizer(store, cfg)
        self.params = [p for group in self.optimizer.param_groups for p in group["params"]]
        self.guard = StepGuard(cfg.max_skipped_steps)
        self.monitor = DivergenceMonitor(cfg.divergence_factor, cfg.divergence_patience)
        self.result = TrainResult(phase=cfg.phase)

    def run_step(self, step: int, compute_loss, dropped: int = 0, batch: int = 0) -> None:
        self.optimizer.zero_grad(set_to_none=True)
        try:
            value = compute_loss()
        except NumericError as err:
            self.guard.skip(step, err.message)
            return
        value.backward()
        grad_norm = _grad_norm(self.params)
        if not optimizer_step(self.optimizer, self.guard, step):
            return
        loss = value.item()
        self.monitor.update(step, loss)
        self.result.log.append(StepRecord(step=step, loss=loss, grad_norm=grad_norm, dropped_refs=dropped))
        self.result.dropped_refs += dropped
        self.result.references_seen += batch
        if self.cfg.log_every and step % self.cfg.log_every == 0:
            logger.info("%s step %d: loss %.5f, grad norm %.4f", self.cfg.phase, step, loss, grad_norm)

    def finish(self) -> TrainResult:
        self.result.skipped_steps = self.guard.total
        if self.result.log:
            logger.info("%s finished: loss %.5f -> %.5f, %d skipped steps", self.cfg.phase, self.result.initial_loss,
                        self.result.final_loss, self.result.skipped_steps)
        return self.result


def pretrain(corpus: Sequence[tuple[CaptionRecord, np.ndarray]], model: AlignGenModel, cfg: TrainConfig,
             progress: bool = False) -> TrainResult:
    """
    The pretrain function fits the base group on captioned images.

    Captions carry no learnable token; with probability ``cfg.uncond_prob`` a caption is replaced by
    the empty prompt so the guidance branch is trained too. The reference slot always holds black
    images with the LoRA scale at zero.

    :param corpus: Sequence[tuple[CaptionRecord, ndarray]]: Records with their ``(H, W, 3)`` images
    :param model: AlignGenModel: Model whose base tensors are trained in place
    :param cfg: TrainConfig: Phase ``pretrain`` settings
    :param progress: bool: Show a tqdm progress bar
    :return: A TrainResult with the per-step log
    """
    if cfg.phase != "pretrain":
        raise UsageError(f"pretrain called with phase {cfg.phase!r}")
    if not corpus:
        raise DataError("pretraining corpus is empty")
    store = ParamStore(model)
    store.set_phase("pretrain")
    vocab, max_len = model.vocab, model.cfg.max_text_len
    captions = [build_prompt(record_template(record), caption_concept(record), record.name_level, vocab, max_len,
                             use_s_star=False) for record, _ in corpus]
    images = _stack([image for _, image in corpus])
    uncond = empty_prompt(vocab, max_len)
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    loop = _Loop(store, cfg)
    for step in tqdm(range(cfg.iterations), desc="pretrain", disable=not progress):
        index = rng.integers(len(corpus), size=cfg.batch_size)
        bundles = [uncond if rng.random() < cfg.uncond_prob else captions[i] for i in index]
        batch = images[torch.from_numpy(index)]
        loop.run_step(step, lambda: pretrain_loss(model, bundles, batch, generator, cfg.redux_aux_weight))
    return loop.finish()


def adapt(pairs: Sequence[tuple[PairRecord, np.ndarray, np.ndarray]], model: AlignGenModel, cfg: TrainConfig,
          catalog: Optional[Sequence[ConceptRecord]] = None, progress: bool = False) -> TrainResult:
    """
    The adapt function trains the LoRA, DEM and learnable-token groups on the ``train`` split of a pair dataset.

    Per batch element the reference is replaced by a black image with probability ``cfg.drop_ratio``
    and the concept name level is drawn from ``cfg.name_level_probs``. Base tensors are compared
    against a snapshot after every step and any change is a hard failure.

    :param pairs: Sequence[tuple[PairRecord, ndarray, ndarray]]: Records with reference and target images
    :param model: AlignGenModel: Pretrained model, adapted in place
    :param cfg: TrainConfig: Phase ``adapt`` settings
    :param catalog: Sequence[ConceptRecord] | None: When given, the learnable token is initialised from its surface names
    :param progress: bool: Show a tqdm progress bar
    :return: A TrainResult with the per-step log and the dropout count
    """
    if cfg.phase != "adapt":
        raise UsageError(f"adapt called with phase {cfg.phase!r}")
    pairs = [pair for pair in pairs if pair[0].split == "train"]
    if not pairs:
        raise DataError("pair dataset has no training records")
    store = ParamStore(model)
    store.set_phase("adapt")
    if catalog is not None:
        model.init_s_star(catalog)
    frozen = store.snapshot("base")
    vocab, max_len, side = model.vocab, model.cfg.max_text_len, model.cfg.image_side
    concepts = [make_concept(r.attrs.shape_class, r.attrs.color_name, r.attrs.pattern) for r, _, _ in pairs]
    references = _stack([reference for _, reference, _ in pairs])
    targets = _stack([target for _, _, target in pairs])
    black = black_reference(side, side)
    rng = np.random.default_rng(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    loop = _Loop(store, cfg)
    for step in tqdm(range(cfg.iterations), desc="adapt", disable=not progress):
        index = rng.integers(len(pairs), size=cfg.batch_size)
        dropped = torch.from_numpy(rng.random(cfg.batch_size) < cfg.drop_ratio)
        bundles = [build_prompt(record_template(pairs[i][0]), concepts[i], sample_name_level(rng, cfg.name_level_probs),
                                vocab, max_len, use_s_star=cfg.use_s_star) for i in index]
        true_refs = references[torch.from_numpy(index)]
        refs = torch.where(dropped[:, None, None, None], black, true_refs)
        batch = targets[torch.from_numpy(index)]
        loop.run_step(step, lambda: adapt_loss(model, bundles, refs, true_refs, batch, generator, cfg),
                      dropped=int(dropped.sum()), batch=cfg.batch_size)
        changed = store.changed_since(frozen)
        if changed:
            raise AssertionError(f"base parameters changed during adaptation: {', '.join(changed[:5])}")
    return loop.finish()
