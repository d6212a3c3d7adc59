import copy

import numpy as np
import pytest
import torch

from align_gen_app.schemas import CorpusSpec, DitConfig, SampleConfig, TrainConfig
from align_gen_app.services import evalkit, trainer
from align_gen_app.services.model import AlignGenModel
from align_gen_app.services.promptkit import SHAPES, default_vocabulary
from align_gen_app.services.synthdata import (
    concept_from_id,
    default_skew,
    gen_catalog,
    make_pair_dataset,
    make_pretrain_corpus,
)

pytestmark = pytest.mark.slow

PRETRAIN_ITERATIONS = 20000
ADAPT_ITERATIONS = 5000
SAMPLING = SampleConfig(steps=28, guidance=3.5, seed=0)


@pytest.fixture(scope="module")
def desk_data():
    rng = np.random.default_rng(11)
    catalog = gen_catalog(48, rng)
    corpus = make_pretrain_corpus(CorpusSpec(n_concepts=48, images_per_concept=40, prior_skew=default_skew()), rng)
    pairs = make_pair_dataset(catalog, rng, pairs_per_concept=40)
    return catalog, corpus, pairs


@pytest.fixture(scope="module")
def base_model(desk_data):
    _, corpus, _ = desk_data
    torch.manual_seed(0)
    model = AlignGenModel(DitConfig(), default_vocabulary())
    trainer.pretrain(corpus, model, TrainConfig(phase="pretrain", iterations=PRETRAIN_ITERATIONS, log_every=0))
    model.eval()
    return model


@pytest.fixture(scope="module")
def adapted_model(desk_data, base_model):
    catalog, _, pairs = desk_data
    model = copy.deepcopy(base_model)
    trainer.adapt(pairs, model, TrainConfig(phase="adapt", iterations=ADAPT_ITERATIONS, lr=3e-4, log_every=0), catalog)
    model.eval()
    return model


def _probe_inputs(pairs):
    seen = {}
    for record, reference, _ in pairs:
        if record.split == "test" and record.concept_id not in seen:
            seen[record.concept_id] = reference
    return [concept_from_id(cid) for cid in seen], list(seen.values())


@pytest.mark.parametrize("shape", SHAPES)
def test_pretraining_manufactures_colour_prior(base_model, shape):
    rate = evalkit.prior_rate(base_model, shape, list(range(50)), SAMPLING)
    assert rate >= 0.7


def test_unadapted_model_ignores_reference(desk_data, base_model):
    concepts, references = _probe_inputs(desk_data[2])
    report = evalkit.misalignment_probe(base_model, concepts, references, list(range(20)), SAMPLING)
    assert abs(report.delta) < 0.05


def test_adapted_model_follows_reference(desk_data, adapted_model):
    concepts, references = _probe_inputs(desk_data[2])
    report = evalkit.misalignment_probe(adapted_model, concepts, references, list(range(20)), SAMPLING)
    assert report.delta >= 0.15


def test_ablation_ordering(desk_data, base_model):
    catalog, _, pairs = desk_data
    variants = ["full", "no_lt", "no_dem", "no_mask", "no_ts", "replace_all",
                "drop_0.1", "drop_0.3", "drop_0.5", "drop_0.7", "drop_0.9"]
    reports = evalkit.ablation_run(pairs, lambda: copy.deepcopy(base_model), variants,
                                   TrainConfig(phase="adapt", iterations=ADAPT_ITERATIONS, lr=3e-4, log_every=0),
                                   SAMPLING, list(range(4)), catalog)
    assert evalkit.ablation_findings(reports) == []
