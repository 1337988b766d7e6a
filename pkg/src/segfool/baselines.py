"""Comparison attacks adapted to the universal-perturbation loop.

Each baseline is an :class:`~segfool.attack.Objective` plugged into the same
``run_uap_loop`` as DarkSAM, so budget, step, projection, data order and epoch count
are shared. The losses are reconstructions of each method's core idea:

* ``uap``       classic UAP: deviation steps, skipped on images already fooled
* ``uapgd``     push logits away from the clean prediction
* ``ssp``       push encoder features away from the clean features (prompt-free)
* ``segpgd``    BCE toward the inverted clean mask, re-weighting flipped pixels
* ``attacksam`` drive clean-positive logits below zero (mask removal)
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .attack import (AttackConfig, DarkSamObjective, Objective, Uap, adversarial_input, random_prompts,
                     run_uap_loop)
from .datagen import Sample
from .errors import ContractError
from .minisam import MiniSam
from .prompts import Prompt
from .tensor import Tensor

FOOLED_IOU = 0.5  # classic UAP: an image counts as fooled below this agreement with its clean masks


@dataclass
class PromptContext:
    prompts: List[Prompt]
    clean_logits: List[np.ndarray]

    @property
    def clean_masks(self) -> List[np.ndarray]:
        return [z > 0 for z in self.clean_logits]


def _prompt_context(model: MiniSam, sample: Sample, rng: np.random.Generator, config: AttackConfig) -> PromptContext:
    prompts = random_prompts(rng, config.k, config.prompt_type, model.size)
    return PromptContext(prompts, model.logits(sample.image, prompts))


def _adv_logits(model: MiniSam, x: np.ndarray, delta: Tensor, prompts: Sequence[Prompt]) -> List[Tensor]:
    feats = model.encode_image(adversarial_input(x, delta))
    return [model.decode(feats, p) for p in prompts]


def _mean(terms: List[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


def _deviation(model, x, delta, ctx: PromptContext) -> Tensor:
    logits = _adv_logits(model, x, delta, ctx.prompts)
    return T.scale(_mean([T.mse(z, Tensor(c)) for z, c in zip(logits, ctx.clean_logits)]), -1.0)


class RandomStart:
    """Uniform start in [-eps, eps]: deviation losses have zero gradient at delta = 0."""

    def initial_delta(self, shape, config):
        rng = np.random.default_rng([config.seed, 0x57A7])
        return rng.uniform(-config.eps, config.eps, shape).astype(np.float32)


class UapgdObjective(RandomStart, Objective):
    name = "uapgd"

    def prepare(self, model, sample, rng, config):
        return _prompt_context(model, sample, rng, config)

    def loss(self, model, x, delta, ctx, config, epoch):
        return _deviation(model, x, delta, ctx)


class ClassicUapObjective(RandomStart, Objective):
    """Deviation steps only on images the current perturbation does not yet fool."""

    name = "uap"

    def prepare(self, model, sample, rng, config):
        return _prompt_context(model, sample, rng, config)

    def loss(self, model, x, delta, ctx, config, epoch):
        adv = model.logits(np.clip(x + delta.data, 0.0, 1.0).astype(x.dtype), ctx.prompts)
        agree = []
        for z, m in zip(adv, ctx.clean_masks):
            union = np.logical_or(z > 0, m).sum()
            agree.append(1.0 if union == 0 else np.logical_and(z > 0, m).sum() / union)
        if np.mean(agree) < FOOLED_IOU:
            return None
        return _deviation(model, x, delta, ctx)


class SspObjective(RandomStart, Objective):
    name = "ssp"

    def prepare(self, model, sample, rng, config):
        return model.encode_image(Tensor(sample.image)).data

    def loss(self, model, x, delta, ctx, config, epoch):
        feats = model.encode_image(adversarial_input(x, delta))
        return T.scale(T.mse(feats, Tensor(ctx)), -1.0)


class SegPgdObjective(Objective):
    """BCE toward ~clean mask; flipped pixels weigh lam_t = t/(2T), the rest 1 - lam_t."""

    name = "segpgd"

    def prepare(self, model, sample, rng, config):
        return _prompt_context(model, sample, rng, config)

    def loss(self, model, x, delta, ctx, config, epoch):
        lam_t = epoch / (2.0 * max(1, config.epochs))
        terms = []
        for z, clean in zip(_adv_logits(model, x, delta, ctx.prompts), ctx.clean_masks):
            target = (~clean).astype(np.float32)
            flipped = (z.data > 0) != clean
            weight = np.where(flipped, lam_t, 1.0 - lam_t).astype(np.float32)
            terms.append(T.bce_with_logits(z, target, weight))
        return _mean(terms)


class AttackSamObjective(Objective):
    """mse(relu(z) * M, -tau * M) with M the clean-positive pixels."""

    name = "attacksam"

    def prepare(self, model, sample, rng, config):
        return _prompt_context(model, sample, rng, config)

    def loss(self, model, x, delta, ctx, config, epoch):
        terms = []
        for z, clean in zip(_adv_logits(model, x, delta, ctx.prompts), ctx.clean_masks):
            m = clean.astype(np.float32)
            terms.append(T.mse(T.mul(T.relu(z), Tensor(m)), Tensor(-np.float32(config.tau) * m)))
        return _mean(terms)


BASELINES: Dict[str, Callable[[], Objective]] = {
    "uap": ClassicUapObjective,
    "uapgd": UapgdObjective,
    "ssp": SspObjective,
    "segpgd": SegPgdObjective,
    "attacksam": AttackSamObjective,
}
METHODS = ("darksam",) + tuple(BASELINES)


def objective_for(method: str) -> Objective:
    if method == "darksam":
        return DarkSamObjective()
    if method not in BASELINES:
        raise ContractError(f"unknown method {method!r}; expected one of {METHODS}")
    return BASELINES[method]()


def craft_baseline(kind: Union[str, Objective], model: MiniSam, train_samples: Sequence[Sample],
                   config: AttackConfig, progress: Optional[Callable[[int, float], None]] = None) -> Uap:
    """Run the shared loop with a baseline loss; ``kind`` may also be an Objective instance."""
    objective = kind if isinstance(kind, Objective) else objective_for(kind)
    return run_uap_loop(model, train_samples, config, objective, progress)
