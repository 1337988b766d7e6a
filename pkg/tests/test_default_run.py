"""Post-training measurements on the shared default run."""
import numpy as np

from segfool import tensor as T
from segfool.datagen import extract_point_prompt
from segfool.evaluation import everything_mode, iou, miou
from segfool.minisam import binarize
from segfool.tensor import Tensor


def test_point_prompts_recover_their_instance(default_run):
    run = default_run
    rng = np.random.default_rng(0)
    scores = []
    for s in run.test:
        prompts = [extract_point_prompt(m, rng) for m in s.instances]
        for z, m in zip(run.model.logits(s.image, prompts), s.instances):
            scores.append(iou(binarize(z), m))
    assert np.mean(np.array(scores) >= 0.7) >= 0.9


def test_model_conditions_on_the_prompt(default_run):
    run = default_run
    rng = np.random.default_rng(1)
    differs = []
    for s in run.test:
        if len(s.instances) < 2:
            continue
        p = [extract_point_prompt(m, rng) for m in s.instances[:2]]
        a, b = (binarize(z) for z in run.model.logits(s.image, p))
        differs.append(np.mean(a != b) >= 0.01)
    assert np.mean(differs) >= 0.9


def test_everything_union_matches_scene(default_run):
    run = default_run
    preds, truths = [], []
    for s in run.test[:50]:
        gt = np.zeros_like(s.instances[0])
        for m in s.instances:
            gt |= m
        preds.append(everything_mode(run.model, s.image))
        truths.append(gt)
    assert miou(preds, truths) >= 0.6


def test_image_gradient_is_nonzero(default_run):
    x = Tensor(default_run.test[0].image, requires_grad=True)
    z = default_run.model.predict(x, extract_point_prompt(default_run.test[0].instances[0],
                                                          np.random.default_rng(0)))
    T.backward(T.reduce_mean(z))
    assert np.abs(x.grad).max() > 0


def test_attack_loss_falls(default_run):
    history = default_run.uap.history
    assert len(history) == default_run.config.attack_config().epochs
    assert history[0] > history[-1]
